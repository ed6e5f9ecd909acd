import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridepool.bench import bundled_networks
from ridepool.domain import Mode, Order, PairingConfig, Stop, Vehicle, best_mode, pair_candidate
from ridepool.network import ODPair, grid_network
from ridepool.prediction import PredictionTables, build_state_space, solve_fixed_point
from ridepool.strategies import (UNASSIGNED, WAIT, ConfigurationError, MatchEdge, Option,
                                 Snapshot, Strategy, UtilityContext, build_edges,
                                 candidate_options, dispatch_round, rtv_assign, solve_assignment,
                                 utility_fl, utility_fl_no_delay, utility_myopic,
                                 utility_naive_combined)

from conftest import line_network


class FakeTables:
    """Just the lookups a utility needs."""

    def __init__(self, e_vacant=0.0, p_s=0.0, e_seeker=0.0):
        self.e_vacant, self.p_s, self.e_seeker = e_vacant, p_s, e_seeker

    def vacant_saving(self, key):
        return self.e_vacant

    def seeker_probability(self, key):
        return self.p_s

    def seeker_saving(self, key):
        return self.e_seeker


def order(k=0, oid=0):
    return Order(oid, ODPair(0, 1), 0.0, rounds_waited=k)


def ctx(**kw):
    tables = FakeTables(kw.pop("e_vacant", 0.0), kw.pop("p_s", 0.0), kw.pop("e_seeker", 0.0))
    return UtilityContext(tables=tables, **kw)


# -- utilities --------------------------------------------------------------


def test_myopic_values():
    c = ctx()
    assert utility_myopic(order(), Option("vacant", 1, 0.0), c) == 0.0
    assert utility_myopic(order(), Option("partial", 1, 300.0, 1000.0), c) == 700.0
    with pytest.raises(ValueError):
        utility_myopic(order(), Option.wait(), c)


def test_forward_looking_values():
    c = ctx(alpha=1.01)
    assert utility_fl(order(0), Option("partial", 1, 0.0, 1000.0), c) == 1000.0
    assert utility_fl(order(2), Option("partial", 1, 1000.0, 1000.0), c) == pytest.approx(510.05)
    assert utility_fl(order(0), Option("partial", 1, 100.0, -50.0), c) == 0.0


def test_forward_looking_with_no_future_opportunity():
    c = ctx(e_vacant=0.0, l_bar=250.0)
    assert utility_fl(order(), Option("vacant", 1, 400.0), c) == 0.0
    assert utility_fl(order(), Option.wait(), c) == -250.0


def test_no_delay_values():
    c = ctx(e_vacant=500.0)
    vacant = utility_fl_no_delay(order(), Option("vacant", 1, 200.0), c)
    partial = utility_fl_no_delay(order(), Option("partial", 2, 200.0, 450.0), c)
    assert (vacant, partial) == (300.0, 250.0)
    assert utility_fl_no_delay(order(), Option("vacant", 1, 200.0), ctx()) == -200.0
    with pytest.raises(ValueError):
        utility_fl_no_delay(order(), Option.wait(), c)


def test_naive_combined_ignores_waiting_rounds():
    c = ctx(e_vacant=800.0, p_s=0.4, e_seeker=1200.0, l_bar=300.0, r_w=0.75, k_rounds=9)
    opt = Option("vacant", 1, 350.0)
    assert utility_naive_combined(order(5), opt, c) == utility_naive_combined(order(0), opt, c)
    expected = (1 - 0.25 ** 9) * (0.4 * 1200.0 + 0.6 * 800.0) - 300.0
    assert utility_naive_combined(order(0), Option.wait(), c) == pytest.approx(expected)
    assert utility_naive_combined(order(0), Option.wait(), ctx(l_bar=10.0)) == -10.0


def test_wait_value_vanishes_at_last_round():
    c = ctx(e_vacant=800.0, p_s=0.4, e_seeker=1200.0, l_bar=0.0, k_rounds=9)
    assert utility_fl(order(9), Option.wait(), c) == 0.0
    assert utility_fl(order(12), Option.wait(), c) == 0.0


def test_context_validation():
    with pytest.raises(ValueError):
        UtilityContext(alpha=0.0)
    with pytest.raises(ValueError):
        UtilityContext(r_w=1.5)


positive = st.floats(1.0, 5000.0)
pickups = st.floats(0.0, 3000.0)


@settings(max_examples=200, deadline=None)
@given(e=positive, pk=pickups, k1=st.integers(0, 20), k2=st.integers(0, 20))
def test_longer_wait_gets_priority(e, pk, k1, k2):
    if k1 == k2:
        return
    c = ctx(alpha=1.01)
    lo, hi = sorted((k1, k2))
    opt = Option("partial", 1, pk, e)
    assert utility_fl(order(hi), opt, c) > utility_fl(order(lo), opt, c)


@settings(max_examples=200, deadline=None)
@given(e1=positive, e2=positive, pk=pickups, k=st.integers(0, 20), alpha=st.floats(0.5, 2.0))
def test_larger_saving_gets_priority(e1, e2, pk, k, alpha):
    if e1 == e2:
        return
    c = ctx(alpha=alpha)
    lo, hi = sorted((e1, e2))
    assert (utility_fl(order(k), Option("partial", 1, pk, hi), c)
            > utility_fl(order(k), Option("partial", 1, pk, lo), c))


# -- assignment --------------------------------------------------------------


def test_singleton_and_dominance():
    res = solve_assignment([MatchEdge(0, "v", 5.0)], [0])
    assert res.assignments[0].option == "v" and res.objective == 5.0
    edges = [MatchEdge(0, "v", 5.0), MatchEdge(1, "v", 7.0),
             MatchEdge(0, WAIT, 0.0), MatchEdge(1, WAIT, 0.0)]
    res = solve_assignment(edges, [0, 1])
    assert res.assignments[1].option == "v"
    assert res.assignments[0].option == WAIT
    assert res.objective == 7.0


def test_unassigned_only_when_nothing_else_fits():
    # a negative-utility vehicle still beats leaving the passenger unassigned
    edges = [MatchEdge(0, "v", -900.0), MatchEdge(0, UNASSIGNED, 0.0),
             MatchEdge(1, "v", -100.0), MatchEdge(1, UNASSIGNED, 0.0)]
    res = solve_assignment(edges, [0, 1])
    assert res.assignments[1].option == "v"
    assert res.assignments[0].option == UNASSIGNED


def test_passenger_without_options_is_an_error():
    with pytest.raises(ValueError):
        solve_assignment([MatchEdge(0, "v", 1.0)], [0, 1])


def brute_force(n_p, utilities, wait):
    """Best total over all assignments; utilities[p][v] is None when absent."""
    n_v = len(utilities[0])
    best = -np.inf
    for choice in itertools.product(range(-1, n_v), repeat=n_p):
        used = [v for v in choice if v >= 0]
        if len(used) != len(set(used)):
            continue
        total = 0.0
        for p, v in enumerate(choice):
            u = wait[p] if v < 0 else utilities[p][v]
            if u is None:
                break
            total += u
        else:
            best = max(best, total)
    return best


@pytest.mark.parametrize("integer", [True, False])
def test_matches_brute_force(integer):
    rng = np.random.default_rng(7 if integer else 8)
    for _ in range(30):
        n_p, n_v = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        util = [[None if rng.random() < 0.3 else
                 (float(rng.integers(-50, 100)) if integer else float(rng.normal(0, 100)))
                 for _ in range(n_v)] for _ in range(n_p)]
        wait = [float(rng.integers(-20, 20)) if integer else float(rng.normal(0, 30))
                for _ in range(n_p)]
        edges = [MatchEdge(p, v, u) for p in range(n_p) for v, u in enumerate(util[p])
                 if u is not None]
        edges += [MatchEdge(p, WAIT, wait[p]) for p in range(n_p)]
        res = solve_assignment(edges, list(range(n_p)))
        expected = brute_force(n_p, util, wait)
        if integer:
            assert res.objective == expected
        else:
            assert res.objective == pytest.approx(expected, abs=1e-9)


def test_assignment_is_deterministic():
    edges = [MatchEdge(p, v, 1.0) for p in range(3) for v in range(3)]
    first = solve_assignment(edges, [0, 1, 2]).assignments
    for _ in range(3):
        assert solve_assignment(list(reversed(edges)), [2, 1, 0]).assignments == first


def test_pickup_tiebreak_prefers_nearer_vehicle():
    edges = [MatchEdge(0, "far", 0.0, pickup=2000.0), MatchEdge(0, "near", 0.0, pickup=100.0)]
    res = solve_assignment(edges, [0], pickup_tiebreak=1e-7)
    assert res.assignments[0].option == "near"
    assert res.objective == 0.0


# -- dispatch --------------------------------------------------------------------


def snapshot(net, waiting, vehicles, onboard, final=lambda o: False, cfg=PairingConfig()):
    return Snapshot(net, waiting, vehicles, onboard, cfg, 0, final)


def figure_scene():
    """Waiting passenger at node 1 of a line; two partial vehicles and one vacant."""
    net = line_network(6)
    p = Order(0, ODPair.on(net, 1, 5), 0.0)
    v1 = Vehicle(1, 1, onboard=[10], stops=[Stop(5, "dropoff", 10)])
    v2 = Vehicle(2, 2, onboard=[11], stops=[Stop(3, "dropoff", 11)])
    v3 = Vehicle(3, 0)
    onboard = {1: ODPair.on(net, 0, 5), 2: ODPair.on(net, 2, 3)}
    return net, p, [v1, v2, v3], onboard


def test_candidate_options_match_scalar_geometry():
    net, p, vehicles, onboard = figure_scene()
    opts = {o.vehicle_id: o for o in candidate_options(snapshot(net, [p], vehicles, onboard))[0]}
    assert opts[3].kind == "vacant" and opts[3].pickup == 1000.0
    for vid in (1, 2):
        cand = pair_candidate(net, onboard[vid], p, vehicles[vid - 1], PairingConfig())
        if cand is None:
            assert vid not in opts
        else:
            assert (opts[vid].saving, opts[vid].mode) == (cand.saving, cand.mode)


def test_myopic_takes_the_immediate_pair():
    net, p, vehicles, onboard = figure_scene()
    res = dispatch_round(Strategy.MB, snapshot(net, [p], vehicles, onboard), UtilityContext())
    assert res.assignments[0].option == 1
    assert res.assignments[0].saving == 4000.0


def test_forward_looking_can_prefer_waiting():
    net, p, vehicles, onboard = figure_scene()
    c = ctx(e_vacant=100.0, p_s=0.9, e_seeker=9000.0, l_bar=0.0, k_rounds=9)
    res = dispatch_round(Strategy.FL, snapshot(net, [p], vehicles, onboard), c)
    assert res.assignments[0].option == WAIT
    # in the final round waiting is not offered
    final = snapshot(net, [p], vehicles, onboard, final=lambda o: True)
    assert dispatch_round(Strategy.FL, final, c).assignments[0].option == 1


def test_no_pooling_uses_vacant_only():
    net, p, vehicles, onboard = figure_scene()
    res = dispatch_round(Strategy.NP, snapshot(net, [p], vehicles, onboard), UtilityContext())
    assert res.assignments[0].option == 3


def test_table_strategies_need_tables():
    net, p, vehicles, onboard = figure_scene()
    with pytest.raises(ConfigurationError, match="predict"):
        dispatch_round(Strategy.FL, snapshot(net, [p], vehicles, onboard), UtilityContext())


def test_wait_edges_only_for_delaying_strategies():
    net, p, vehicles, onboard = figure_scene()
    snap = snapshot(net, [p], vehicles, onboard)
    kinds = {s: {e.option for e in build_edges(s, snap, ctx())} for s in Strategy
             if s is not Strategy.RTV}
    assert WAIT in kinds[Strategy.FL] and WAIT in kinds[Strategy.FL_NAIVE]
    for s in (Strategy.MB, Strategy.NP, Strategy.FL_NO_DELAY):
        assert WAIT not in kinds[s] and UNASSIGNED in kinds[s]


# -- RTV ---------------------------------------------------------------------------


def rtv_brute_force(net, orders, vehicles, onboard, cfg):
    """Lexicographic best (served, value) by enumerating every trip-vehicle plan."""
    by_id = {v.id: v for v in vehicles}

    def single(o, v):
        pk = net.shortest_distance(v.location, o.origin)
        if v.is_vacant:
            return -pk if pk < cfg.max_pickup else None
        if v.is_partial:
            cand = pair_candidate(net, onboard[v.id], o, v, cfg)
            return None if cand is None else cand.saving - cand.pickup
        return None

    def pair(a, b, v):
        if not v.is_vacant:
            return None
        best = None
        for f, s in ((a, b), (b, a)):
            if not net.shortest_distance(f.origin, s.origin) < cfg.max_pickup:
                continue
            pk = net.shortest_distance(v.location, f.origin)
            found = best_mode(net, f.od, s.od, f.origin, cfg.max_detour)
            if found is None or not pk < cfg.max_pickup:
                continue
            value = found[1] - pk
            best = value if best is None else max(best, value)
        return best

    best = (0, 0.0)

    def rec(rest, free, served, value):
        nonlocal best
        if not rest:
            if (served, value) > (best[0], best[1] + 1e-9) or (
                    served == best[0] and value > best[1]):
                best = (served, value)
            return
        o, tail = rest[0], rest[1:]
        rec(tail, free, served, value)
        for vid in free:
            u = single(o, by_id[vid])
            if u is not None:
                rec(tail, free - {vid}, served + 1, value + u)
            for other in tail:
                u = pair(o, other, by_id[vid])
                if u is not None:
                    rec([x for x in tail if x is not other], free - {vid}, served + 2, value + u)

    rec(list(orders), frozenset(by_id), 0, 0.0)
    return best


def test_rtv_matches_brute_force():
    net = grid_network(4, 4, 500.0)
    cfg = PairingConfig(max_pickup=1600.0, max_detour=1200.0)
    rng = np.random.default_rng(21)
    for _ in range(25):
        n_r, n_v = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        orders = []
        for i in range(n_r):
            o, d = (int(x) for x in rng.choice(16, 2, replace=False))
            orders.append(Order(i, ODPair.on(net, o, d), 0.0))
        vehicles, onboard = [], {}
        for j in range(n_v):
            loc = int(rng.integers(16))
            if rng.random() < 0.4:
                o, d = (int(x) for x in rng.choice(16, 2, replace=False))
                vehicles.append(Vehicle(100 + j, loc, onboard=[900 + j],
                                        stops=[Stop(d, "dropoff", 900 + j)]))
                onboard[100 + j] = ODPair.on(net, o, d)
            else:
                vehicles.append(Vehicle(100 + j, loc))
        res = rtv_assign(snapshot(net, orders, vehicles, onboard, cfg=cfg), UtilityContext(cfg=cfg))
        served = sum(1 for a in res.assignments.values() if a.option != UNASSIGNED)
        expected = rtv_brute_force(net, orders, vehicles, onboard, cfg)
        assert served == expected[0]
        assert res.objective == pytest.approx(expected[1], abs=1e-6)


def test_rtv_pairs_two_waiting_requests_on_one_vehicle():
    net = line_network(5)
    a = Order(0, ODPair.on(net, 1, 4), 0.0)
    b = Order(1, ODPair.on(net, 1, 4), 0.0)
    res = rtv_assign(snapshot(net, [a, b], [Vehicle(7, 0)], {}), UtilityContext())
    assert res.assignments[0].option == res.assignments[1].option == 7
    assert {res.assignments[0].partner, res.assignments[1].partner} == {0, 1}
    assert res.assignments[0].saving == 3000.0


def test_rtv_with_real_tables_runs():
    net, rates = bundled_networks()["grid4"]
    space = build_state_space(net, [ODPair.on(net, *k) for k in sorted(rates)], PairingConfig())
    tb = solve_fixed_point(space, rates)
    assert isinstance(tb, PredictionTables)
    orders = [Order(i, ODPair.on(net, *k), 0.0) for i, k in enumerate(sorted(rates))]
    res = dispatch_round("rtv", snapshot(net, orders, [Vehicle(1, 0), Vehicle(2, 15)], {}),
                         UtilityContext(tables=tb))
    res.check([o.id for o in orders])
    assert res.assignments[0].mode in (Mode.FOFO, Mode.FOLO, Mode.NONE)


def test_detour_already_ridden_counts_against_the_limit():
    net = line_network(6)
    cfg = PairingConfig(max_detour=1000.0)
    p = Order(0, ODPair.on(net, 2, 4), 0.0)
    v = Vehicle(1, 1, onboard=[10], stops=[Stop(5, "dropoff", 10)])
    onboard = {1: ODPair.on(net, 0, 5)}
    snap = snapshot(net, [p], [v], onboard, cfg=cfg)
    assert [o.vehicle_id for o in candidate_options(snap)[0]] == [1]
    snap.onboard_extra[1] = 1500.0
    assert candidate_options(snap)[0] == []


def test_vectorised_options_agree_with_scalar_pairing():
    net = grid_network(4, 4, 500.0)
    cfg = PairingConfig(max_pickup=2500.0, max_detour=1500.0)
    rng = np.random.default_rng(5)
    for _ in range(40):
        vehicles, onboard = [], {}
        for j in range(4):
            o, d = (int(x) for x in rng.choice(16, 2, replace=False))
            loc = int(rng.integers(16))
            if rng.random() < 0.5:
                v = Vehicle(j, loc, onboard=[100 + j], stops=[Stop(d, "dropoff", 100 + j)])
            else:
                v = Vehicle(j, loc, stops=[Stop(o, "pickup", 100 + j), Stop(d, "dropoff", 100 + j)])
            vehicles.append(v)
            onboard[j] = ODPair.on(net, o, d)
        o, d = (int(x) for x in rng.choice(16, 2, replace=False))
        p = Order(0, ODPair.on(net, o, d), 0.0)
        opts = {x.vehicle_id: x for x in candidate_options(snapshot(net, [p], vehicles, onboard,
                                                                    cfg=cfg))[0]}
        for v in vehicles:
            cand = pair_candidate(net, onboard[v.id], p, v, cfg)
            if cand is None:
                assert v.id not in opts
            else:
                got = opts[v.id]
                assert (got.pickup, got.saving, got.mode) == (cand.pickup, cand.saving, cand.mode)
