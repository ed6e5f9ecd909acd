import dataclasses

import numpy as np
import pytest

from ridepool.bench import desk_config, desk_demand, desk_network, desk_tables
from ridepool.network import RoadNetwork
from ridepool.prediction import DemandProfile
from ridepool.simulator import (EVENT_FIELDS, METRIC_FIELDS, Pricing, SimConfig,
                                audit_pooled_trips, compute_profit, generate_demand,
                                metrics_csv, read_events, recompute_from_events, run,
                                write_events)
from ridepool.strategies import ConfigurationError

from conftest import line_network


def cycle(speed=100.0):
    """One-way ring 0 -> 1 -> 2 -> 3 -> 0, so a vacant vehicle's walk is forced."""
    return RoadNetwork([(0, 1, 1000.0), (1, 2, 1000.0), (2, 3, 1000.0), (3, 0, 1000.0)],
                       speed=speed)


def ring_cfg(**kw):
    return SimConfig(dt=10.0, horizon=60.0, max_pickup=5000.0, **kw)


# -- pricing ------------------------------------------------------------------


def dropoff(ride, shared):
    return (0.0, "dropoff", 0, 0, 0, f"ride_m={ride};shared_m={shared};solo_m={ride};pooled=0")


def episode(route):
    return (0.0, "episode", 0, 0, 0, f"riders=0;route_m={route};solo_m={route};saving_m=0.0")


def test_profit_of_a_solo_trip():
    # 10 km alone: fare 50, driver 20
    assert compute_profit([dropoff(10000.0, 0.0), episode(10000.0)]) == pytest.approx(30.0)


def test_profit_of_a_shared_trip():
    events = [dropoff(10000.0, 10000.0), dropoff(10000.0, 10000.0), episode(10000.0)]
    assert compute_profit(events) == pytest.approx(50.0)
    assert compute_profit(events, Pricing(5.0, 5.0, 0.0)) == pytest.approx(100.0)


# -- demand -----------------------------------------------------------------------


def test_poisson_counts_match_the_rate():
    net = line_network(3)
    profile = DemandProfile.stationary({(0, 2): 0.05}, hours=10)
    cfg = SimConfig(horizon=36000.0)
    counts = [len(generate_demand(profile, net, dataclasses.replace(cfg, seed=s)))
              for s in range(5)]
    expected = 0.05 * 36000.0
    for n in counts:
        assert abs(n - expected) < 4 * np.sqrt(expected)


def test_trip_log_is_replayed_exactly():
    net = line_network(4)
    rows = [(10, 5.0, 0, 3), (11, 2.5, 1, 2), (12, 7.0, 3, 0)]
    orders = generate_demand(rows, net, SimConfig())
    assert [(o.arrival_time, o.origin, o.destination) for o in orders] == [
        (2.5, 1, 2), (5.0, 0, 3), (7.0, 3, 0)]
    assert all(o.max_wait >= 10.0 for o in orders)


def test_trip_log_skips_unknown_nodes_and_late_rows():
    net = line_network(3)
    rows = [(0, 1.0, 0, 9), (1, 1.0, 0, 0), (2, 99999.0, 0, 2), (3, 1.0, 0, 2)]
    assert len(generate_demand(rows, net, SimConfig(horizon=3600.0))) == 1


# -- scripted runs ----------------------------------------------------------------------


def test_no_demand_gives_zero_metrics():
    res = run(line_network(4), [], SimConfig(horizon=600.0, n_vehicles=2), "mb")
    assert all(v == 0.0 for v in res.metrics.row().values())


def test_single_passenger_served_at_once():
    net = cycle()
    orders = generate_demand([(0, 0.0, 0, 2)], net, ring_cfg())
    m = run(net, orders, ring_cfg(), "mb", starts=[3]).metrics
    # the vehicle walks 3 -> 0 during the first round and finds the rider there
    assert (m.admitted, m.responded, m.pooled) == (1, 1, 0)
    assert m.avg_resp_time_s == 10.0 and m.avg_pk_time_s == 0.0
    assert m.dist_total_km == 2.0 and m.dist_save_km == 0.0
    assert m.profit == pytest.approx(10.0 - 4.0)


def test_myopic_pairs_a_rider_picked_up_on_the_way():
    net = cycle()
    orders = generate_demand([(0, 0.0, 1, 3), (1, 15.0, 2, 3)], net, ring_cfg())
    res = run(net, orders, ring_cfg(), "mb", starts=[0])
    m = res.metrics
    assert (m.responded, m.pooled, m.pairing_ratio) == (2, 2, 1.0)
    assert m.avg_resp_time_s == 7.5
    assert m.avg_detour_m == 0.0
    assert m.avg_share_m == 1000.0
    assert m.dist_total_km == 2.0
    assert m.dist_save_km == 1.0
    assert m.profit == pytest.approx(5.0 + 3.5 + 3.5 - 4.0)
    kinds = [e[1] for e in res.events]
    assert kinds.count("episode") == 1


def test_rider_joins_a_vehicle_still_collecting_its_first_passenger():
    net = cycle()
    orders = generate_demand([(0, 0.0, 0, 2), (1, 15.0, 1, 2)], net, ring_cfg())
    res = run(net, orders, ring_cfg(), "mb", starts=[1])
    m = res.metrics
    # at t=20 the vehicle is at 3, still 1000 m short of the first rider at 0
    assign = [e for e in res.events if e[1] == "assign"]
    assert [(e[0], e[2]) for e in assign] == [(10.0, 0), (20.0, 1)]
    assert "pickup_m=2000.0" in assign[1][5]
    assert (m.pooled, m.dist_save_km, m.avg_detour_m) == (2, 1.0, 0.0)
    assert m.avg_pk_time_s == 20.0
    assert m.profit == pytest.approx(5.0 + 3.5 + 3.5 - 4.0)


def test_no_pooling_keeps_riders_apart():
    net = cycle()
    orders = generate_demand([(0, 0.0, 1, 3), (1, 15.0, 2, 3)], net, ring_cfg())
    m = run(net, orders, ring_cfg(), "np", starts=[0]).metrics
    assert m.pooled == 0 and m.dist_save_km == 0.0
    assert m.responded == 2


def test_impatient_rider_cancels():
    net = cycle()
    cfg = SimConfig(dt=10.0, horizon=60.0, max_pickup=1500.0, wait_mean=10.0, wait_sd=0.0)
    orders = generate_demand([(0, 0.0, 1, 3)], net, cfg)
    # the vehicle walks away from the rider: 3000 m, then 2000 m, both past the limit
    m = run(net, orders, cfg, "mb", starts=[1]).metrics
    assert (m.admitted, m.responded, m.cancelled, m.residual) == (1, 0, 1, 0)


def test_table_strategies_require_tables():
    net = cycle()
    with pytest.raises(ConfigurationError, match="predict"):
        run(net, [], ring_cfg(), "fl")


def test_bad_start_node():
    with pytest.raises(ValueError):
        run(cycle(), [], ring_cfg(), "mb", starts=[7])


# -- benchmark-scale invariants -------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    net = desk_network()
    profile = desk_demand(total_per_hour=240.0, hours=1)
    cfg = desk_config(horizon=1800.0)
    orders = generate_demand(profile, net, cfg)
    return net, orders, cfg, desk_tables(net, profile, cfg)


@pytest.mark.parametrize("strategy", ["np", "mb", "rtv", "fl", "fl-no-delay", "fl-naive"])
def test_conservation_audit_and_replay(desk, strategy, tmp_path):
    net, orders, cfg, tables = desk
    res = run(net, orders, cfg, strategy, tables)
    m = res.metrics
    assert m.admitted == len(orders)
    assert m.admitted == m.responded + m.cancelled + m.residual
    assert audit_pooled_trips(res.events, cfg) == []
    path = tmp_path / "events.csv"
    write_events(res.events, path)
    events = read_events(path)
    again = recompute_from_events(events, speed=net.speed)
    for name in METRIC_FIELDS:
        assert getattr(again, name) == pytest.approx(getattr(m, name), rel=1e-12, abs=1e-12)


def test_runs_are_deterministic(desk):
    net, orders, cfg, tables = desk
    a = metrics_csv([run(net, orders, cfg, "fl", tables).metrics_row()])
    b = metrics_csv([run(net, orders, cfg, "fl", tables).metrics_row()])
    assert a == b
    other = generate_demand(desk_demand(240.0, 1), net, dataclasses.replace(cfg, seed=1))
    assert [o.arrival_time for o in other] != [o.arrival_time for o in orders]


def test_audit_flags_violations():
    cfg = SimConfig(max_pickup=1000.0, max_detour=500.0)
    events = [(0.0, "assign", 1, 0, 0, "mode=none;pickup_m=1000.0;saving_m=0.0"),
              (9.0, "dropoff", 2, 0, 0, "ride_m=3000.0;shared_m=1.0;solo_m=2000.0;pooled=1")]
    assert audit_pooled_trips(events, cfg) == [(1, "pickup", 1000.0), (2, "detour", 1000.0)]


def test_event_log_header_is_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n")
    with pytest.raises(ValueError):
        read_events(path)
    path = tmp_path / "ok.csv"
    write_events([], path)
    assert path.read_text().strip() == ",".join(EVENT_FIELDS)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(r_w=2.0)
    assert SimConfig().digest() != SimConfig(dt=30.0).digest()
