"""Match utilities, the batch assignment solver and the online dispatch strategies."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linear_sum_assignment, milp
from scipy.sparse import coo_matrix

from .domain import Mode, Order, PairingConfig, Vehicle, best_mode
from .network import ODPair, RoadNetwork
from .prediction import PredictionTables, expected_saving_wait

WAIT = "wait"
UNASSIGNED = "unassigned"
# solver-only preference for nearer vehicles among equal utilities (per meter)
PICKUP_TIEBREAK = 1e-7


class Strategy(str, enum.Enum):
    NP = "np"
    MB = "mb"
    RTV = "rtv"
    FL = "fl"
    FL_NO_DELAY = "fl-no-delay"
    FL_NAIVE = "fl-naive"

    @property
    def uses_tables(self) -> bool:
        return self in (Strategy.FL, Strategy.FL_NO_DELAY, Strategy.FL_NAIVE)

    @property
    def delays(self) -> bool:
        return self in (Strategy.FL, Strategy.FL_NAIVE)


class ConfigurationError(ValueError):
    pass


@dataclass
class UtilityContext:
    alpha: float = 1.01
    r_w: float = 0.75
    l_bar: float = 0.0
    tables: PredictionTables | None = None
    cfg: PairingConfig = field(default_factory=PairingConfig)
    k_rounds: int = 9  # rounds budget seen by the prediction (mean wait / batch interval)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.r_w <= 1.0:
            raise ValueError("r_w must lie in [0, 1]")

    def vacant_saving(self, order: Order) -> float:
        return self.tables.vacant_saving(order.od.key) if self.tables is not None else 0.0

    def wait_saving(self, order: Order) -> float:
        if self.tables is None:
            return 0.0
        key = order.od.key
        k_p = min(order.rounds_waited, self.k_rounds)
        return expected_saving_wait(self.tables.seeker_probability(key),
                                    self.tables.seeker_saving(key),
                                    self.tables.vacant_saving(key),
                                    self.r_w, self.k_rounds, k_p)


@dataclass(frozen=True)
class Option:
    """A feasible matching option for one passenger."""

    kind: str  # "vacant" | "partial" | WAIT
    vehicle_id: object = None
    pickup: float = 0.0
    saving: float = 0.0
    mode: Mode = Mode.NONE

    @classmethod
    def wait(cls) -> "Option":
        return cls(WAIT)


@dataclass(frozen=True)
class MatchEdge:
    passenger: object
    option: object  # vehicle id, WAIT or UNASSIGNED
    utility: float
    mode: Mode = Mode.NONE
    pickup: float = 0.0
    saving: float = 0.0


@dataclass(frozen=True)
class Assignment:
    option: object
    utility: float
    mode: Mode = Mode.NONE
    pickup: float = 0.0
    saving: float = 0.0
    partner: object = None  # the co-rider for RTV pair trips on a vacant vehicle
    first: bool = True  # picked up first within an RTV pair trip


@dataclass
class BatchMatchResult:
    assignments: dict  # passenger id -> Assignment
    objective: float
    round_index: int = 0

    def vehicle_of(self, pid):
        opt = self.assignments[pid].option
        return None if opt in (WAIT, UNASSIGNED) else opt

    def check(self, passengers: Sequence) -> None:
        if set(self.assignments) != set(passengers):
            raise AssertionError("every waiting passenger must receive exactly one option")
        used: dict = {}
        for pid, a in self.assignments.items():
            if a.option in (WAIT, UNASSIGNED):
                continue
            if a.option in used and self.assignments[used[a.option]].partner != pid:
                raise AssertionError(f"vehicle {a.option} assigned twice")
            used[a.option] = pid


# -- utilities --------------------------------------------------------------


def _fraction_utility(saving: float, pickup: float, alpha: float, k_p: int) -> float:
    if saving <= 0:
        return 0.0
    return saving * (saving / (saving + pickup)) * alpha ** k_p


def utility_myopic(order: Order, option: Option, ctx: UtilityContext) -> float:
    if option.kind == "vacant":
        return -option.pickup
    if option.kind == "partial":
        return option.saving - option.pickup
    raise ValueError("waiting is not an option for the myopic strategy")


def utility_fl(order: Order, option: Option, ctx: UtilityContext) -> float:
    if option.kind == "vacant":
        return _fraction_utility(ctx.vacant_saving(order), option.pickup, ctx.alpha,
                                 order.rounds_waited)
    if option.kind == "partial":
        return _fraction_utility(option.saving, option.pickup, ctx.alpha, order.rounds_waited)
    return ctx.wait_saving(order) - ctx.l_bar


def utility_fl_no_delay(order: Order, option: Option, ctx: UtilityContext) -> float:
    if option.kind == "vacant":
        return ctx.vacant_saving(order) - option.pickup
    if option.kind == "partial":
        return option.saving - option.pickup
    raise ValueError("waiting is not an option without delay-matching")


def utility_naive_combined(order: Order, option: Option, ctx: UtilityContext) -> float:
    if option.kind == WAIT:
        return ctx.wait_saving(order) - ctx.l_bar
    return utility_fl_no_delay(order, option, ctx)


def utility_np(order: Order, option: Option, ctx: UtilityContext) -> float:
    if option.kind != "vacant":
        raise ValueError("non-pooling serves vacant vehicles only")
    return -option.pickup


UTILITIES: dict[Strategy, Callable] = {
    Strategy.NP: utility_np,
    Strategy.MB: utility_myopic,
    Strategy.RTV: utility_myopic,
    Strategy.FL: utility_fl,
    Strategy.FL_NO_DELAY: utility_fl_no_delay,
    Strategy.FL_NAIVE: utility_naive_combined,
}


# -- assignment ---------------------------------------------------------------


def _sort_key(x):
    return (0, x) if isinstance(x, (int, np.integer)) else (1, str(x))


def solve_assignment(edges: Sequence[MatchEdge], passengers: Sequence,
                     vehicles: Sequence = (), round_index: int = 0,
                     pickup_tiebreak: float = 0.0) -> BatchMatchResult:
    """Exact batch assignment over passengers and options.

    Every passenger takes exactly one of its edges and every vehicle serves at
    most one passenger. WAIT and UNASSIGNED options are private to each
    passenger. Solutions first minimise the number of UNASSIGNED passengers,
    then maximise total utility.

    ``pickup_tiebreak`` (utility per meter) is subtracted from vehicle edges
    inside the solver only, so that among equal-utility solutions the one
    with shorter pickups wins. Keep it far below the utility resolution.
    """
    rows = sorted(set(passengers), key=_sort_key)
    row_of = {p: i for i, p in enumerate(rows)}
    vehicle_cols = sorted({e.option for e in edges if e.option not in (WAIT, UNASSIGNED)}
                          | set(vehicles), key=_sort_key)
    col_of = {v: j for j, v in enumerate(vehicle_cols)}
    n_v = len(vehicle_cols)
    n = len(rows)
    if n == 0:
        return BatchMatchResult({}, 0.0, round_index)

    scale = max((abs(e.utility) for e in edges), default=0.0)
    penalty = 2.0 * n * scale + 1.0
    cost = np.full((n, n_v + 2 * n), -np.inf)
    chosen: dict = {}
    for e in edges:
        i = row_of[e.passenger]
        if e.option == WAIT:
            j = n_v + i
        elif e.option == UNASSIGNED:
            j = n_v + n + i
        else:
            j = col_of[e.option]
        if e.option == UNASSIGNED:
            value = e.utility - penalty
        elif e.option == WAIT:
            value = e.utility
        else:
            value = e.utility - pickup_tiebreak * e.pickup
        if value > cost[i, j] or (i, j) not in chosen:
            cost[i, j] = value
            chosen[(i, j)] = e
    missing = [rows[i] for i in range(n) if not np.isfinite(cost[i]).any()]
    if missing:
        raise ValueError(f"passengers without any option: {missing}")
    r, c = linear_sum_assignment(cost, maximize=True)
    assignments = {}
    objective = 0.0
    for i, j in zip(r, c):
        e = chosen[(i, j)]
        assignments[rows[i]] = Assignment(e.option, e.utility, e.mode, e.pickup, e.saving)
        objective += e.utility
    result = BatchMatchResult(assignments, objective, round_index)
    result.check(rows)
    return result


# -- candidate generation ------------------------------------------------------


@dataclass
class Snapshot:
    """What a dispatcher sees at one matching round."""

    network: RoadNetwork
    waiting: list  # Order
    vehicles: list  # Vehicle
    onboard: dict  # partially occupied vehicle id -> ODPair of its rider
    cfg: PairingConfig
    round_index: int = 0
    final_round: Callable[[Order], bool] = lambda order: False
    # partially occupied vehicle id -> meters its rider has already ridden
    # beyond the shortest path from their origin to the vehicle's location
    onboard_extra: dict = field(default_factory=dict)


def candidate_options(snap: Snapshot, pooling: bool = True) -> dict:
    """Feasible vacant and partially occupied options per waiting passenger.

    Distances come from the network's cached distance matrix; the serving
    mode follows :func:`ridepool.domain.best_mode`.
    """
    net = snap.network
    D = net.distance_matrix
    idx = net.index
    cfg = snap.cfg
    vacant = [v for v in snap.vehicles if v.is_vacant]
    partial = [v for v in snap.vehicles if v.is_partial] if pooling else []
    vac_loc = np.array([idx[v.location] for v in vacant], dtype=int)
    if partial:
        par_o = np.array([idx[snap.onboard[v.id].origin] for v in partial], dtype=int)
        par_d = np.array([idx[snap.onboard[v.id].destination] for v in partial], dtype=int)
        # a rider still waiting is collected first: plan from their origin
        here = np.array([idx[v.location] for v in partial], dtype=int)
        waiting_rider = np.array([not v.onboard for v in partial])
        par_loc = np.where(waiting_rider, par_o, here)
        approach = np.where(waiting_rider, D[here, par_o], 0.0)
        solo_first = D[par_o, par_d]
        ridden = D[par_o, par_loc]
        extra = np.array([snap.onboard_extra.get(v.id, 0.0) for v in partial])
    out = {}
    for order in snap.waiting:
        o, d = idx[order.origin], idx[order.destination]
        opts = []
        if len(vacant):
            pk = D[vac_loc, o]
            for k in np.flatnonzero(pk < cfg.max_pickup):
                opts.append(Option("vacant", vacant[k].id, float(pk[k])))
        if partial:
            pk = approach + D[par_loc, o]
            common = ridden + D[par_loc, o]
            fofo = common + D[o, par_d] + D[par_d, d]
            folo = common + D[o, d] + D[d, par_d]
            solo = solo_first + D[o, d]
            det_fofo = np.maximum(common + D[o, par_d] - solo_first + extra,
                                  D[o, par_d] + D[par_d, d] - D[o, d])
            det_folo = folo - solo_first + extra
            ok_fofo = det_fofo <= cfg.max_detour
            ok_folo = det_folo <= cfg.max_detour
            for k in np.flatnonzero((pk < cfg.max_pickup) & (ok_fofo | ok_folo)):
                use_fofo = ok_fofo[k] and (fofo[k] <= folo[k] or not ok_folo[k])
                length = fofo[k] if use_fofo else folo[k]
                opts.append(Option("partial", partial[k].id, float(pk[k]),
                                   float(solo[k] - length), Mode.FOFO if use_fofo else Mode.FOLO))
        out[order.id] = opts
    return out


def _top(edges: list, keep: int) -> list:
    edges.sort(key=lambda e: (-e.utility, e.pickup, _sort_key(e.option)))
    return edges[:keep]


def build_edges(strategy: Strategy, snap: Snapshot, ctx: UtilityContext,
                options: dict | None = None) -> list[MatchEdge]:
    """Utility edges for one round, pruned to each passenger's best |P| vehicles.

    Keeping |P| vehicles per passenger is exact: any solution using a vehicle
    outside that list can swap to one of them that no other passenger uses.
    """
    utility = UTILITIES[strategy]
    if options is None:
        options = candidate_options(snap, pooling=strategy is not Strategy.NP)
    keep = len(snap.waiting)
    edges = []
    for order in snap.waiting:
        veh = [MatchEdge(order.id, opt.vehicle_id, utility(order, opt, ctx), opt.mode,
                         opt.pickup, opt.saving) for opt in options[order.id]]
        edges.extend(_top(veh, keep))
        if strategy.delays and not snap.final_round(order):
            edges.append(MatchEdge(order.id, WAIT, utility(order, Option.wait(), ctx)))
        else:
            edges.append(MatchEdge(order.id, UNASSIGNED, 0.0))
    return edges


# -- request-trip-vehicle (capacity 2) ---------------------------------------------


@dataclass(frozen=True)
class Trip:
    requests: tuple  # (first, second) pickup order, or a singleton
    saving: float = 0.0
    mode: Mode = Mode.NONE


def shareable_pairs(network: RoadNetwork, orders: Sequence[Order], cfg: PairingConfig) -> list:
    """Pair trips among waiting requests, both riders picked up by one vehicle.

    The first pickup acts as the vehicle location for the second, so the
    pair is feasible when the second origin is within pickup range and both
    detours respect the limit. Each feasible pickup order is listed, since
    which one is better depends on where the serving vehicle starts.
    """
    trips = []
    ordered = sorted(orders, key=lambda o: o.id)
    for a, b in itertools.combinations(ordered, 2):
        for first, second in ((a, b), (b, a)):
            if not network.shortest_distance(first.origin, second.origin) < cfg.max_pickup:
                continue
            found = best_mode(network, first.od, second.od, first.origin, cfg.max_detour)
            if found is not None:
                trips.append(Trip((first.id, second.id), found[1], found[0]))
    return trips


def rtv_assign(snap: Snapshot, ctx: UtilityContext) -> BatchMatchResult:
    """Trips (singletons and shareable pairs) to vehicles, maximising distance saving.

    Serving requests takes precedence (a large per-request reward); among
    equally many served requests the plan maximises total saving net of
    pickup distance.
    """
    net, cfg = snap.network, snap.cfg
    orders = {o.id: o for o in snap.waiting}
    if not orders:
        return BatchMatchResult({}, 0.0, snap.round_index)
    options = candidate_options(snap)
    keep = len(orders)
    reward = 2.0 * (cfg.max_pickup + cfg.max_detour) + 4.0 * max(
        (net.shortest_distance(o.origin, o.destination) for o in orders.values()), default=0.0)

    columns = []  # (requests, vehicle, value, per-request Assignment)
    for pid, opts in options.items():
        cand = []
        for opt in opts:
            value = opt.saving - opt.pickup if opt.kind == "partial" else -opt.pickup
            cand.append((value, opt))
        cand.sort(key=lambda x: (-x[0], _sort_key(x[1].vehicle_id)))
        for value, opt in cand[:keep]:
            columns.append(((pid,), opt.vehicle_id, value,
                            {pid: Assignment(opt.vehicle_id, value, opt.mode, opt.pickup,
                                             opt.saving)}))

    vacant = [v for v in snap.vehicles if v.is_vacant]
    if vacant:
        D, idx = net.distance_matrix, net.index
        vac_loc = np.array([idx[v.location] for v in vacant], dtype=int)
        best = {}  # (unordered pair, vehicle index) -> (value, trip, pickup)
        for trip in shareable_pairs(net, list(orders.values()), cfg):
            first = trip.requests[0]
            pk = D[vac_loc, idx[orders[first].origin]]
            pair = tuple(sorted(trip.requests))
            for k in np.flatnonzero(pk < cfg.max_pickup):
                value = trip.saving - pk[k]
                if (pair, k) not in best or value > best[(pair, k)][0]:
                    best[(pair, k)] = (value, trip, float(pk[k]))
        by_pair: dict = {}
        for (pair, k), entry in best.items():
            by_pair.setdefault(pair, []).append((entry, k))
        for pair in sorted(by_pair):
            cand = sorted(by_pair[pair], key=lambda x: (-x[0][0], vacant[x[1]].id))
            for (value, trip, pk), k in cand[:keep]:
                vid = vacant[k].id
                first, second = trip.requests
                per = {
                    first: Assignment(vid, value, trip.mode, pk, trip.saving,
                                      partner=second, first=True),
                    second: Assignment(vid, value, trip.mode,
                                       net.shortest_distance(orders[first].origin,
                                                             orders[second].origin),
                                       trip.saving, partner=first, first=False),
                }
                columns.append((pair, vid, value, per))

    if not columns:
        return BatchMatchResult({pid: Assignment(UNASSIGNED, 0.0) for pid in orders}, 0.0,
                                snap.round_index)
    req_ids = sorted(orders)
    veh_ids = sorted({c[1] for c in columns}, key=_sort_key)
    r_of = {p: i for i, p in enumerate(req_ids)}
    v_of = {v: i for i, v in enumerate(veh_ids)}
    rows, cols = [], []
    for j, (reqs, vid, _, _) in enumerate(columns):
        for p in reqs:
            rows.append(r_of[p])
            cols.append(j)
        rows.append(len(req_ids) + v_of[vid])
        cols.append(j)
    A = coo_matrix((np.ones(len(rows)), (rows, cols)),
                   shape=(len(req_ids) + len(veh_ids), len(columns))).tocsr()
    c = -np.array([reward * len(reqs) + value for reqs, _, value, _ in columns])
    res = milp(c, constraints=LinearConstraint(A, 0, 1), integrality=np.ones(len(columns)),
               bounds=Bounds(0, 1))
    if not res.success:  # pragma: no cover - the all-zero plan is always feasible
        raise RuntimeError(f"RTV assignment failed: {res.message}")
    assignments = {}
    objective = 0.0
    for j in np.flatnonzero(res.x > 0.5):
        reqs, vid, value, per = columns[j]
        assignments.update(per)
        objective += value
    for pid in orders:
        assignments.setdefault(pid, Assignment(UNASSIGNED, 0.0))
    result = BatchMatchResult(assignments, objective, snap.round_index)
    result.check(list(orders))
    return result


def dispatch_round(strategy: Strategy | str, snap: Snapshot, ctx: UtilityContext) -> BatchMatchResult:
    strategy = Strategy(strategy)
    if strategy.uses_tables and ctx.tables is None:
        raise ConfigurationError(f"strategy {strategy.value!r} needs prediction tables; "
                                 "run the 'predict' command first")
    if strategy is Strategy.RTV:
        return rtv_assign(snap, ctx)
    edges = build_edges(strategy, snap, ctx)
    return solve_assignment(edges, [o.id for o in snap.waiting], round_index=snap.round_index,
                            pickup_tiebreak=PICKUP_TIEBREAK)
