"""Discrete-event batch-matching simulation of a two-seat ride-pooling fleet."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import Mode, Order, OrderStatus, PairingConfig, Stop, Vehicle
from .network import DEFAULT_SPEED, ODPair, RoadNetwork
from .prediction import DemandProfile, PredictionTables, k_rounds_for
from .strategies import (UNASSIGNED, WAIT, Assignment, BatchMatchResult, Snapshot, Strategy,
                         UtilityContext, dispatch_round)

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64/SeedSequence.spawn(3): demand, mobility, init"
METRIC_FIELDS = ["response_rate", "pairing_ratio", "profit", "avg_resp_time_s", "avg_pk_time_s",
                 "avg_detour_m", "avg_share_m", "dist_total_km", "dist_save_km"]
EVENT_FIELDS = ["time_s", "event", "order_id", "vehicle_id", "node", "detail"]


@dataclass(frozen=True)
class Pricing:
    solo_per_km: float = 5.0
    shared_per_km: float = 3.5
    driver_per_km: float = 2.0


@dataclass(frozen=True)
class SimConfig:
    dt: float = 10.0
    horizon: float = 7200.0
    order_driver_ratio: float = 100 / 25
    speed: float = DEFAULT_SPEED
    wait_mean: float = 90.0
    wait_sd: float = 10.0
    alpha: float = 1.01
    r_w: float = 0.75
    max_pickup: float = 3000.0
    max_detour: float = 3000.0
    pricing: Pricing = field(default_factory=Pricing)
    seed: int = 0
    l_bar: float | None = None  # None: calibrate from a myopic run
    n_vehicles: int | None = None  # None: derive from the order-driver ratio
    drain: bool = True  # keep matching after the horizon until nobody is waiting

    def __post_init__(self):
        for name in ("dt", "horizon", "order_driver_ratio", "speed", "wait_mean", "alpha",
                     "max_pickup", "max_detour"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.wait_sd < 0 or not 0.0 <= self.r_w <= 1.0:
            raise ValueError("wait_sd must be >= 0 and r_w within [0, 1]")
        if not isinstance(self.seed, (int, np.integer)):
            raise TypeError("seed must be an integer")

    @property
    def pairing(self) -> PairingConfig:
        return PairingConfig(self.max_pickup, self.max_detour, self.dt)

    @property
    def k_rounds(self) -> int:
        return k_rounds_for(self.wait_mean, self.dt)

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class RunMetrics:
    admitted: int = 0
    responded: int = 0
    cancelled: int = 0
    residual: int = 0
    pooled: int = 0
    resp_time_sum: float = 0.0
    pickup_dist_sum: float = 0.0
    detour_sum: float = 0.0
    share_sum: float = 0.0
    occupied_m: float = 0.0
    saving_m: float = 0.0
    profit: float = 0.0
    speed: float = DEFAULT_SPEED

    def _ratio(self, num, den):
        return num / den if den else 0.0

    @property
    def response_rate(self) -> float:
        return self._ratio(self.responded, self.admitted)

    @property
    def pairing_ratio(self) -> float:
        return self._ratio(self.pooled, self.responded)

    @property
    def avg_resp_time_s(self) -> float:
        return self._ratio(self.resp_time_sum, self.responded)

    @property
    def avg_pk_time_s(self) -> float:
        return self._ratio(self.pickup_dist_sum, self.responded) / self.speed

    @property
    def avg_detour_m(self) -> float:
        return self._ratio(self.detour_sum, self.pooled)

    @property
    def avg_share_m(self) -> float:
        return self._ratio(self.share_sum, self.pooled)

    @property
    def dist_total_km(self) -> float:
        return self.occupied_m / 1000.0

    @property
    def dist_save_km(self) -> float:
        return self.saving_m / 1000.0

    def row(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_FIELDS}


# -- demand -------------------------------------------------------------------


def _wait_draws(rng: np.random.Generator, n: int, cfg: SimConfig) -> np.ndarray:
    draws = rng.normal(cfg.wait_mean, cfg.wait_sd, size=n)
    return np.maximum(draws, cfg.dt)


def generate_demand(source, network: RoadNetwork, cfg: SimConfig,
                    rng: np.random.Generator | None = None) -> list[Order]:
    """Orders from a :class:`DemandProfile` (Poisson per OD and hour) or a trip log.

    A trip log is any iterable of ``(order_id, time_s, origin, destination)``
    rows and is replayed exactly. Orders whose OD is not on the network are
    skipped with a warning count.
    """
    if rng is None:
        rng = _streams(cfg.seed)["demand"]
    raw = []
    skipped = 0
    if isinstance(source, DemandProfile):
        for hour in source.hours:
            start = hour * 3600.0
            end = min(start + 3600.0, cfg.horizon)
            if end <= start:
                continue
            for key in sorted(source.hour(hour)):
                rate = source.hour(hour)[key]
                if rate <= 0:
                    continue
                if key[0] not in network or key[1] not in network:
                    skipped += 1
                    continue
                n = rng.poisson(rate * (end - start))
                for t in np.sort(rng.uniform(start, end, size=n)):
                    raw.append((float(t), key, None))
    else:
        for source_id, time_s, o, d in source:
            if o not in network or d not in network or o == d:
                skipped += 1
                continue
            if 0 <= float(time_s) <= cfg.horizon:
                raw.append((float(time_s), (o, d), source_id))
    if skipped:
        log.warning("skipped %d demand entries not on the network", skipped)
    raw.sort(key=lambda r: (r[0], r[1], str(r[2])))
    waits = _wait_draws(rng, len(raw), cfg)
    ods: dict = {}
    orders = []
    for i, ((t, key, source_id), wait) in enumerate(zip(raw, waits)):
        od = ods.get(key)
        if od is None:
            od = ods[key] = ODPair.on(network, *key)
        orders.append(Order(i, od, t, float(wait), source_id=source_id))
    return orders


def _streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: np.random.Generator(np.random.PCG64(s))
            for name, s in zip(("demand", "mobility", "init"), children)}


# -- world -------------------------------------------------------------------------


@dataclass
class _Episode:
    riders: list = field(default_factory=list)
    route_m: float = 0.0
    saving_plan: float = 0.0


@dataclass
class World:
    network: RoadNetwork
    cfg: SimConfig
    orders: list  # all orders of the run, sorted by arrival
    vehicles: list
    rng: np.random.Generator
    time: float = 0.0
    round_index: int = 0
    next_arrival: int = 0
    waiting: list = field(default_factory=list)
    metrics: RunMetrics = field(default_factory=RunMetrics)
    events: list = field(default_factory=list)
    ride: dict = field(default_factory=dict)  # order id -> in-vehicle meters
    shared: dict = field(default_factory=dict)
    episodes: dict = field(default_factory=dict)  # vehicle id -> _Episode
    assigned_to: dict = field(default_factory=dict)  # order id -> vehicle id

    @classmethod
    def create(cls, network: RoadNetwork, orders: Sequence[Order], cfg: SimConfig,
               starts: Sequence | None = None) -> "World":
        """``starts`` fixes the initial vehicle nodes; by default they are uniform random."""
        streams = _streams(cfg.seed)
        if starts is None:
            n_veh = cfg.n_vehicles
            if n_veh is None:
                n_veh = math.ceil(len(orders) / cfg.order_driver_ratio - 1e-9)
            nodes = network.nodes
            starts = [nodes[int(k)] for k in streams["init"].integers(0, len(nodes), size=n_veh)]
        for node in starts:
            if node not in network:
                raise ValueError(f"start node {node!r} is not on the network")
        vehicles = [Vehicle(i, node) for i, node in enumerate(starts)]
        orders = [dataclasses.replace(o, rounds_waited=0, status=OrderStatus.WAITING,
                                      pooled=False) for o in orders]
        world = cls(network, cfg, orders, vehicles, streams["mobility"])
        world.metrics.speed = network.speed
        return world

    def log(self, time, event, order_id="", vehicle_id="", node="", detail=""):
        self.events.append((time, event, order_id, vehicle_id, node, detail))

    def order(self, oid) -> Order:
        return self.orders[oid]

    def onboard_ods(self) -> dict:
        return {v.id: self.order(v.rider).od for v in self.vehicles if v.is_partial}

    def onboard_extra(self) -> dict:
        out = {}
        for v in self.vehicles:
            if v.is_partial and v.onboard:
                rider = self.order(v.onboard[0])
                shortest = self.network.shortest_distance(rider.origin, v.location)
                out[v.id] = max(self.ride[rider.id] - shortest, 0.0)
        return out

    def final_round(self, order: Order) -> bool:
        return order.rounds_waited >= math.ceil(order.max_wait / self.cfg.dt - 1e-12)


# -- vehicle motion ----------------------------------------------------------------


def _advance(world: World, v: Vehicle, dt: float) -> None:
    net = world.network
    budget = dt
    while True:
        if v.lag > 0:
            use = min(v.lag, budget)
            v.lag -= use
            budget -= use
            if v.lag > 1e-9:
                return
            v.lag = 0.0
        now = world.time + (dt - budget)
        while v.stops and v.stops[0].node == v.location:
            _serve_stop(world, v, v.stops.pop(0), now)
            v.path = []
        if not v.path:
            if v.stops:
                v.path = list(net.shortest_path(v.location, v.stops[0].node)[1:])
            elif v.is_vacant:
                succ = net.successors(v.location)
                if not succ:
                    return
                v.path = [succ[int(world.rng.integers(len(succ)))]]
        if budget <= 1e-9 or not v.path:
            return
        nxt = v.path.pop(0)
        length = net.link_length(v.location, nxt)
        if v.onboard:
            ep = world.episodes[v.id]
            ep.route_m += length
            for r in v.onboard:
                world.ride[r] += length
                if len(v.onboard) == 2:
                    world.shared[r] += length
        v.location = nxt
        v.lag = length / net.speed


def _serve_stop(world: World, v: Vehicle, stop: Stop, now: float) -> None:
    order = world.order(stop.order_id)
    if stop.action == "pickup":
        if not v.onboard:
            world.episodes[v.id] = _Episode()
        v.onboard.append(order.id)
        world.episodes[v.id].riders.append(order.id)
        world.ride[order.id] = 0.0
        world.shared[order.id] = 0.0
        order.status = OrderStatus.ONBOARD
        world.log(now, "pickup", order.id, v.id, v.location)
        return
    v.onboard.remove(order.id)
    order.status = OrderStatus.DELIVERED
    solo = world.network.shortest_distance(order.origin, order.destination)
    ride, shared = world.ride[order.id], world.shared[order.id]
    world.log(now, "dropoff", order.id, v.id, v.location,
              f"ride_m={ride!r};shared_m={shared!r};solo_m={solo!r};pooled={int(order.pooled)}")
    m = world.metrics
    if order.pooled:
        m.detour_sum += ride - solo
        m.share_sum += shared
    if not v.onboard:
        ep = world.episodes.pop(v.id)
        solos = [world.network.shortest_distance(world.order(r).origin, world.order(r).destination)
                 for r in ep.riders]
        m.occupied_m += ep.route_m
        saving = sum(solos) - ep.route_m if len(ep.riders) >= 2 else 0.0
        m.saving_m += saving
        world.log(now, "episode", ep.riders[0], v.id, v.location,
                  "riders=" + "|".join(map(str, ep.riders))
                  + f";route_m={ep.route_m!r};solo_m={sum(solos)!r};saving_m={saving!r}")


# -- assignment application ---------------------------------------------------------------


def _apply(world: World, result: BatchMatchResult) -> None:
    net = world.network
    m = world.metrics
    by_id = {v.id: v for v in world.vehicles}
    still = []
    done_pairs = set()
    for order in world.waiting:
        a: Assignment = result.assignments[order.id]
        if a.option == WAIT or a.option == UNASSIGNED:
            if world.final_round(order):
                order.status = OrderStatus.CANCELLED
                m.cancelled += 1
                world.log(world.time, "cancel", order.id)
            else:
                order.rounds_waited += 1
                still.append(order)
            continue
        v = by_id[a.option]
        order.status = OrderStatus.ASSIGNED
        world.assigned_to[order.id] = v.id
        m.responded += 1
        m.resp_time_sum += world.time - order.arrival_time
        m.pickup_dist_sum += a.pickup
        world.log(world.time, "assign", order.id, v.id, v.location,
                  f"mode={a.mode.value};pickup_m={a.pickup!r};saving_m={a.saving!r}"
                  + (f";partner={a.partner}" if a.partner is not None else ""))
        if a.partner is not None:
            if v.id in done_pairs:
                continue
            done_pairs.add(v.id)
            first = order if a.first else world.order(a.partner)
            second = world.order(a.partner) if a.first else order
            first.pooled = second.pooled = True
            v.stops = [Stop(first.origin, "pickup", first.id), Stop(second.origin, "pickup", second.id)]
            v.stops += _dropoffs(first, second, a.mode)
        elif v.is_partial:
            rider = world.order(v.rider)
            rider.pooled = order.pooled = True
            first_leg = [] if v.onboard else [Stop(rider.origin, "pickup", rider.id)]
            v.stops = first_leg + [Stop(order.origin, "pickup", order.id)]
            v.stops += _dropoffs(rider, order, a.mode)
        else:
            v.stops = [Stop(order.origin, "pickup", order.id),
                       Stop(order.destination, "dropoff", order.id)]
        v.path = []
    world.waiting = still


def _dropoffs(first: Order, second: Order, mode: Mode) -> list:
    if mode is Mode.FOLO:
        return [Stop(second.destination, "dropoff", second.id),
                Stop(first.destination, "dropoff", first.id)]
    return [Stop(first.destination, "dropoff", first.id),
            Stop(second.destination, "dropoff", second.id)]


# -- loop ---------------------------------------------------------------------------


class Runner:
    """Holds the per-run strategy context; one :meth:`step` per matching round."""

    def __init__(self, world: World, strategy: Strategy | str, ctx: UtilityContext,
                 tables_by_hour: Mapping | None = None):
        self.world = world
        self.strategy = Strategy(strategy)
        self.ctx = ctx
        self.tables_by_hour = dict(tables_by_hour or {})

    def _tables_for(self, t: float):
        if not self.tables_by_hour:
            return self.ctx.tables
        hour = int(t // 3600)
        if hour in self.tables_by_hour:
            return self.tables_by_hour[hour]
        return self.tables_by_hour[max(h for h in self.tables_by_hour if h <= hour)] \
            if any(h <= hour for h in self.tables_by_hour) else self.ctx.tables

    def step(self, dispatch: bool = True, admit: bool = True) -> None:
        w = self.world
        dt = w.cfg.dt
        t_next = w.time + dt
        # arrivals in (t, t + dt]
        while (w.next_arrival < len(w.orders) and admit
               and w.orders[w.next_arrival].arrival_time <= t_next):
            order = w.orders[w.next_arrival]
            w.next_arrival += 1
            w.waiting.append(order)
            w.metrics.admitted += 1
            detail = f"destination={order.destination};max_wait_s={order.max_wait!r}"
            if order.source_id is not None:
                detail += f";source_id={order.source_id}"
            w.log(order.arrival_time, "arrive", order.id, "", order.origin, detail)
        for v in w.vehicles:
            _advance(w, v, dt)
        w.time = t_next
        w.round_index += 1
        if not dispatch or not w.waiting:
            return
        self.ctx.tables = self._tables_for(w.time)
        snap = Snapshot(w.network, list(w.waiting), w.vehicles, w.onboard_ods(), w.cfg.pairing,
                        w.round_index, w.final_round, w.onboard_extra())
        result = dispatch_round(self.strategy, snap, self.ctx)
        _audit(w, snap, result)
        _apply(w, result)


def _audit(world: World, snap: Snapshot, result: BatchMatchResult) -> None:
    cfg = snap.cfg
    for pid, a in result.assignments.items():
        if a.option in (WAIT, UNASSIGNED):
            continue
        if not a.pickup < cfg.max_pickup:
            raise AssertionError(f"order {pid}: pickup {a.pickup} exceeds limit")


@dataclass
class RunResult:
    metrics: RunMetrics
    events: list
    config: SimConfig
    strategy: str
    n_vehicles: int = 0

    def metrics_row(self) -> dict:
        row = {"strategy": self.strategy, "seed": self.config.seed,
               "config_hash": self.config.digest()}
        row.update(self.metrics.row())
        return row


def calibrate_l_bar(network: RoadNetwork, orders: Sequence[Order], cfg: SimConfig,
                    starts: Sequence | None = None) -> float:
    """Mean realised pickup distance of the myopic strategy on the same demand."""
    res = run(network, orders, dataclasses.replace(cfg, l_bar=0.0), Strategy.MB, starts=starts)
    m = res.metrics
    return m.pickup_dist_sum / m.responded if m.responded else 0.0


def run(network: RoadNetwork, orders: Sequence[Order], cfg: SimConfig,
        strategy: Strategy | str, tables: PredictionTables | Mapping | None = None,
        starts: Sequence | None = None) -> RunResult:
    """Simulate the whole horizon, then let vehicles finish their jobs.

    ``tables`` is either one table for every hour or a mapping hour -> table.
    """
    strategy = Strategy(strategy)
    tables_by_hour = tables if isinstance(tables, Mapping) else None
    single = None if isinstance(tables, Mapping) else tables
    l_bar = cfg.l_bar
    if strategy.delays and l_bar is None:
        l_bar = calibrate_l_bar(network, orders, cfg, starts)
    ctx = UtilityContext(alpha=cfg.alpha, r_w=cfg.r_w, l_bar=l_bar or 0.0, tables=single,
                         cfg=cfg.pairing, k_rounds=cfg.k_rounds)
    if strategy.uses_tables and single is None and not tables_by_hour:
        from .strategies import ConfigurationError
        raise ConfigurationError(f"strategy {strategy.value!r} needs prediction tables; "
                                 "run the 'predict' command first")
    world = World.create(network, orders, cfg, starts)
    world.log(0.0, "header", "", "", "",
              f"rng={RNG_ALGORITHM};seed={cfg.seed};config={cfg.digest()};strategy={strategy.value}")
    runner = Runner(world, strategy, ctx, tables_by_hour)
    n_rounds = math.ceil(cfg.horizon / cfg.dt - 1e-9)
    for _ in range(n_rounds):
        runner.step()
    while cfg.drain and world.waiting:
        runner.step(admit=False)
    world.metrics.residual = len(world.waiting)
    for order in world.waiting:
        world.log(world.time, "residual", order.id)
    guard = 0
    while any(v.stops or v.onboard for v in world.vehicles):
        runner.step(dispatch=False)
        guard += 1
        if guard > 100_000:  # pragma: no cover
            raise RuntimeError("vehicles failed to finish their jobs")
    m = world.metrics
    m.profit = compute_profit(world.events, cfg.pricing)
    m.pooled = sum(1 for o in world.orders[:world.next_arrival]
                   if o.pooled and o.status is not OrderStatus.CANCELLED)
    if m.admitted != m.responded + m.cancelled + m.residual:
        raise AssertionError("order conservation violated")
    return RunResult(m, world.events, cfg, strategy.value, len(world.vehicles))


# -- pricing and event-log analysis ----------------------------------------------------------


def _detail(text: str) -> dict:
    out = {}
    for part in str(text).split(";"):
        if "=" in part:
            k, v = part.split("=", 1)
            out[k] = v
    return out


def compute_profit(events: Iterable, pricing: Pricing = Pricing()) -> float:
    """Passenger fares (solo and shared km) minus driver pay per occupied km."""
    fares = 0.0
    occupied = 0.0
    for ev in events:
        kind, detail = ev[1], ev[5]
        if kind == "dropoff":
            d = _detail(detail)
            ride, shared = float(d["ride_m"]), float(d["shared_m"])
            fares += (ride - shared) / 1000.0 * pricing.solo_per_km
            fares += shared / 1000.0 * pricing.shared_per_km
        elif kind == "episode":
            occupied += float(_detail(detail)["route_m"])
    return fares - occupied / 1000.0 * pricing.driver_per_km


def recompute_from_events(events: Iterable, speed: float = DEFAULT_SPEED) -> RunMetrics:
    """Rebuild every metric from an event log alone."""
    m = RunMetrics(speed=speed)
    arrivals = {}
    assigned = set()
    for ev in events:
        t, kind, oid, _, _, detail = ev
        if kind == "arrive":
            m.admitted += 1
            arrivals[oid] = float(t)
        elif kind == "assign":
            d = _detail(detail)
            m.responded += 1
            assigned.add(oid)
            m.resp_time_sum += float(t) - arrivals[oid]
            m.pickup_dist_sum += float(d["pickup_m"])
        elif kind == "cancel":
            m.cancelled += 1
        elif kind == "residual":
            m.residual += 1
        elif kind == "dropoff":
            d = _detail(detail)
            if d["pooled"] == "1":
                m.pooled += 1
                m.detour_sum += float(d["ride_m"]) - float(d["solo_m"])
                m.share_sum += float(d["shared_m"])
        elif kind == "episode":
            d = _detail(detail)
            m.occupied_m += float(d["route_m"])
            m.saving_m += float(d["saving_m"])
    m.profit = compute_profit(events)
    return m


def audit_pooled_trips(events: Iterable, cfg: SimConfig) -> list:
    """Violations of the pickup / detour limits found in an event log."""
    problems = []
    for ev in events:
        kind, oid, detail = ev[1], ev[2], ev[5]
        d = _detail(detail)
        if kind == "assign" and not float(d["pickup_m"]) < cfg.max_pickup:
            problems.append((oid, "pickup", float(d["pickup_m"])))
        if kind == "dropoff" and d["pooled"] == "1":
            detour = float(d["ride_m"]) - float(d["solo_m"])
            if detour > cfg.max_detour + 1e-6:
                problems.append((oid, "detour", detour))
    return problems


def write_events(events: Iterable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_FIELDS)
        for ev in events:
            w.writerow([repr(ev[0]) if isinstance(ev[0], float) else ev[0], *ev[1:]])


def read_events(path: str | Path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != EVENT_FIELDS:
            raise ValueError(f"{path}: unexpected event-log header {header}")
        out = []
        for row in reader:
            oid = int(row[2]) if row[2].lstrip("-").isdigit() else row[2]
            out.append((float(row[0]), row[1], oid, row[3], row[4], row[5]))
        return out


def metrics_csv(rows: Sequence[dict], fields: Sequence[str] | None = None) -> str:
    fields = list(fields or rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
