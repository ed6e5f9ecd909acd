"""Orders, vehicles and the two-passenger pairing geometry."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

from .network import ODPair, RoadNetwork


class OrderStatus(enum.Enum):
    WAITING = "waiting"
    ASSIGNED = "assigned"  # vehicle dispatched, not yet on board
    ONBOARD = "onboard"
    DELIVERED = "delivered"
    CANCELLED = "cancelled"


class Mode(enum.Enum):
    FOFO = "fofo"
    FOLO = "folo"
    NONE = "none"


@dataclass(frozen=True)
class PairingConfig:
    max_pickup: float = 3000.0
    max_detour: float = 3000.0
    batch_interval: float = 10.0

    def __post_init__(self):
        if not (self.max_pickup > 0 and self.max_detour > 0 and self.batch_interval > 0):
            raise ValueError("pairing thresholds and batch interval must be positive")


@dataclass
class Order:
    id: int
    od: ODPair
    arrival_time: float
    max_wait: float = 90.0
    rounds_waited: int = 0
    status: OrderStatus = OrderStatus.WAITING
    pooled: bool = False
    source_id: object = None  # id in the trip log the order was replayed from

    @property
    def origin(self):
        return self.od.origin

    @property
    def destination(self):
        return self.od.destination


@dataclass
class Stop:
    node: object
    action: str  # "pickup" | "dropoff"
    order_id: int


@dataclass
class Vehicle:
    """A two-seat vehicle located on a node at every decision instant.

    ``lag`` is the time still needed to reach ``location`` when the vehicle is
    part-way along the link leading into it.
    """

    id: int
    location: object
    onboard: list = field(default_factory=list)
    stops: list = field(default_factory=list)
    path: list = field(default_factory=list)
    lag: float = 0.0

    @property
    def committed(self) -> set:
        return set(self.onboard) | {s.order_id for s in self.stops}

    @property
    def is_vacant(self) -> bool:
        return not self.onboard and not self.stops

    @property
    def is_partial(self) -> bool:
        """Exactly one passenger committed, on board or still to be picked up."""
        return len(self.committed) == 1

    @property
    def rider(self):
        """Id of the single committed passenger of a partially occupied vehicle."""
        return self.onboard[0] if self.onboard else self.stops[0].order_id

    @property
    def is_full(self) -> bool:
        return len(self.committed) >= 2


@dataclass(frozen=True)
class PairCandidate:
    vehicle_id: int
    pickup: float
    mode: Mode
    saving: float
    detour_first: float
    detour_second: float


def pickup_distance(network: RoadNetwork, vehicle: Vehicle, order: Order) -> float:
    if vehicle.is_full:
        raise ValueError(f"vehicle {vehicle.id} is full")
    return network.shortest_distance(vehicle.location, order.origin)


def trip_lengths_fofo_folo(network: RoadNetwork, first: ODPair, second: ODPair,
                           v_loc) -> tuple[float, float]:
    """Route lengths from the first pickup to the last drop-off, both serving orders.

    ``first`` is already on board a vehicle now at ``v_loc``.
    """
    l = network.shortest_distance
    common = l(first.origin, v_loc) + l(v_loc, second.origin)
    fofo = common + l(second.origin, first.destination) + l(first.destination, second.destination)
    folo = common + l(second.origin, second.destination) + l(second.destination, first.destination)
    return fofo, folo


def distance_saving(network: RoadNetwork, first: ODPair, second: ODPair, v_loc) -> float:
    fofo, folo = trip_lengths_fofo_folo(network, first, second, v_loc)
    solo = (network.shortest_distance(first.origin, first.destination)
            + network.shortest_distance(second.origin, second.destination))
    return solo - min(fofo, folo)


def detours(network: RoadNetwork, first: ODPair, second: ODPair, v_loc,
            mode: Mode) -> tuple[float, float]:
    """In-vehicle distance minus exclusive distance for (first, second)."""
    l = network.shortest_distance
    to_pick = l(first.origin, v_loc) + l(v_loc, second.origin)
    if mode is Mode.FOFO:
        ride_first = to_pick + l(second.origin, first.destination)
        ride_second = l(second.origin, first.destination) + l(first.destination, second.destination)
    elif mode is Mode.FOLO:
        ride_first = to_pick + l(second.origin, second.destination) + l(second.destination,
                                                                        first.destination)
        ride_second = l(second.origin, second.destination)
    else:
        raise ValueError("detours need a serving mode")
    return (ride_first - l(first.origin, first.destination),
            ride_second - l(second.origin, second.destination))


def best_mode(network: RoadNetwork, first: ODPair, second: ODPair, v_loc,
              max_detour: float) -> tuple[Mode, float, float, float] | None:
    """Shortest serving order whose two detours both respect ``max_detour``.

    Returns ``(mode, saving, detour_first, detour_second)`` or None. The saving
    is that of the chosen mode, which equals the min-route saving whenever
    both orders are admissible.
    """
    fofo, folo = trip_lengths_fofo_folo(network, first, second, v_loc)
    solo = (network.shortest_distance(first.origin, first.destination)
            + network.shortest_distance(second.origin, second.destination))
    options = sorted([(fofo, 0, Mode.FOFO), (folo, 1, Mode.FOLO)])
    for length, _, mode in options:
        d1, d2 = detours(network, first, second, v_loc, mode)
        if d1 <= max_detour and d2 <= max_detour:
            return mode, solo - length, d1, d2
    return None


def pair_candidate(network: RoadNetwork, onboard: ODPair, order: Order, vehicle: Vehicle,
                   cfg: PairingConfig) -> PairCandidate | None:
    """Pair ``order`` with the vehicle's committed rider.

    While that rider still waits for pickup the vehicle collects them first,
    so the route is planned from their origin and the approach to it counts
    as pickup distance for ``order``.
    """
    if vehicle.onboard:
        anchor, approach = vehicle.location, 0.0
    else:
        anchor = onboard.origin
        approach = network.shortest_distance(vehicle.location, anchor)
    pickup = approach + network.shortest_distance(anchor, order.origin)
    if not pickup < cfg.max_pickup:
        return None
    found = best_mode(network, onboard, order.od, anchor, cfg.max_detour)
    if found is None:
        return None
    mode, saving, d1, d2 = found
    return PairCandidate(vehicle.id, pickup, mode, saving, d1, d2)


def feasible_pairs(network: RoadNetwork, order: Order, vehicles: Iterable[Vehicle],
                   cfg: PairingConfig, onboard_od: dict) -> tuple[list, list[PairCandidate]]:
    """Candidate vacant and partially occupied vehicles for one waiting order.

    ``onboard_od`` maps a partially occupied vehicle id to the OD of its rider.
    Vacant candidates are ``(vehicle_id, pickup)`` tuples. Both lists are sorted
    by vehicle id.
    """
    vacant, partial = [], []
    for v in sorted(vehicles, key=lambda v: v.id):
        if v.is_vacant:
            pk = network.shortest_distance(v.location, order.origin)
            if pk < cfg.max_pickup:
                vacant.append((v.id, pk))
        elif v.is_partial:
            cand = pair_candidate(network, onboard_od[v.id], order, v, cfg)
            if cand is not None:
                partial.append(cand)
    return vacant, partial
