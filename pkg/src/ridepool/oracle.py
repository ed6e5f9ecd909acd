"""Offline pairing bounds over a full horizon of known orders."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np

from .domain import Order, PairingConfig
from .network import RoadNetwork


@dataclass
class OfflineInstance:
    orders: list  # Order, in the order used to index ``savings``
    savings: np.ndarray  # symmetric, zero diagonal, 0 where ineligible
    feasible: np.ndarray  # symmetric bool, False on the diagonal

    @property
    def size(self) -> int:
        return len(self.orders)


@dataclass
class Pairing:
    pairs: list  # (i, j) index pairs with i < j
    total_saving: float

    def partner(self, n: int) -> list:
        """``partner[i]`` is the matched index or ``i`` itself when unpaired."""
        out = list(range(n))
        for i, j in self.pairs:
            out[i], out[j] = j, i
        return out

    @property
    def paired_count(self) -> int:
        return 2 * len(self.pairs)


def build_offline_instance(orders: Sequence[Order], network: RoadNetwork, cfg: PairingConfig,
                           max_arrival_gap: float | None = None) -> OfflineInstance:
    """Pairwise savings with the earlier arrival picked up first at its own origin.

    A pair is eligible when some serving order keeps both detours within the
    detour limit; its saving is that of the shortest such order. Pickup
    distance and vehicle availability are ignored. ``max_arrival_gap`` (off by
    default) additionally requires the two arrivals to be that close in time.
    """
    orders = sorted(orders, key=lambda o: (o.arrival_time, o.id))
    n = len(orders)
    D = network.distance_matrix
    idx = network.index
    o = np.array([idx[p.origin] for p in orders], dtype=int)
    d = np.array([idx[p.destination] for p in orders], dtype=int)
    solo = D[o, d]
    # row i is the first pickup (earlier arrival), column j the second
    common = D[o[:, None], o[None, :]]
    ride_fofo_first = common + D[o[None, :], d[:, None]]
    ride_fofo_second = D[o[None, :], d[:, None]] + D[d[:, None], d[None, :]]
    fofo = common + ride_fofo_second
    folo = common + solo[None, :] + D[d[None, :], d[:, None]]
    ok_fofo = ((ride_fofo_first - solo[:, None] <= cfg.max_detour)
               & (ride_fofo_second - solo[None, :] <= cfg.max_detour))
    ok_folo = folo - solo[:, None] <= cfg.max_detour
    use_fofo = ok_fofo & ((fofo <= folo) | ~ok_folo)
    length = np.where(use_fofo, fofo, folo)
    feasible = ok_fofo | ok_folo
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    if max_arrival_gap is not None:
        t = np.array([p.arrival_time for p in orders])
        upper &= np.abs(t[:, None] - t[None, :]) <= max_arrival_gap
    feasible &= upper
    saving = np.where(feasible, solo[:, None] + solo[None, :] - length, 0.0)
    saving = np.maximum(saving, 0.0)
    feasible = feasible | feasible.T
    saving = saving + saving.T
    return OfflineInstance(list(orders), saving, feasible)


def _matching(n: int, weights: dict, maxcardinality: bool = False) -> list:
    g = nx.Graph()
    g.add_nodes_from(range(n))
    for (i, j), w in weights.items():
        g.add_edge(i, j, weight=w)
    pairs = nx.max_weight_matching(g, maxcardinality=maxcardinality)
    return sorted(tuple(sorted(p)) for p in pairs)


def solve_oracle1(instance: OfflineInstance) -> Pairing:
    """Maximum total saving over all matchings; unmatched orders ride alone."""
    s = instance.savings
    ii, jj = np.nonzero(np.triu(s, k=1) > 0)
    pairs = _matching(instance.size, {(int(i), int(j)): float(s[i, j]) for i, j in zip(ii, jj)})
    return Pairing(pairs, float(sum(s[i, j] for i, j in pairs)))


def solve_oracle2(instance: OfflineInstance) -> Pairing:
    """Most paired orders over eligible pairs, ties toward the larger total saving."""
    s = instance.savings
    ii, jj = np.nonzero(np.triu(instance.feasible, k=1))
    if len(ii) == 0:
        return Pairing([], 0.0)
    # the +1 keeps zero-saving pairs as edges; it is constant per pair, so
    # among maximum-cardinality matchings it does not change the ranking
    pairs = _matching(instance.size, {(int(i), int(j)): 1.0 + float(s[i, j])
                                      for i, j in zip(ii, jj)}, maxcardinality=True)
    return Pairing(pairs, float(sum(s[i, j] for i, j in pairs)))


def check_pairing(instance: OfflineInstance, pairing: Pairing) -> None:
    seen = set()
    for i, j in pairing.pairs:
        if i == j or i in seen or j in seen:
            raise AssertionError(f"pair ({i}, {j}) breaks the matching")
        if not instance.feasible[i, j]:
            raise AssertionError(f"pair ({i}, {j}) is not eligible")
        seen.update((i, j))


def write_pairing(instance: OfflineInstance, pairing: Pairing, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order_i", "order_j", "saving_m"])
        for i, j in pairing.pairs:
            a, b = instance.orders[i], instance.orders[j]
            w.writerow([_label(a), _label(b), repr(float(instance.savings[i, j]))])


def _label(order: Order):
    return order.id if order.source_id is None else order.source_id
