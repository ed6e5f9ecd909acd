"""Road network: directed graph with constant link travel times and cached shortest paths."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

NodeId = Hashable
Link = tuple  # (tail, head)

KMH = 1000.0 / 3600.0
DEFAULT_SPEED = 30 * KMH


class UnreachableError(ValueError):
    """Raised when a destination cannot be reached from an origin."""

    def __init__(self, origin, destination):
        super().__init__(f"node {destination!r} is unreachable from {origin!r}")
        self.origin = origin
        self.destination = destination


class RoadNetwork:
    """Directed road graph with link lengths in meters and a network-wide speed.

    Shortest paths use a fixed tie-break (lexicographically smallest node
    sequence) so that path link sequences are reproducible. The distance
    returned by :meth:`shortest_distance` is the left-to-right sum of the link
    lengths along :meth:`shortest_path`, so path and distance agree exactly.
    """

    def __init__(self, links: Iterable[tuple], nodes: Iterable[NodeId] | None = None,
                 speed: float = DEFAULT_SPEED, coords: dict | None = None):
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.speed = float(speed)
        self.coords = dict(coords or {})  # node -> (x, y) meters, optional
        self._length: dict[tuple, float] = {}
        node_set = set(nodes) if nodes is not None else set()
        for tail, head, length in links:
            length = float(length)
            if not length > 0:
                raise ValueError(f"link {tail}->{head} has non-positive length {length}")
            if tail == head:
                raise ValueError(f"self-loop at node {tail!r}")
            self._length[(tail, head)] = length
            node_set.add(tail)
            node_set.add(head)
        self.nodes: list = sorted(node_set)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self._succ: dict = {n: [] for n in self.nodes}
        for (tail, head) in sorted(self._length):
            self._succ[tail].append(head)
        self._path_cache: dict[tuple, tuple] = {}
        self._dist_cache: dict[tuple, float] = {}

    # -- basic accessors -------------------------------------------------

    @property
    def links(self) -> list[tuple]:
        return [(t, h, l) for (t, h), l in sorted(self._length.items())]

    def link_length(self, tail, head) -> float:
        return self._length[(tail, head)]

    def link_time(self, tail, head) -> float:
        return self._length[(tail, head)] / self.speed

    def successors(self, node) -> list:
        return self._succ[node]

    def __contains__(self, node) -> bool:
        return node in self.index

    def __len__(self) -> int:
        return len(self.nodes)

    # -- shortest paths ----------------------------------------------------

    @cached_property
    def _raw_dist(self) -> np.ndarray:
        n = len(self.nodes)
        rows, cols, vals = [], [], []
        for (t, h), l in self._length.items():
            rows.append(self.index[t])
            cols.append(self.index[h])
            vals.append(l)
        graph = csr_matrix((vals, (rows, cols)), shape=(n, n))
        return dijkstra(graph, directed=True)

    def _check(self, node):
        if node not in self.index:
            raise KeyError(f"unknown node {node!r}")

    def shortest_path(self, o, d) -> tuple:
        """Node sequence of the tie-broken shortest path from ``o`` to ``d``."""
        key = (o, d)
        cached = self._path_cache.get(key)
        if cached is not None:
            return cached
        self._check(o)
        self._check(d)
        raw = self._raw_dist
        j = self.index[d]
        if not np.isfinite(raw[self.index[o], j]):
            raise UnreachableError(o, d)
        path = [o]
        u = o
        while u != d:
            remaining = raw[self.index[u], j]
            tol = 1e-9 * max(1.0, remaining)
            for v in self._succ[u]:
                if abs(self._length[(u, v)] + raw[self.index[v], j] - remaining) <= tol:
                    u = v
                    break
            else:  # pragma: no cover - would mean dijkstra output is inconsistent
                raise RuntimeError(f"no shortest-path successor at {u!r}")
            path.append(u)
        result = tuple(path)
        self._path_cache[key] = result
        return result

    def shortest_path_links(self, o, d) -> list[tuple]:
        path = self.shortest_path(o, d)
        return list(zip(path[:-1], path[1:]))

    def shortest_distance(self, o, d) -> float:
        key = (o, d)
        cached = self._dist_cache.get(key)
        if cached is not None:
            return cached
        total = 0.0
        for link in self.shortest_path_links(o, d):
            total += self._length[link]
        self._dist_cache[key] = total
        return total

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs shortest distances indexed by ``self.index``; inf if unreachable."""
        n = len(self.nodes)
        out = np.full((n, n), np.inf)
        raw = self._raw_dist
        for i, o in enumerate(self.nodes):
            for j, d in enumerate(self.nodes):
                if np.isfinite(raw[i, j]):
                    out[i, j] = self.shortest_distance(o, d)
        out.setflags(write=False)
        return out

    def nearest_node(self, x: float, y: float, radius: float):
        """Closest node with coordinates within ``radius`` meters, else None."""
        best, best_d = None, radius
        for n in self.nodes:
            xy = self.coords.get(n)
            if xy is None:
                continue
            dist = ((xy[0] - x) ** 2 + (xy[1] - y) ** 2) ** 0.5
            if dist <= best_d and (best is None or dist < best_d):
                best, best_d = n, dist
        return best

    def is_strongly_connected(self, nodes: Iterable | None = None) -> bool:
        idx = [self.index[n] for n in (nodes if nodes is not None else self.nodes)]
        sub = self._raw_dist[np.ix_(idx, idx)]
        return bool(np.isfinite(sub).all())


@dataclass(frozen=True)
class ODPair:
    origin: NodeId
    destination: NodeId
    path: tuple = field(default=(), compare=False)

    @classmethod
    def on(cls, network: RoadNetwork, origin, destination) -> "ODPair":
        return cls(origin, destination, tuple(network.shortest_path_links(origin, destination)))

    @property
    def key(self) -> tuple:
        return (self.origin, self.destination)


def grid_network(rows: int, cols: int, link_length_m: float,
                 speed: float = DEFAULT_SPEED) -> RoadNetwork:
    """Undirected grid modelled as paired arcs; node id = row * cols + col."""
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and column")
    links = []
    coords = {}
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            coords[u] = (c * link_length_m, r * link_length_m)
            if c + 1 < cols:
                links += [(u, u + 1, link_length_m), (u + 1, u, link_length_m)]
            if r + 1 < rows:
                links += [(u, u + cols, link_length_m), (u + cols, u, link_length_m)]
    return RoadNetwork(links, nodes=range(rows * cols), speed=speed, coords=coords)


def _parse_node(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def load_network(nodes_path: str | Path, links_path: str | Path,
                 speed: float = DEFAULT_SPEED) -> RoadNetwork:
    with open(nodes_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "node_id" not in reader.fieldnames:
            raise ValueError(f"{nodes_path}: expected header 'node_id'")
        nodes, coords = [], {}
        has_xy = {"x", "y"} <= set(reader.fieldnames)
        for row in reader:
            node = _parse_node(row["node_id"])
            nodes.append(node)
            if has_xy and row["x"] not in ("", None):
                coords[node] = (float(row["x"]), float(row["y"]))
    links = []
    with open(links_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"tail", "head", "length_m"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{links_path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                links.append((_parse_node(row["tail"]), _parse_node(row["head"]),
                              float(row["length_m"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{links_path}:{lineno}: bad link row {row}") from exc
    return RoadNetwork(links, nodes=nodes, speed=speed, coords=coords)


def save_network(network: RoadNetwork, nodes_path: str | Path, links_path: str | Path) -> None:
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        if network.coords:
            w.writerow(["node_id", "x", "y"])
            for n in network.nodes:
                xy = network.coords.get(n)
                w.writerow([n, *(map(repr, xy) if xy else ("", ""))])
        else:
            w.writerow(["node_id"])
            for n in network.nodes:
                w.writerow([n])
    with open(links_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tail", "head", "length_m"])
        for t, h, l in network.links:
            w.writerow([t, h, repr(l)])
