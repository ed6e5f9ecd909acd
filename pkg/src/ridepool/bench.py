"""Synthetic desk benchmark: a 10x10 grid with eight demand hotspots."""

from __future__ import annotations

import dataclasses

from .network import ODPair, RoadNetwork, grid_network
from .prediction import (DemandProfile, PredictionTables, build_state_space, fill_expected_savings,
                         solve_fixed_point)
from .simulator import SimConfig

GRID = 10
LINK_M = 500.0
HOURS = 2
# row, col of each hotspot; two clusters on opposite sides plus a middle pair
HOTSPOTS = [(1, 1), (1, 8), (8, 1), (8, 8), (2, 4), (7, 5), (4, 2), (5, 7)]
TOTAL_RATE_PER_H = 420.0


def desk_network() -> RoadNetwork:
    return grid_network(GRID, GRID, LINK_M)


def hotspot_nodes() -> list:
    return [r * GRID + c for r, c in HOTSPOTS]


def desk_demand(total_per_hour: float = TOTAL_RATE_PER_H, hours: int = HOURS) -> DemandProfile:
    """Rates between every ordered pair of hotspots, heavier on the long diagonals."""
    nodes = hotspot_nodes()
    weights = {}
    for o in nodes:
        for d in nodes:
            if o != d:
                weights[(o, d)] = 1.0
    for a, b in ((0, 3), (1, 2), (4, 5), (6, 7)):
        for o, d in ((nodes[a], nodes[b]), (nodes[b], nodes[a])):
            weights[(o, d)] = 4.0
    scale = total_per_hour / 3600.0 / sum(weights.values())
    rates = {k: w * scale for k, w in weights.items()}
    return DemandProfile.stationary(rates, hours=hours)


def desk_config(**overrides) -> SimConfig:
    return dataclasses.replace(SimConfig(horizon=HOURS * 3600.0), **overrides)


def desk_tables(network: RoadNetwork, profile: DemandProfile, cfg: SimConfig) -> dict:
    """Solved prediction tables for every hour of the profile."""
    out = {}
    solved: dict = {}
    for hour in profile.hours:
        rates = profile.hour(hour)
        key = tuple(sorted(rates.items()))
        if key not in solved:
            ods = [ODPair.on(network, o, d) for (o, d) in sorted(rates)]
            space = build_state_space(network, ods, cfg.pairing)
            tables = solve_fixed_point(space, {od.key: rates[od.key] for od in ods})
            solved[key] = fill_expected_savings(tables)
        out[hour] = solved[key]
    return out


def bundled_networks() -> dict:
    """Small desk networks shipped for solver checks, each with a demand map."""
    from .network import RoadNetwork as _Net

    line = _Net([(0, 1, 1000.0), (1, 2, 1000.0), (2, 3, 1000.0), (3, 2, 1000.0),
                 (2, 1, 1000.0), (1, 0, 1000.0)])
    grid = desk_network()
    small = grid_network(4, 4, 400.0)
    return {
        "line": (line, {(0, 3): 1 / 60, (1, 3): 1 / 90, (3, 0): 1 / 120}),
        "grid4": (small, {(0, 15): 1 / 40, (3, 12): 1 / 50, (15, 0): 1 / 60, (1, 14): 1 / 80}),
        "desk": (grid, desk_demand().hour(0)),
    }
