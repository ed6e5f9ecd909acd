"""Command-line entry points: predict, simulate, oracle, compare and sweep.

Scenarios come from a flat ``key = value`` config file (see ``CONFIG_KEYS``);
command-line flags override file values. Without a network or trip log the
synthetic desk benchmark is used.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from collections import Counter
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench
from .network import KMH, ODPair, RoadNetwork, load_network
from .oracle import build_offline_instance, check_pairing, solve_oracle1, solve_oracle2, write_pairing
from .prediction import (DemandProfile, FixedPointError, build_state_space, load_tables,
                         save_tables, solve_fixed_point)
from .simulator import METRIC_FIELDS, SimConfig, generate_demand, metrics_csv, run, write_events
from .strategies import ConfigurationError, Strategy

log = logging.getLogger("ridepool")

# key -> (SimConfig field or None, parser, description)
CONFIG_KEYS = {
    "network_nodes": (None, str, "node CSV (node_id[,x,y]); default: desk grid"),
    "network_links": (None, str, "link CSV (tail,head,length_m)"),
    "trip_log": (None, str, "trip-log CSV replayed by simulate/oracle and ingested by predict"),
    "window_start": (None, str, "study-window start, ISO-8601 or epoch s; default: first row"),
    "snap_radius_m": (None, float, "snap unknown trip-log nodes within this radius"),
    "tables_dir": (None, str, "prediction tables directory; default: <out>/tables"),
    "out": (None, str, "output directory"),
    "strategy": (None, str, "strategy for simulate"),
    "strategies": (None, str, "comma list for compare/sweep"),
    "seed": (None, int, "first seed"),
    "seeds": (None, int, "number of seeds for compare/sweep"),
    "sweep_axis": (None, str, "K | r_w | dt | ratio"),
    "sweep_values": (None, str, "comma list of axis values"),
    "max_arrival_gap_s": (None, float, "oracle extension: max arrival gap of a pair"),
    "dt": ("dt", float, "matching interval s"),
    "horizon_s": ("horizon", float, "simulated horizon s"),
    "order_driver_ratio": ("order_driver_ratio", None, "orders per vehicle, e.g. 100:25"),
    "speed_kmh": ("speed", float, "network speed km/h"),
    "wait_mean_s": ("wait_mean", float, "mean maximal waiting time s"),
    "wait_sd_s": ("wait_sd", float, "sd of maximal waiting time s"),
    "alpha": ("alpha", float, "waiting-time priority base"),
    "r_w": ("r_w", float, "presumed response rate"),
    "max_pickup_m": ("max_pickup", float, "pickup radius m"),
    "max_detour_m": ("max_detour", float, "detour limit m"),
    "l_bar_m": ("l_bar", float, "average pickup distance m; default: calibrated"),
}
DEFAULT_STRATEGIES = ["np", "mb", "rtv", "fl", "fl-no-delay"]
SWEEP_AXES = {"K": "wait_mean", "r_w": "r_w", "dt": "dt", "ratio": "order_driver_ratio"}
TRIP_LOG_FIELDS = ["order_id", "pickup_time", "origin_node", "dest_node"]


class ScenarioError(ValueError):
    pass


def parse_ratio(text) -> float:
    """``"100:25"`` -> 4.0 orders per vehicle; plain numbers pass through."""
    text = str(text).strip()
    if ":" in text:
        a, b = text.split(":", 1)
        value = float(a) / float(b)
    else:
        value = float(text)
    if not value > 0:
        raise ScenarioError(f"ratio must be positive, got {text!r}")
    return value


def read_config(path: str | Path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ScenarioError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ScenarioError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


@dataclasses.dataclass
class Scenario:
    network: RoadNetwork
    sim: SimConfig
    out: Path
    tables_dir: Path
    strategy: str = "fl"
    strategies: list = dataclasses.field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    seed: int = 0
    seeds: int = 5
    trip_log: Path | None = None
    window_start: str | None = None
    snap_radius: float = 0.0
    sweep_axis: str | None = None
    sweep_values: list = dataclasses.field(default_factory=list)
    max_arrival_gap: float | None = None

    def sim_for(self, seed: int, **overrides) -> SimConfig:
        return dataclasses.replace(self.sim, seed=seed, **overrides)

    def seed_list(self) -> list:
        return list(range(self.seed, self.seed + self.seeds))


def build_scenario(values: dict) -> Scenario:
    sim_kwargs = {}
    for key, value in values.items():
        field_name, parser, _ = CONFIG_KEYS[key]
        if field_name is None or value is None:
            continue
        if key == "order_driver_ratio":
            sim_kwargs[field_name] = parse_ratio(value)
        elif key == "speed_kmh":
            sim_kwargs[field_name] = float(value) * KMH
        else:
            sim_kwargs[field_name] = parser(value)
    if "network_nodes" in values or "network_links" in values:
        if not ("network_nodes" in values and "network_links" in values):
            raise ScenarioError("network_nodes and network_links must be given together")
        for key in ("network_nodes", "network_links"):
            if not Path(values[key]).exists():
                raise ScenarioError(f"{key}: file {values[key]} does not exist")
        network = load_network(values["network_nodes"], values["network_links"],
                               speed=sim_kwargs.get("speed", SimConfig().speed))
    else:
        network = bench.desk_network()
        sim_kwargs.setdefault("horizon", bench.HOURS * 3600.0)
    try:
        sim = SimConfig(**sim_kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    out = Path(values.get("out", "out"))
    trip_log = values.get("trip_log")
    if trip_log is not None and not Path(trip_log).exists():
        raise ScenarioError(f"trip_log: file {trip_log} does not exist")
    strategies = [s.strip() for s in values.get("strategies", ",".join(DEFAULT_STRATEGIES)).split(",")
                  if s.strip()]
    for s in strategies + [values.get("strategy", "fl")]:
        Strategy(s)
    axis = values.get("sweep_axis")
    if axis is not None and axis not in SWEEP_AXES:
        raise ScenarioError(f"sweep_axis must be one of {sorted(SWEEP_AXES)}")
    sweep_values = []
    for v in (values.get("sweep_values") or "").split(","):
        if v.strip():
            sweep_values.append(parse_ratio(v) if axis == "ratio" else float(v))
    if any(not v > 0 for v in sweep_values):
        raise ScenarioError("sweep values must be positive")
    seeds = int(values.get("seeds", 5))
    if seeds < 1:
        raise ScenarioError("seeds must be at least 1")
    gap = values.get("max_arrival_gap_s")
    return Scenario(
        network=network, sim=sim, out=out,
        tables_dir=Path(values.get("tables_dir", out / "tables")),
        strategy=values.get("strategy", "fl"), strategies=strategies,
        seed=int(values.get("seed", 0)), seeds=seeds,
        trip_log=Path(trip_log) if trip_log else None, window_start=values.get("window_start"),
        snap_radius=float(values.get("snap_radius_m", 0.0)), sweep_axis=axis,
        sweep_values=sweep_values,
        max_arrival_gap=float(gap) if gap is not None else None,
    )


# -- trip logs ---------------------------------------------------------------------


def _timestamp(text: str) -> float:
    text = str(text).strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError as exc:
        raise ScenarioError(f"unparseable timestamp {text!r}") from exc


def _resolve(network: RoadNetwork, node_text: str, x: str | None, y: str | None,
             radius: float):
    from .network import _parse_node

    node = _parse_node(node_text) if node_text not in (None, "") else None
    if node is not None and node in network:
        return node
    if x not in (None, "") and y not in (None, "") and radius > 0:
        return network.nearest_node(float(x), float(y), radius)
    return None


def read_trip_log(path: str | Path, network: RoadNetwork, snap_radius: float = 0.0,
                  window_start: str | float | None = None) -> tuple[list, int]:
    """Rows ``(order_id, seconds since window start, origin, destination)`` and a drop count.

    Unknown nodes are snapped to the nearest node within ``snap_radius`` when
    the log carries ``origin_x, origin_y, dest_x, dest_y`` and the network has
    coordinates; otherwise the row is dropped.
    """
    rows, dropped = [], 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRIP_LOG_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ScenarioError(f"{path}: missing columns {sorted(missing)}")
        raw = []
        for lineno, row in enumerate(reader, start=2):
            try:
                t = _timestamp(row["pickup_time"])
            except ScenarioError as exc:
                raise ScenarioError(f"{path}:{lineno}: {exc}") from exc
            o = _resolve(network, row["origin_node"], row.get("origin_x"), row.get("origin_y"),
                         snap_radius)
            d = _resolve(network, row["dest_node"], row.get("dest_x"), row.get("dest_y"),
                         snap_radius)
            if o is None or d is None or o == d:
                dropped += 1
                continue
            raw.append((row["order_id"], t, o, d))
    if not raw:
        return [], dropped
    start = _timestamp(window_start) if window_start is not None else min(r[1] for r in raw)
    for oid, t, o, d in raw:
        if t < start:
            dropped += 1
            continue
        rows.append((oid, t - start, o, d))
    rows.sort(key=lambda r: (r[1], str(r[0])))
    if dropped:
        log.warning("%s: dropped %d trip-log rows", path, dropped)
    return rows, dropped


def ingest_demand(path: str | Path, network: RoadNetwork, hours: Sequence[int] | None = None,
                  snap_radius: float = 0.0, window_start=None) -> DemandProfile:
    """Per-hour OD rates (count / 3600 s) from a trip log."""
    rows, _ = read_trip_log(path, network, snap_radius, window_start)
    if not rows:
        log.warning("%s: empty trip log, demand profile is empty", path)
        return DemandProfile({h: {} for h in (hours or [])})
    counts: dict = {}
    for _, t, o, d in rows:
        h = int(t // 3600)
        if hours is not None and h not in hours:
            continue
        counts.setdefault(h, Counter())[(o, d)] += 1
    for h in hours or []:
        counts.setdefault(h, Counter())
    return DemandProfile({h: {k: c / 3600.0 for k, c in sorted(table.items())}
                          for h, table in sorted(counts.items())})


def scenario_profile(sc: Scenario) -> DemandProfile:
    if sc.trip_log is not None:
        return ingest_demand(sc.trip_log, sc.network, snap_radius=sc.snap_radius,
                             window_start=sc.window_start)
    return bench.desk_demand(hours=max(1, math.ceil(sc.sim.horizon / 3600.0)))


def scenario_orders(sc: Scenario, cfg: SimConfig) -> list:
    if sc.trip_log is not None:
        rows, _ = read_trip_log(sc.trip_log, sc.network, sc.snap_radius, sc.window_start)
        return generate_demand(rows, sc.network, cfg)
    return generate_demand(scenario_profile(sc), sc.network, cfg)


# -- prediction tables -----------------------------------------------------------------


def predict_tables(network: RoadNetwork, profile: DemandProfile, cfg: SimConfig) -> dict:
    out = {}
    for hour in profile.hours:
        rates = {k: v for k, v in profile.hour(hour).items() if v > 0}
        ods = [ODPair.on(network, o, d) for (o, d) in sorted(rates)]
        space = build_state_space(network, ods, cfg.pairing)
        out[hour] = solve_fixed_point(space, rates)
    return out


def load_table_dir(path: Path) -> dict:
    files = sorted(path.glob("hour_*.csv")) if path.is_dir() else []
    if not files:
        raise ConfigurationError(f"no prediction tables in {path}; run the 'predict' command "
                                 "(cmd_predict) first")
    return {int(f.stem.split("_", 1)[1]): load_tables(f) for f in files}


# -- commands ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def cmd_predict(sc: Scenario) -> int:
    profile = scenario_profile(sc)
    sc.tables_dir.mkdir(parents=True, exist_ok=True)
    lines = ["hour,ods,takers,iterations,residual,clipped"]
    try:
        tables = predict_tables(sc.network, profile, sc.sim)
    except FixedPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for hour, tb in sorted(tables.items()):
        save_tables(tb, sc.tables_dir / f"hour_{hour}.csv")
        lines.append(f"{hour},{len(tb.ods)},{len(tb.takers)},{tb.iterations},"
                     f"{tb.residual!r},{tb.clipped}")
        print(f"hour {hour}: {len(tb.ods)} ODs, {tb.iterations} iterations, "
              f"residual {tb.residual:.2e}")
    _write(sc.tables_dir / "residuals.csv", "\n".join(lines) + "\n")
    return 0


def _needs_tables(strategies) -> bool:
    return any(Strategy(s).uses_tables for s in strategies)


def _run_cell(sc: Scenario, strategy: str, cfg: SimConfig, orders, tables):
    return run(sc.network, orders, cfg, strategy, tables if Strategy(strategy).uses_tables else None)


def cmd_simulate(sc: Scenario) -> int:
    tables = load_table_dir(sc.tables_dir) if _needs_tables([sc.strategy]) else None
    cfg = sc.sim_for(sc.seed)
    result = _run_cell(sc, sc.strategy, cfg, scenario_orders(sc, cfg), tables)
    stem = f"simulate_{sc.strategy}_seed{sc.seed}"
    _write(sc.out / f"{stem}_metrics.csv", metrics_csv([result.metrics_row()]))
    write_events(result.events, sc.out / f"{stem}_events.csv")
    print(f"wrote {sc.out / (stem + '_events.csv')}")
    return 0


def _mean_row(rows: list, keys: dict) -> dict:
    out = dict(keys)
    out["seed"] = "mean"
    for name in METRIC_FIELDS:
        out[name] = float(np.mean([r[name] for r in rows]))
    return out


def compare_rows(sc: Scenario, tables=None, overrides: dict | None = None,
                 extra: dict | None = None) -> list:
    """Per-seed rows plus one mean row per strategy; every strategy of a seed
    sees the same order stream."""
    overrides = overrides or {}
    extra = extra or {}
    per: dict = {s: [] for s in sc.strategies}
    for seed in sc.seed_list():
        cfg = sc.sim_for(seed, **overrides)
        orders = scenario_orders(sc, cfg)
        for s in sc.strategies:
            row = _run_cell(sc, s, cfg, orders, tables).metrics_row()
            row = {**{k: row[k] for k in ("strategy", "seed", "config_hash")}, **extra,
                   **{k: row[k] for k in METRIC_FIELDS}}
            per[s].append(row)
    rows = []
    for s in sc.strategies:
        rows.extend(per[s])
        rows.append(_mean_row(per[s], {"strategy": s, "seed": "mean",
                                       "config_hash": per[s][0]["config_hash"], **extra}))
    return rows


def cmd_compare(sc: Scenario) -> int:
    tables = load_table_dir(sc.tables_dir) if _needs_tables(sc.strategies) else None
    _write(sc.out / "compare.csv", metrics_csv(compare_rows(sc, tables)))
    return 0


def cmd_sweep(sc: Scenario) -> int:
    if sc.sweep_axis is None or not sc.sweep_values:
        raise ScenarioError("sweep needs sweep_axis and sweep_values")
    tables = load_table_dir(sc.tables_dir) if _needs_tables(sc.strategies) else None
    field_name = SWEEP_AXES[sc.sweep_axis]
    rows = []
    for value in sc.sweep_values:
        rows.extend(compare_rows(sc, tables, {field_name: value}, {sc.sweep_axis: value}))
    _write(sc.out / f"sweep_{sc.sweep_axis}.csv", metrics_csv(rows))
    return 0


def cmd_oracle(sc: Scenario) -> int:
    cfg = sc.sim_for(sc.seed)
    orders = scenario_orders(sc, cfg)
    inst = build_offline_instance(orders, sc.network, cfg.pairing, sc.max_arrival_gap)
    n = max(inst.size, 1)
    summary = ["oracle,seed,config_hash,orders,paired,pairing_ratio,total_saving_km"]
    for name, solve in (("oracle1", solve_oracle1), ("oracle2", solve_oracle2)):
        pairing = solve(inst)
        check_pairing(inst, pairing)
        write_pairing(inst, pairing, _out(sc.out / f"{name}_pairs.csv"))
        summary.append(f"{name},{sc.seed},{cfg.digest()},{inst.size},{pairing.paired_count},"
                       f"{pairing.paired_count / n!r},{pairing.total_saving / 1000.0!r}")
    _write(sc.out / "oracle_summary.csv", "\n".join(summary) + "\n")
    return 0


def _out(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


COMMANDS = {"predict": cmd_predict, "simulate": cmd_simulate, "oracle": cmd_oracle,
            "compare": cmd_compare, "sweep": cmd_sweep}


def make_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:20s} {v[2]}" for k, v in CONFIG_KEYS.items())
    parser = argparse.ArgumentParser(
        prog="ridepool", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Ride-pooling dispatch experiments.",
        epilog="config keys (key = value, '#' starts a comment):\n" + keys)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value scenario file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="first seed")
        p.add_argument("--seeds", type=int, help="number of seeds (compare, sweep)")
        p.add_argument("--strategy", help="strategy for simulate")
        p.add_argument("--strategies", help="comma list (compare, sweep)")
        p.add_argument("--tables-dir", dest="tables_dir")
        p.add_argument("--trip-log", dest="trip_log")
        if name == "sweep":
            p.add_argument("axis", choices=sorted(SWEEP_AXES))
            p.add_argument("values", nargs="+")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = read_config(args.config) if args.config else {}
        for key in ("out", "seed", "seeds", "strategy", "strategies", "tables_dir", "trip_log"):
            if getattr(args, key) is not None:
                values[key] = str(getattr(args, key))
        if args.command == "sweep":
            values["sweep_axis"] = args.axis
            values["sweep_values"] = ",".join(args.values)
        sc = build_scenario(values)
        return COMMANDS[args.command](sc)
    except (ScenarioError, ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
