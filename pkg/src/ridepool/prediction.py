"""Seeker/taker state model and the expected distance-saving tables.

Passengers of an OD pair ``w`` are either *seekers* waiting at the origin or
*takers* riding alone along a link of the OD's shortest path. Given Poisson
demand rates per OD, a fixed-point system links the pairing probabilities of
every state; its solution yields the expected saving of assigning a passenger
a vacant vehicle and of keeping them waiting.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .domain import PairingConfig, best_mode
from .network import ODPair, RoadNetwork, _parse_node

log = logging.getLogger(__name__)

DAMPING = 0.5
TOLERANCE = 1e-8
MAX_ITER = 10_000


class FixedPointError(RuntimeError):
    """Raised when the damped iteration does not reach the tolerance."""

    def __init__(self, best_residual: float, iterations: int, tables: "PredictionTables"):
        super().__init__(f"no convergence after {iterations} iterations "
                         f"(best residual {best_residual:.3e})")
        self.best_residual = best_residual
        self.iterations = iterations
        self.tables = tables


@dataclass(frozen=True)
class TakerState:
    id: int
    od: int  # index into StateSpace.ods
    position: int  # n in a^n, 0-based along the path
    link: tuple
    tau: float


@dataclass
class StateSpace:
    ods: list  # ODPair; duplicates are distinct states
    takers: list  # TakerState, ordered by (od, position)
    takers_of_od: list  # per OD: taker ids along the path
    seeker_takers: list  # T_s(w): per OD, matchable taker ids in priority order
    taker_seekers: list  # S_t: per taker, matchable seeker (OD) indices
    saving: dict  # (w, t) -> E(s(w), t)

    @property
    def od_index(self) -> dict:
        return {od.key: i for i, od in enumerate(self.ods)}

    def priority_set(self, w: int, t: int) -> list:
        """Takers preferred over ``t`` by seeker ``s(w)``."""
        order = self.seeker_takers[w]
        return order[:order.index(t)]


@dataclass
class DemandProfile:
    """Poisson arrival rates per OD (per second), one mapping per hour bucket."""

    rates: dict = field(default_factory=dict)  # hour -> {(o, d): rate}

    def __post_init__(self):
        for hour, table in self.rates.items():
            for key, rate in table.items():
                if rate < 0 or not math.isfinite(rate):
                    raise ValueError(f"bad rate {rate} for OD {key} in hour {hour}")

    @classmethod
    def stationary(cls, rates: Mapping, hours: int = 1) -> "DemandProfile":
        return cls({h: dict(rates) for h in range(hours)})

    def hour(self, h: int) -> dict:
        return self.rates.get(h, {})

    @property
    def hours(self) -> list:
        return sorted(self.rates)

    def od_keys(self) -> list:
        keys = set()
        for table in self.rates.values():
            keys.update(k for k, v in table.items() if v > 0)
        return sorted(keys)


@dataclass
class PredictionTables:
    ods: list  # (o, d) keys
    lam_w: np.ndarray
    p_s: np.ndarray
    e_seeker: np.ndarray
    e_vacant: np.ndarray
    takers: list  # TakerState
    lam_t: np.ndarray
    p_t: np.ndarray
    rho: np.ndarray
    eta_t: np.ndarray
    e_taker: np.ndarray
    eta: dict  # (t, w) -> eta_t^{s(w)}
    saving: dict  # (w, t) -> E
    iterations: int = 0
    residual: float = 0.0
    residual_history: list = field(default_factory=list)
    clipped: int = 0
    degenerate: set = field(default_factory=set)

    def __post_init__(self):
        self._lookup = {key: i for i, key in enumerate(self.ods)}

    def index_of(self, key) -> int | None:
        return self._lookup.get(tuple(key))

    def seeker_probability(self, key) -> float:
        i = self.index_of(key)
        return 0.0 if i is None else float(self.p_s[i])

    def seeker_saving(self, key) -> float:
        i = self.index_of(key)
        return 0.0 if i is None else float(self.e_seeker[i])

    def vacant_saving(self, key) -> float:
        i = self.index_of(key)
        return 0.0 if i is None else float(self.e_vacant[i])

    @classmethod
    def empty(cls) -> "PredictionTables":
        z = np.zeros(0)
        return cls([], z, z, z, z, [], z, z, z, z, z, {}, {})


# -- state space ---------------------------------------------------------


def build_state_space(network: RoadNetwork, ods: Iterable[ODPair],
                      cfg: PairingConfig) -> StateSpace:
    ods = [od if od.path else ODPair.on(network, *od.key)
           for od in ods if od.origin != od.destination]
    takers, takers_of_od = [], []
    for w, od in enumerate(ods):
        ids = []
        for n, link in enumerate(od.path):
            ids.append(len(takers))
            takers.append(TakerState(len(takers), w, n, link, network.link_time(*link)))
        takers_of_od.append(ids)

    seeker_takers = [[] for _ in ods]
    taker_seekers = [[] for _ in takers]
    saving = {}
    for t in takers:
        head = t.link[1]
        taker_od = ods[t.od]
        for w, seeker_od in enumerate(ods):
            if not network.shortest_distance(head, seeker_od.origin) < cfg.max_pickup:
                continue
            found = best_mode(network, taker_od, seeker_od, head, cfg.max_detour)
            if found is None:
                continue
            saving[(w, t.id)] = found[1]
            seeker_takers[w].append(t.id)
            taker_seekers[t.id].append(w)
    space = StateSpace(ods, takers, takers_of_od, seeker_takers, taker_seekers, saving)
    return priority_sets(space)


def priority_sets(space: StateSpace) -> StateSpace:
    """Order each seeker's takers by decreasing saving, ties to the smaller id."""
    for w, members in enumerate(space.seeker_takers):
        members.sort(key=lambda t: (-space.saving[(w, t)], t))
    return space


# -- fixed point -----------------------------------------------------------


class _System:
    """Vectorised evaluation of the six equation families."""

    def __init__(self, space: StateSpace, lam_w: np.ndarray):
        self.space = space
        self.lam_w = lam_w
        self.n_w = len(space.ods)
        self.n_t = len(space.takers)
        self.tau = np.array([t.tau for t in space.takers])
        pairs_t, pairs_w, splits = [], [], [0]
        for w, members in enumerate(space.seeker_takers):
            pairs_t.extend(members)
            pairs_w.extend([w] * len(members))
            splits.append(len(pairs_t))
        self.pair_t = np.array(pairs_t, dtype=int)
        self.pair_w = np.array(pairs_w, dtype=int)
        self.splits = splits
        self.clip_events = 0

    def rho(self, lam_t, eta_t):
        """Occupancy: unpaired arrival rate times mean sojourn, clipped to [0, 1]."""
        with np.errstate(divide="ignore", invalid="ignore"):
            sojourn = np.where(eta_t > 0, -np.expm1(-eta_t * self.tau) / eta_t, self.tau)
        raw = lam_t * sojourn
        over = raw > 1.0
        self.clip_events += int(over.sum())
        return np.clip(raw, 0.0, 1.0), int(over.sum())

    def eta_pairs(self, rho):
        out = np.empty(len(self.pair_t))
        free = 1.0 - rho
        for w in range(self.n_w):
            a, b = self.splits[w], self.splits[w + 1]
            if a == b:
                continue
            ahead = np.concatenate(([1.0], np.cumprod(free[self.pair_t[a:b - 1]])))
            out[a:b] = self.lam_w[w] * ahead
        return out

    def eta_total(self, eta_pairs):
        total = np.zeros(self.n_t)
        np.add.at(total, self.pair_t, eta_pairs)
        return total

    def p_t(self, eta_t):
        return np.where(eta_t > 0, -np.expm1(-eta_t * self.tau), 0.0)

    def p_s(self, rho):
        out = np.zeros(self.n_w)
        free = 1.0 - rho
        for w in range(self.n_w):
            a, b = self.splits[w], self.splits[w + 1]
            if a < b:
                out[w] = 1.0 - np.prod(free[self.pair_t[a:b]])
        return out

    def lam_t(self, p_s, p_t):
        out = np.zeros(self.n_t)
        for w, ids in enumerate(self.space.takers_of_od):
            rate = self.lam_w[w] * (1.0 - p_s[w])
            for t in ids:
                out[t] = rate
                rate *= 1.0 - p_t[t]
        return out


@dataclass
class _State:
    rho: np.ndarray
    eta: np.ndarray
    eta_t: np.ndarray
    p_t: np.ndarray
    p_s: np.ndarray
    lam_t: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.eta, self.eta_t, self.p_t, self.p_s, self.lam_t])

    @classmethod
    def from_vector(cls, x: np.ndarray, sizes: list) -> "_State":
        parts = np.split(x, np.cumsum(sizes)[:-1])
        return cls(*parts)


def _sweep(sys: _System, s: _State) -> _State:
    rho, _ = sys.rho(s.lam_t, s.eta_t)
    eta = sys.eta_pairs(rho)
    eta_t = sys.eta_total(eta)
    p_t = sys.p_t(eta_t)
    p_s = sys.p_s(rho)
    lam_t = sys.lam_t(p_s, p_t)
    return _State(rho, eta, eta_t, p_t, p_s, lam_t)


def _residuals(sys: _System, s: _State) -> dict:
    """Max abs gap between each family's left side and its right side at ``s``."""
    clip_before = sys.clip_events
    rho, _ = sys.rho(s.lam_t, s.eta_t)
    sys.clip_events = clip_before
    eta = sys.eta_pairs(s.rho)
    gaps = {
        "p_s": sys.p_s(s.rho) - s.p_s,
        "p_t": sys.p_t(s.eta_t) - s.p_t,
        "eta": sys.eta_total(s.eta) - s.eta_t,
        "eta_s": eta - s.eta,
        "rho": rho - s.rho,
        "lambda_t": sys.lam_t(s.p_s, s.p_t) - s.lam_t,
    }
    return {k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in gaps.items()}


def _demand_vector(space: StateSpace, demand) -> np.ndarray:
    if not isinstance(demand, (Mapping, DemandProfile)):
        vec = np.asarray(demand, dtype=float)
        if vec.shape != (len(space.ods),):
            raise ValueError("demand sequence must align with the state-space ODs")
        return vec.copy()
    if isinstance(demand, DemandProfile):
        hours = demand.hours
        demand = demand.hour(hours[0]) if hours else {}
    return np.array([float(demand.get(od.key, 0.0)) for od in space.ods])


def solve_fixed_point(space: StateSpace, demand, tol: float = TOLERANCE,
                      max_iter: int = MAX_ITER, damping: float = DAMPING) -> PredictionTables:
    """Solve the seeker/taker system by damped fixed-point iteration.

    ``demand`` is a mapping ``(o, d) -> rate`` or a :class:`DemandProfile`
    (its first hour is used). Raises :class:`FixedPointError` when the residual
    is still above ``tol`` after ``max_iter`` sweeps.
    """
    lam_w = _demand_vector(space, demand)
    sys = _System(space, lam_w)
    zeros_t = np.zeros(sys.n_t)
    # start from the no-pairing state: p = 0, eta from the no-competition branch
    eta0 = lam_w[sys.pair_w] if len(sys.pair_w) else np.zeros(0)
    state = _State(zeros_t.copy(), eta0, sys.eta_total(eta0), zeros_t.copy(),
                   np.zeros(sys.n_w), sys.lam_t(np.zeros(sys.n_w), zeros_t))
    sizes = [sys.n_t, len(sys.pair_t), sys.n_t, sys.n_t, sys.n_w, sys.n_t]
    history = []
    best = (math.inf, state)
    for it in range(1, max_iter + 1):
        res = max(_residuals(sys, state).values(), default=0.0)
        history.append(res)
        if res < best[0]:
            best = (res, state)
        if res <= tol:
            tables = _tables(space, sys, state, it, res, history)
            log.debug("fixed point converged in %d sweeps (residual %.2e)", it, res)
            return tables
        new = _sweep(sys, state)
        x = (1.0 - damping) * state.vector() + damping * new.vector()
        state = _State.from_vector(x, sizes)
    tables = _tables(space, sys, best[1], max_iter, best[0], history)
    raise FixedPointError(best[0], max_iter, tables)


def equation_residuals(space: StateSpace, demand, tables: PredictionTables) -> dict:
    """Per-family residuals of a solved table against the equations."""
    sys = _System(space, _demand_vector(space, demand))
    eta = np.array([tables.eta[(int(t), int(w))] for t, w in zip(sys.pair_t, sys.pair_w)])
    state = _State(tables.rho, eta, tables.eta_t, tables.p_t, tables.p_s, tables.lam_t)
    return _residuals(sys, state)


def _tables(space, sys, s: _State, iterations, residual, history) -> PredictionTables:
    eta = {(int(t), int(w)): float(v) for t, w, v in zip(sys.pair_t, sys.pair_w, s.eta)}
    _, clipped = sys.rho(s.lam_t, s.eta_t)
    tables = PredictionTables(
        ods=[od.key for od in space.ods], lam_w=sys.lam_w.copy(), p_s=s.p_s.copy(),
        e_seeker=np.zeros(sys.n_w), e_vacant=np.zeros(sys.n_w), takers=list(space.takers),
        lam_t=s.lam_t.copy(), p_t=s.p_t.copy(), rho=s.rho.copy(), eta_t=s.eta_t.copy(),
        e_taker=np.zeros(sys.n_t), eta=eta, saving=dict(space.saving),
        iterations=iterations, residual=residual, residual_history=history, clipped=clipped,
    )
    fill_expected_savings(tables)
    return tables


# -- expected savings -------------------------------------------------------


def _seekers_of(tables: PredictionTables) -> dict:
    out: dict = {}
    for (t, w) in tables.eta:
        out.setdefault(t, []).append(w)
    return out


def expected_saving_taker(tables: PredictionTables, t: int, seekers: list | None = None) -> float:
    """eta-weighted mean saving over the seekers that can pair with taker ``t``."""
    if seekers is None:
        seekers = _seekers_of(tables).get(t, [])
    num = den = 0.0
    for w in seekers:
        eta = tables.eta[(t, w)]
        num += eta * tables.saving[(w, t)]
        den += eta
    return num / den if den > 0 else 0.0


def expected_saving_vacant(tables: PredictionTables, w: int) -> float:
    """Expected en-route saving of a passenger of OD ``w`` given a vacant vehicle.

    Returns 0 and records ``w`` in ``tables.degenerate`` when no passenger of
    the OD reaches the taker states (zero demand or certain seeker pairing).
    """
    unpaired = (1.0 - tables.p_s[w]) * tables.lam_w[w]
    if not unpaired > 0:
        tables.degenerate.add(w)
        return 0.0
    total = 0.0
    for taker in tables.takers:
        if taker.od == w:
            t = taker.id
            total += tables.e_taker[t] * tables.p_t[t] * tables.lam_t[t]
    return total / unpaired


def expected_saving_seeker(tables: PredictionTables, w: int) -> float:
    num = den = 0.0
    for (ww, t), e in tables.saving.items():
        if ww != w:
            continue
        rate = tables.rho[t] * tables.eta[(t, w)]
        num += e * rate
        den += rate
    return num / den if den > 0 else 0.0


def fill_expected_savings(tables: PredictionTables) -> PredictionTables:
    seekers = _seekers_of(tables)
    for taker in tables.takers:
        tables.e_taker[taker.id] = expected_saving_taker(tables, taker.id, seekers.get(taker.id, []))
    tables.degenerate = set()
    for w in range(len(tables.ods)):
        tables.e_seeker[w] = expected_saving_seeker(tables, w)
        tables.e_vacant[w] = expected_saving_vacant(tables, w)
    return tables


def wait_success_probability(r_w: float, k_rounds: int, k_p: int) -> float:
    if not 0.0 <= r_w <= 1.0:
        raise ValueError("r_w must lie in [0, 1]")
    if k_p < 0 or k_p > k_rounds:
        raise ValueError(f"rounds waited {k_p} outside [0, {k_rounds}]")
    return 1.0 - (1.0 - r_w) ** (k_rounds - k_p)


def expected_saving_wait(p_s: float, e_seeker: float, e_vacant: float, r_w: float,
                         k_rounds: int, k_p: int) -> float:
    """Expected saving of keeping a passenger waiting at the origin one more round."""
    return wait_success_probability(r_w, k_rounds, k_p) * (p_s * e_seeker + (1.0 - p_s) * e_vacant)


def k_rounds_for(mean_wait: float, batch_interval: float) -> int:
    return math.ceil(mean_wait / batch_interval - 1e-12)


# -- persistence ---------------------------------------------------------------

_SECTIONS = {
    "meta": ["key", "value"],
    "seekers": ["origin", "destination", "lambda_w", "p_s", "e_seeker", "e_vacant"],
    "takers": ["taker_id", "od_index", "position", "tail", "head", "tau_s", "lambda_t",
               "p_t", "rho", "eta", "e_taker"],
    "eta": ["taker_id", "od_index", "eta"],
    "E": ["od_index", "taker_id", "saving_m"],
}


class TableFormatError(ValueError):
    pass


def _f(x) -> str:
    return repr(float(x))


def save_tables(tables: PredictionTables, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["[meta]"])
    w.writerow(_SECTIONS["meta"])
    w.writerow(["iterations", tables.iterations])
    w.writerow(["residual", _f(tables.residual)])
    w.writerow(["clipped", tables.clipped])
    w.writerow(["[seekers]"])
    w.writerow(_SECTIONS["seekers"])
    for i, (o, d) in enumerate(tables.ods):
        w.writerow([o, d, _f(tables.lam_w[i]), _f(tables.p_s[i]), _f(tables.e_seeker[i]),
                    _f(tables.e_vacant[i])])
    w.writerow(["[takers]"])
    w.writerow(_SECTIONS["takers"])
    for t in tables.takers:
        i = t.id
        w.writerow([i, t.od, t.position, t.link[0], t.link[1], _f(t.tau), _f(tables.lam_t[i]),
                    _f(tables.p_t[i]), _f(tables.rho[i]), _f(tables.eta_t[i]),
                    _f(tables.e_taker[i])])
    w.writerow(["[eta]"])
    w.writerow(_SECTIONS["eta"])
    for (t, od), v in sorted(tables.eta.items()):
        w.writerow([t, od, _f(v)])
    w.writerow(["[E]"])
    w.writerow(_SECTIONS["E"])
    for (od, t), v in sorted(tables.saving.items()):
        w.writerow([od, t, _f(v)])
    Path(path).write_text(buf.getvalue())


def load_tables(path: str | Path) -> PredictionTables:
    sections: dict = {}
    current = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) == 1 and row[0].startswith("[") and row[0].endswith("]"):
                current = row[0][1:-1]
                if current not in _SECTIONS:
                    raise TableFormatError(f"{path}:{lineno}: unknown section {current!r}")
                sections[current] = {"header": None, "rows": []}
                continue
            if current is None:
                raise TableFormatError(f"{path}:{lineno}: data before any section header")
            sec = sections[current]
            if sec["header"] is None:
                if row != _SECTIONS[current]:
                    raise TableFormatError(f"{path}:{lineno}: bad header for [{current}]: {row}")
                sec["header"] = row
                continue
            if len(row) != len(_SECTIONS[current]):
                raise TableFormatError(f"{path}:{lineno}: [{current}] expects "
                                       f"{len(_SECTIONS[current])} fields, got {len(row)}")
            sec["rows"].append((lineno, row))
    for name in _SECTIONS:
        if name not in sections or sections[name]["header"] is None:
            raise TableFormatError(f"{path}: missing section [{name}]")

    def parse(name, fn):
        out = []
        for lineno, row in sections[name]["rows"]:
            try:
                out.append(fn(row))
            except ValueError as exc:
                raise TableFormatError(f"{path}:{lineno}: bad [{name}] row {row}: {exc}") from exc
        return out

    meta = dict(parse("meta", lambda r: (r[0], r[1])))
    seekers = parse("seekers", lambda r: ((_parse_node(r[0]), _parse_node(r[1])),
                                          *map(float, r[2:])))
    takers = parse("takers", lambda r: (int(r[0]), int(r[1]), int(r[2]), _parse_node(r[3]),
                                        _parse_node(r[4]), *map(float, r[5:])))
    eta = parse("eta", lambda r: ((int(r[0]), int(r[1])), float(r[2])))
    saving = parse("E", lambda r: ((int(r[0]), int(r[1])), float(r[2])))

    def col(rows, j):
        return np.array([r[j] for r in rows], dtype=float)

    tables = PredictionTables(
        ods=[r[0] for r in seekers], lam_w=col(seekers, 1), p_s=col(seekers, 2),
        e_seeker=col(seekers, 3), e_vacant=col(seekers, 4),
        takers=[TakerState(r[0], r[1], r[2], (r[3], r[4]), r[5]) for r in takers],
        lam_t=col(takers, 6), p_t=col(takers, 7), rho=col(takers, 8), eta_t=col(takers, 9),
        e_taker=col(takers, 10), eta=dict(eta), saving=dict(saving),
        iterations=int(meta.get("iterations", 0)), residual=float(meta.get("residual", 0.0)),
        clipped=int(meta.get("clipped", 0)),
    )
    return tables
