"""Strict and relaxed controls, chattering and cost evaluation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mckean import SystemSpec, simulate_particles

WEIGHT_TOL = 1e-12
BRUTE_FORCE_CAP = 4096


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActionSet:
    """Finite action set A, one point of R^q per row."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.shape[0] < 1 or not np.all(np.isfinite(p)):
            raise ValueError("action set must be a nonempty finite array")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class StrictControl:
    """Piecewise-constant control: action ``indices[j]`` on step j."""

    actions: ActionSet
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        if idx.size < 1 or idx.min() < 0 or idx.max() >= len(self.actions):
            raise ValueError("action index out of range")
        object.__setattr__(self, "indices", idx)

    @property
    def steps(self) -> int:
        return self.indices.size

    def mixture(self, j):
        return np.ones(1), self.actions.points[self.indices[j]][None, :]

    def weights(self) -> np.ndarray:
        w = np.zeros((self.steps, len(self.actions)))
        w[np.arange(self.steps), self.indices] = 1.0
        return w


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Piecewise-constant probability weights over A, one row per step."""

    actions: ActionSet
    probs: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.probs, dtype=float))
        if w.shape[1] != len(self.actions):
            raise ValueError("weights must have one column per action")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > WEIGHT_TOL):
            raise ValueError("each row of weights must be a probability vector")
        object.__setattr__(self, "probs", w)

    @classmethod
    def constant(cls, actions: ActionSet, weights, steps: int) -> RelaxedControl:
        return cls(actions, np.tile(np.asarray(weights, dtype=float), (steps, 1)))

    @property
    def steps(self) -> int:
        return self.probs.shape[0]

    def mixture(self, j):
        keep = self.probs[j] > 0
        return self.probs[j][keep], self.actions.points[keep]

    def weights(self) -> np.ndarray:
        return self.probs

    def refine(self, n: int) -> RelaxedControl:
        return RelaxedControl(self.actions, np.repeat(self.probs, n, axis=0))


def slot_counts(weights, n: int) -> np.ndarray:
    """Largest-remainder rounding of n * weights to integers summing to n.

    Ties in the remainder go to the lower action index.
    """
    w = np.asarray(weights, dtype=float)
    raw = n * w
    counts = np.floor(raw + 1e-12).astype(int)
    short = n - counts.sum()
    if short > 0:
        rem = raw - counts
        order = sorted(range(w.size), key=lambda a: (-rem[a], a))
        for a in order[:short]:
            counts[a] += 1
    return counts


def slot_pattern(counts) -> list[int]:
    """Interleave actions over the sub-slots so occupation is spread evenly.

    Each slot goes to the action furthest behind its pro-rata target
    (ties to the lower index), so with weights (1/2, 1/2) and n = 2 the
    pattern is (a_0, a_1).
    """
    counts = np.asarray(counts, dtype=int)
    n = int(counts.sum())
    used = np.zeros_like(counts)
    out = []
    for s in range(n):
        deficit = counts * (s + 1) / n - used
        deficit[used >= counts] = -np.inf
        a = int(np.argmax(deficit))
        used[a] += 1
        out.append(a)
    return out


def chatter(control: RelaxedControl, n: int) -> StrictControl:
    """Strict control on the n-fold refined grid approximating ``control``."""
    if n < 1:
        raise ValueError("chattering factor must be >= 1")
    idx = []
    for row in control.probs:
        idx.extend(slot_pattern(slot_counts(row, n)))
    return StrictControl(control.actions, np.array(idx))


# -- costs ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CostSpec:
    """J = E[ int f dt + int h d|K| + g(X_T) ] with registry-built terms."""

    running: dict
    reflection: dict
    terminal: dict

    def f(self, t, x, mu, a):
        rec = self.running
        name = rec.get("name", "zero")
        if name == "zero":
            return np.zeros(x.shape[0])
        if name == "action_square":
            return np.full(x.shape[0], rec.get("weight", 1.0) * float(np.dot(a, a)))
        if name == "action_target":
            diff = np.asarray(a) - np.asarray(rec["target"], dtype=float)
            return np.full(x.shape[0], rec.get("weight", 1.0) * float(np.dot(diff, diff)))
        if name == "state_square":
            target = np.asarray(rec.get("target", 0.0), dtype=float)
            return rec.get("weight", 1.0) * np.sum((x - target) ** 2, axis=1)
        raise ValueError(f"unknown running cost {name!r}")

    def h(self, t, x, mu):
        rec = self.reflection
        name = rec.get("name", "zero")
        if name == "zero":
            return np.zeros(x.shape[0])
        if name == "constant":
            return np.full(x.shape[0], float(rec.get("value", 1.0)))
        raise ValueError(f"unknown reflection cost {name!r}")

    def g(self, x, mu):
        rec = self.terminal
        name = rec.get("name", "zero")
        if name == "zero":
            return np.zeros(x.shape[0])
        if name == "square":
            target = np.asarray(rec.get("target", 0.0), dtype=float)
            return rec.get("weight", 1.0) * np.sum((x - target) ** 2, axis=1)
        if name == "linear":
            return x @ np.asarray(rec["vector"], dtype=float)
        raise ValueError(f"unknown terminal cost {name!r}")

    def to_config(self):
        return {"running": self.running, "reflection": self.reflection, "terminal": self.terminal}


RUNNING = ("zero", "action_square", "action_target", "state_square")
REFLECTION = ("zero", "constant")
TERMINAL = ("zero", "square", "linear")


def cost_from_config(rec: dict) -> CostSpec:
    terms = []
    for key, names in (("running", RUNNING), ("reflection", REFLECTION), ("terminal", TERMINAL)):
        term = rec.get(key, {"name": "zero"})
        if not isinstance(term, dict) or term.get("name", "zero") not in names:
            raise ValueError(f"{key} cost must be one of {names}")
        terms.append(term)
    return CostSpec(*terms)


class CostEstimate(NamedTuple):
    mean: float
    stderr: float
    per_seed: np.ndarray


def _path_cost(spec: SystemSpec, cost: CostSpec, control, ens, ledger) -> float:
    times, dts = spec.grid.times, spec.grid.dt
    paths = ens.paths
    total = np.zeros(ens.size)
    for j in range(spec.grid.steps):
        mu = ens.measure(j)
        weights, acts = control.mixture(j)
        for w, a in zip(weights, acts):
            total += (w * dts[j]) * cost.f(times[j], paths[j], mu, a)
    dvar = np.abs(ledger.increments).sum(axis=1)
    for j in np.flatnonzero(dvar):
        total += dvar[j] * cost.h(times[j], paths[j], ens.measure(j))
    total += cost.g(paths[-1], ens.measure(len(times) - 1))
    return float(total.mean())


def evaluate_cost(spec: SystemSpec, cost: CostSpec, control, n: int, seeds) -> CostEstimate:
    """Monte Carlo J over the given seeds; stderr is across seeds.

    The reflection cost is charged at the node where each push lands.
    """
    if control.steps != spec.grid.steps:
        raise GridMismatchError("control and simulation grids differ")
    run = spec.with_control(control)
    vals = []
    for seed in seeds:
        ens, led = simulate_particles(run, n, seed)
        vals.append(_path_cost(run, cost, control, ens, led))
    vals = np.array(vals)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return CostEstimate(float(vals.mean()), se, vals)


class ChatterRow(NamedTuple):
    n: int
    strict: float
    relaxed: float
    gap: float
    gap_se: float


def chattering_convergence(spec: SystemSpec, cost: CostSpec, relaxed: RelaxedControl, n_list,
                           particles: int, seeds) -> list[ChatterRow]:
    """|J(u^n) - J(q)| for chattered controls, paired on the n-fold refined grid."""
    if relaxed.steps != spec.grid.steps:
        raise GridMismatchError("relaxed control and simulation grids differ")
    rows = []
    for n in n_list:
        fine = spec.with_grid(spec.grid.refine(n))
        jq = evaluate_cost(fine, cost, relaxed.refine(n), particles, seeds)
        ju = evaluate_cost(fine, cost, chatter(relaxed, n), particles, seeds)
        diff = ju.per_seed - jq.per_seed
        se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else float("nan")
        rows.append(ChatterRow(n, ju.mean, jq.mean, abs(float(diff.mean())), se))
    return rows


def cell_of_step(steps: int, cells: int) -> np.ndarray:
    return (np.arange(steps) * cells) // steps


def brute_force_optimal(spec: SystemSpec, cost: CostSpec, actions: ActionSet, cells: int,
                        particles: int, seeds):
    """Exhaustive search over strict controls constant on ``cells`` time cells.

    Returns (best control, best estimate, table of (cell actions, J)).
    """
    if len(actions) ** cells > BRUTE_FORCE_CAP:
        raise ValueError(f"|A|^cells exceeds the cap of {BRUTE_FORCE_CAP}")
    cell = cell_of_step(spec.grid.steps, cells)
    table, best = [], None
    for combo in itertools.product(range(len(actions)), repeat=cells):
        ctrl = StrictControl(actions, np.asarray(combo)[cell])
        est = evaluate_cost(spec, cost, ctrl, particles, seeds)
        table.append((combo, est.mean))
        if best is None or est.mean < best[1].mean:
            best = (ctrl, est)
    return best[0], best[1], table


def simplex_grid(actions: int, resolution: int) -> np.ndarray:
    """All weight vectors with entries in {0, 1/r, ..., 1} summing to 1."""
    pts = [c for c in itertools.product(range(resolution + 1), repeat=actions)
           if sum(c) == resolution]
    return np.array(pts, dtype=float) / resolution


def relaxed_grid_search(spec: SystemSpec, cost: CostSpec, actions: ActionSet, resolution: int,
                        particles: int, seeds):
    """Best time-constant relaxed control over a simplex grid of weights."""
    table, best = [], None
    for w in simplex_grid(len(actions), resolution):
        ctrl = RelaxedControl.constant(actions, w, spec.grid.steps)
        est = evaluate_cost(spec, cost, ctrl, particles, seeds)
        table.append((tuple(w), est.mean))
        if best is None or est.mean < best[1].mean:
            best = (ctrl, est)
    return best[0], best[1], table
