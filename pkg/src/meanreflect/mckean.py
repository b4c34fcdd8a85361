"""Interacting particle system with shared mean reflection.

Each step runs an Euler predictor for every particle, then reflects the
empirical mean: with m the predicted mean, z = l^T m is projected onto
D_{t_{j+1}} and the same push (l^T)^{-1}(proj(z) - z) is added to every
particle.  The decoupled variant reads coefficients from a frozen law flow,
which is the map iterated by the Picard solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .constraint_map import ConstraintMap, TimeDomainFamily
from .geometry import Box, ConvexDomain, Polytope
from .grid import TimeGrid
from .skorokhod import ReflectionLedger, check_minimality
from .stochastic import (
    INITIAL,
    CoefficientSet,
    EmpiricalMeasure,
    LevyJumpSpec,
    NoiseDriver,
    ordered_mean,
    step_of,
    wasserstein2_detailed,
)

log = logging.getLogger(__name__)

REFERENCE_NAMESPACE = 1


class NumericalError(RuntimeError):
    pass


# -- initial laws ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointInitial:
    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float).reshape(-1))

    @property
    def mean(self):
        return self.value

    def sample(self, rng):
        return self.value.copy()

    def to_config(self):
        return {"name": "point", "value": self.value.tolist()}


@dataclass(frozen=True, eq=False)
class NormalInitial:
    center: np.ndarray
    std: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))

    @property
    def mean(self):
        return self.center

    def sample(self, rng):
        return self.center + self.std * rng.standard_normal(self.center.size)

    def to_config(self):
        return {"name": "normal", "mean": self.center.tolist(), "std": self.std}


@dataclass(frozen=True, eq=False)
class UniformInitial:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low", np.asarray(self.low, dtype=float).reshape(-1))
        object.__setattr__(self, "high", np.asarray(self.high, dtype=float).reshape(-1))

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)

    def sample(self, rng):
        return rng.uniform(self.low, self.high)

    def to_config(self):
        return {"name": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


def initial_from_config(rec: dict):
    name = rec.get("name")
    if name == "point":
        return PointInitial(rec["value"])
    if name == "normal":
        return NormalInitial(rec["mean"], float(rec["std"]))
    if name == "uniform":
        return UniformInitial(rec["low"], rec["high"])
    raise ValueError(f"unknown initial law {name!r}")


# -- system ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SystemSpec:
    coefficients: CoefficientSet
    domain: ConvexDomain
    cmap: ConstraintMap
    grid: TimeGrid
    initial: object
    jumps: LevyJumpSpec | None = None
    control: object = None

    def __post_init__(self):
        d = self.domain.dim
        if self.cmap.dim != d or self.initial.mean.size != d:
            raise ValueError("domain, constraint map and initial law dimensions differ")
        if self.jumps is not None and self.jumps.dim != d:
            raise ValueError("jump marks must live in the state space")
        phi0 = self.cmap.phi(0.0, self.initial.mean)
        if not self.domain.contains(phi0, self.domain.projector_tol):
            raise ValueError("initial law violates the mean constraint phi_0(E X_0) in D")
        self.family  # validates v against the horizon
        if self.coefficients.uses_action and self.control is None:
            pass  # control attached later via with_control
        if self.control is not None and self.control.steps != self.grid.steps:
            raise ValueError("control grid does not match the simulation grid")

    @property
    def dim(self) -> int:
        return self.domain.dim

    @cached_property
    def family(self) -> TimeDomainFamily:
        return TimeDomainFamily(self.domain, self.cmap, self.grid)

    def with_control(self, control) -> SystemSpec:
        return replace(self, control=control)

    def with_grid(self, grid: TimeGrid) -> SystemSpec:
        return replace(self, grid=grid, control=None)


@dataclass(frozen=True, eq=False)
class LawFlow:
    """Per-node empirical measures t_j -> mu_{t_j} (array (M+1, N, d))."""

    samples: np.ndarray
    tag: str = ""

    def measure(self, j: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.samples[j])

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    times: np.ndarray
    particle_ids: np.ndarray
    terminal: np.ndarray
    mean_path: np.ndarray
    phi_mean_path: np.ndarray
    paths: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.terminal.shape[0]

    def measure(self, j: int) -> EmpiricalMeasure:
        if self.paths is None:
            raise ValueError("paths were not stored for this run")
        return EmpiricalMeasure(self.paths[j])

    def law_flow(self, tag="") -> LawFlow:
        if self.paths is None:
            raise ValueError("paths were not stored for this run")
        return LawFlow(self.paths, tag)


def constraint_tolerance(spec: SystemSpec) -> float:
    """Acceptance tolerance for mean-constraint violations.

    Looser when the pulled-back domain is a polytope handled by Dykstra.
    """
    if isinstance(spec.domain, Polytope):
        return 1e-6
    if isinstance(spec.domain, Box) and spec.cmap.similarity is None:
        return 1e-6
    return 1e-8


def constraint_violation(spec: SystemSpec, ensemble: ParticleEnsemble) -> float:
    """max_j distance(D, phi_{t_j}(empirical mean))."""
    return max(spec.domain.distance(p) for p in ensemble.phi_mean_path)


def minimality_violation(spec: SystemSpec, ensemble, ledger, probe_count=32) -> float:
    return check_minimality(ensemble.phi_mean_path, ledger, spec.domain, None, probe_count)


# -- engine ---------------------------------------------------------------------


def _initial_states(spec, driver, ids):
    return np.array([spec.initial.sample(driver.rng(i, INITIAL)) for i in ids]).reshape(
        len(ids), spec.dim
    )


def _jump_schedule(spec, driver, ids):
    """Jumps grouped by step: dict step -> (particle positions, marks)."""
    if spec.jumps is None or spec.jumps.intensity == 0 or spec.coefficients.jump is None:
        return {}
    parts, steps, marks = [], [], []
    for pos, pid in enumerate(ids):
        times, z = driver.jump_stream(spec.jumps, pid)
        parts.append(np.full(times.size, pos))
        steps.append(step_of(spec.grid, times))
        marks.append(z)
    parts, steps, marks = np.concatenate(parts), np.concatenate(steps), np.concatenate(marks)
    order = np.lexsort((parts, steps))
    parts, steps, marks = parts[order], steps[order], marks[order]
    sched = {}
    bounds = np.flatnonzero(np.diff(steps)) + 1
    for chunk in np.split(np.arange(steps.size), bounds):
        if chunk.size:
            sched[int(steps[chunk[0]])] = (parts[chunk], marks[chunk])
    return sched


def _drift(spec, t, x, mu, j):
    coeffs = spec.coefficients
    control = spec.control
    if control is None or not coeffs.uses_action:
        return coeffs.b(t, x, mu)
    weights, actions = control.mixture(j)
    out = np.zeros_like(x)
    for w, a in zip(weights, actions):
        if w != 0:
            out = out + w * coeffs.b(t, x, mu, a)
    return out


def _reflect(spec, j, mean):
    """Shared push dK for the predicted mean at node j (zeros if inside)."""
    cmap = spec.cmap
    z = cmap.adjoint(mean)
    p = spec.family.project(j, z)
    if p is z or np.array_equal(p, z):
        return np.zeros_like(mean)
    return cmap.adjoint_inverse(p - z)


def _run(*args, **kwargs):
    # overflow surfaces as a NumericalError naming the step, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_checked(*args, **kwargs)


def _run_checked(spec: SystemSpec, n: int, seed: int, particle_ids=None,
                 frozen: LawFlow | None = None, frozen_reflection: ReflectionLedger | None = None,
                 store: str = "full", namespace: int = 0):
    if n < 1:
        raise ValueError("need at least one particle")
    ids = np.arange(n) if particle_ids is None else np.asarray(particle_ids)
    if ids.size != n:
        raise ValueError("particle_ids must have one entry per particle")
    grid, coeffs = spec.grid, spec.coefficients
    times, dts = grid.times, grid.dt
    steps, d = grid.steps, spec.dim
    if frozen is not None and len(frozen) != len(grid):
        raise ValueError("frozen law flow does not match the grid")
    driver = NoiseDriver(seed, grid, coeffs.brownian_dim, namespace)

    x = _initial_states(spec, driver, ids)
    noise = np.stack([driver.brownian_increments(i) for i in ids], axis=1)
    jumps = _jump_schedule(spec, driver, ids)
    beta = coeffs.jump
    if jumps or (beta is not None and spec.jumps is not None and spec.jumps.intensity > 0):
        nodes, qweights = spec.jumps.marks.quadrature()
        rate = spec.jumps.intensity
    else:
        beta = None

    inc = np.zeros((steps + 1, d))
    means = np.empty((steps + 1, d))
    paths = np.empty((steps + 1, n, d)) if store == "full" else None

    if frozen_reflection is not None:
        inc[0] = frozen_reflection.increments[0]
    else:
        inc[0] = _reflect(spec, 0, ordered_mean(x))
    x = x + inc[0]
    means[0] = ordered_mean(x)
    if paths is not None:
        paths[0] = x

    for j in range(steps):
        t, dt = times[j], dts[j]
        mu = frozen.measure(j) if frozen is not None else EmpiricalMeasure(x)
        xh = x + _drift(spec, t, x, mu, j) * dt + coeffs.diffusion.apply(t, x, mu, noise[j])
        if beta is not None:
            xh = xh - (rate * dt) * beta.compensator(t, x, mu, nodes, qweights)
            if j in jumps:
                who, marks = jumps[j]
                np.add.at(xh, who, beta(t, x[who], mu, marks))
        if frozen_reflection is not None:
            inc[j + 1] = frozen_reflection.increments[j + 1]
        else:
            inc[j + 1] = _reflect(spec, j + 1, ordered_mean(xh))
        x = xh + inc[j + 1]
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite particle state at step {j + 1}")
        means[j + 1] = ordered_mean(x)
        if paths is not None:
            paths[j + 1] = x

    phi_means = (means @ spec.cmap.l) @ spec.cmap.l.T + spec.cmap.v.on_grid(grid)
    ens = ParticleEnsemble(times, ids, x, means, phi_means, paths)
    return ens, ReflectionLedger(times, inc)


def simulate_particles(spec: SystemSpec, n: int, seed: int, particle_ids=None,
                       store: str = "full", namespace: int = 0):
    """Run the N-particle system; returns (ensemble, shared reflection ledger)."""
    if n < 2:
        raise ValueError("the particle system needs N >= 2")
    return _run(spec, n, seed, particle_ids, store=store, namespace=namespace)


def simulate_decoupled(spec: SystemSpec, flow: LawFlow, n: int, seed: int, particle_ids=None,
                       frozen_reflection: ReflectionLedger | None = None, store: str = "full"):
    """Particles whose coefficients read the frozen law ``flow``.

    The reflection comes from the decoupled particles' own empirical mean, or
    from ``frozen_reflection`` when a reference pushing term is supplied.
    """
    return _run(spec, n, seed, particle_ids, frozen=flow,
                frozen_reflection=frozen_reflection, store=store)


def initial_flow(spec: SystemSpec, n: int, seed: int) -> LawFlow:
    """The law of X_0 held constant in time (a delta flow for deterministic X_0)."""
    driver = NoiseDriver(seed, spec.grid, spec.coefficients.brownian_dim)
    x0 = _initial_states(spec, driver, np.arange(n))
    return LawFlow(np.broadcast_to(x0, (len(spec.grid), *x0.shape)).copy(), "initial")


def flow_distance(a: LawFlow, b: LawFlow) -> tuple[float, bool]:
    """max over nodes of W2 between the two flows, and whether every W2 was exact."""
    worst, exact = 0.0, True
    for j in range(len(a)):
        w, ex = wasserstein2_detailed(a.measure(j), b.measure(j))
        worst = max(worst, w)
        exact = exact and ex
    return worst, exact


class PicardResult(NamedTuple):
    flow: LawFlow
    ledger: ReflectionLedger
    residuals: list
    converged: bool
    exact_w2: bool


def picard_solve(spec: SystemSpec, n: int, max_iter: int, tol: float, seed: int,
                 start: LawFlow | None = None) -> PicardResult:
    """Fixed-point iteration mu <- law of the decoupled system driven by mu.

    Every iterate reuses the same noise, so residuals measure movement of the
    law rather than Monte Carlo error.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    flow = start if start is not None else initial_flow(spec, n, seed)
    residuals, exact = [], True
    ledger = None
    for k in range(max_iter):
        ens, ledger = simulate_decoupled(spec, flow, n, seed)
        new = ens.law_flow(f"picard-{k + 1}")
        res, ex = flow_distance(new, flow)
        residuals.append(res)
        exact = exact and ex
        flow = new
        log.debug("picard iterate %d residual %.3e", k + 1, res)
        if res < tol:
            return PicardResult(flow, ledger, residuals, True, exact)
    return PicardResult(flow, ledger, residuals, False, exact)


# -- studies --------------------------------------------------------------------


class ChaosRow(NamedTuple):
    n: int
    gap: float
    gap_se: float
    k_gap: float
    k_gap_se: float
    w2_terminal: float
    w2_exact: bool


def chaos_study(spec: SystemSpec, n_list, seeds, n_ref: int, audit: int = 16,
                reference_k=None) -> list[ChaosRow]:
    """Couple the N-particle system with decoupled copies of the limit.

    Per seed a reference particle system of size ``n_ref`` (independent
    noise namespace) supplies the limit law and pushing term.  The limit
    copies X^i reuse particle i's noise, read the reference law and apply the
    reference push.  ``reference_k``, if given, maps grid times to a known
    limit pushing term k(t) and replaces the reference ledger.
    """
    n_list = list(n_list)
    if n_ref < 4 * max(n_list):
        raise ValueError("reference size must be at least 4 * max(N list)")
    per = {n: ([], [], []) for n in n_list}
    w2_exact = {n: True for n in n_list}
    for seed in seeds:
        ref_ens, ref_led = simulate_particles(spec, n_ref, seed, namespace=REFERENCE_NAMESPACE)
        if reference_k is not None:
            kpath = np.asarray(reference_k(spec.grid.times), dtype=float).reshape(len(spec.grid), -1)
            ref_led = ReflectionLedger(spec.grid.times, np.diff(kpath, axis=0, prepend=0.0))
        flow = ref_ens.law_flow("reference")
        for n in n_list:
            ens, led = simulate_particles(spec, n, seed)
            dec, _ = simulate_decoupled(spec, flow, n, seed, frozen_reflection=ref_led)
            a = min(audit, n)
            sq = np.sum((ens.paths[:, :a] - dec.paths[:, :a]) ** 2, axis=2)
            per[n][0].append(float(sq.max()))
            per[n][1].append(float(np.linalg.norm(led.k - ref_led.k, axis=1).max()))
            w2, ex = wasserstein2_detailed(ens.terminal, dec.terminal)
            per[n][2].append(w2)
            w2_exact[n] = w2_exact[n] and ex
    rows = []
    for n in n_list:
        g, kg, w = (np.asarray(v) for v in per[n])
        rows.append(ChaosRow(n, g.mean(), _se(g), kg.mean(), _se(kg), w.mean(), w2_exact[n]))
    return rows


def _se(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")


class ModulusTable(NamedTuple):
    lags: np.ndarray
    k_increments: np.ndarray
    x_increments: np.ndarray
    slope: float


def modulus_diagnostic(ledger: ReflectionLedger, ensemble: ParticleEnsemble | None = None,
                       max_particles: int = 64) -> ModulusTable:
    """Sup-increments of k (and mean-square sup-increments of X) over dyadic lags.

    ``slope`` is the least-squares slope through the origin of the k
    increments against the lag.
    """
    k = ledger.k
    times = ledger.times
    steps = k.shape[0] - 1
    dt = float(np.max(np.diff(times)))
    lag_steps = [1]
    while lag_steps[-1] * 2 <= steps:
        lag_steps.append(lag_steps[-1] * 2)
    paths = None
    if ensemble is not None:
        if ensemble.paths is None:
            raise ValueError("modulus diagnostic needs stored paths")
        paths = ensemble.paths[:, :max_particles]
    k_inc, x_inc = [], []
    for L in lag_steps:
        best_k = 0.0
        best_x = np.zeros(paths.shape[1]) if paths is not None else None
        for i in range(1, L + 1):
            best_k = max(best_k, float(np.linalg.norm(k[i:] - k[:-i], axis=1).max()))
            if paths is not None:
                inc = np.sum((paths[i:] - paths[:-i]) ** 2, axis=2).max(axis=0)
                best_x = np.maximum(best_x, inc)
        k_inc.append(best_k)
        x_inc.append(float(best_x.mean()) if best_x is not None else float("nan"))
    lags = np.array(lag_steps) * dt
    k_inc = np.array(k_inc)
    slope = float(lags @ k_inc / (lags @ lags))
    return ModulusTable(lags, k_inc, np.array(x_inc), slope)


def deterministic_k_diagnostic(spec: SystemSpec, n: int, seeds) -> np.ndarray:
    """Per-node standard deviation of K^N across seeds (norm over components)."""
    seeds = list(seeds)
    if len(seeds) < 10:
        raise ValueError("need at least 10 seeds")
    ks = np.stack([simulate_particles(spec, n, s, store="none")[1].k for s in seeds])
    return np.sqrt(np.sum(ks.var(axis=0, ddof=1), axis=1))
