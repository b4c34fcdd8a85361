"""Noise sources, coefficient registry and empirical-measure utilities.

Jumps are finite-activity: a Levy measure of total mass ``intensity`` whose
normalised mark law has compact support away from 0.  Compensators are
evaluated with fixed quadrature nodes of the mark law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import sphere_mesh
from .grid import TimeGrid

EXACT_W2_MAX = 512
SLICED_DIRECTIONS = 64

BROWNIAN, JUMPS, INITIAL = 0, 1, 2


class CoefficientError(ValueError):
    pass


# -- empirical measures -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform-weight measure on the rows of ``points`` (shape (N, d))."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one point")
        object.__setattr__(self, "points", p)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return ordered_mean(self.points)


def ordered_mean(points: np.ndarray) -> np.ndarray:
    """Column means with correctly rounded sums, independent of row order."""
    n = points.shape[0]
    return np.array([math.fsum(col) / n for col in points.T])


def wasserstein2_detailed(a, b) -> tuple[float, bool]:
    """W2 between two empirical measures, and whether the value is exact.

    d = 1: sorted pairing (quantile coupling, exact for any sizes).
    d >= 2, N <= 512: optimal assignment on squared Euclidean cost.
    d >= 2, N > 512: sliced W2 over 64 fixed directions (approximate).
    """
    pa = a.points if isinstance(a, EmpiricalMeasure) else EmpiricalMeasure(a).points
    pb = b.points if isinstance(b, EmpiricalMeasure) else EmpiricalMeasure(b).points
    if pa.shape[1] != pb.shape[1]:
        raise ValueError("measures live in different dimensions")
    if pa.shape[1] == 1:
        return _w2_1d(pa[:, 0], pb[:, 0]), True
    if pa.shape[0] != pb.shape[0]:
        raise ValueError("exact W2 backend needs equal support sizes")
    n = pa.shape[0]
    if n <= EXACT_W2_MAX:
        cost = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
        rows, cols = linear_sum_assignment(cost)
        return math.sqrt(math.fsum(cost[rows, cols]) / n), True
    dirs, _ = sphere_mesh(pa.shape[1], SLICED_DIRECTIONS)
    sq = [_w2_1d(pa @ u, pb @ u) ** 2 for u in dirs]
    return math.sqrt(float(np.mean(sq))), False


def wasserstein2(a, b) -> float:
    return wasserstein2_detailed(a, b)[0]


def _w2_1d(x: np.ndarray, y: np.ndarray) -> float:
    x, y = np.sort(x), np.sort(y)
    if x.size == y.size:
        return math.sqrt(math.fsum((x - y) ** 2) / x.size)
    # quantile coupling on the merged breakpoints of both step CDFs
    cuts = np.union1d(np.arange(1, x.size) / x.size, np.arange(1, y.size) / y.size)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    qx = x[np.minimum((mids * x.size).astype(int), x.size - 1)]
    qy = y[np.minimum((mids * y.size).astype(int), y.size - 1)]
    return math.sqrt(float(np.sum(np.diff(edges) * (qx - qy) ** 2)))


# -- jump measures ------------------------------------------------------------


class MarkLaw:
    """Normalised Levy measure lambda / lambda(R^d \\ {0})."""

    dim: int
    r_min: float
    r_max: float

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class PointMarks(MarkLaw):
    """Uniform law on a finite set of nonzero points."""

    points: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.points, dtype=float))
        r = np.linalg.norm(p, axis=1)
        if np.any(r == 0):
            raise CoefficientError("jump marks must be nonzero")
        object.__setattr__(self, "points", p)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def r_min(self):
        return float(np.linalg.norm(self.points, axis=1).min())

    @property
    def r_max(self):
        return float(np.linalg.norm(self.points, axis=1).max())

    def sample(self, rng, n):
        return self.points[rng.integers(0, len(self.points), size=n)]

    def quadrature(self):
        k = len(self.points)
        return self.points, np.full(k, 1.0 / k)

    def to_config(self):
        return {"kind": "points", "points": self.points.tolist()}


@dataclass(frozen=True, eq=False)
class ShellMarks(MarkLaw):
    """Uniform law on the shell r_min <= |z| <= r_max in R^d."""

    dim: int
    r_min: float
    r_max: float
    angular_nodes: int = 16
    radial_nodes: int = 4

    def __post_init__(self):
        if not 0 < self.r_min <= self.r_max:
            raise CoefficientError("shell radii must satisfy 0 < r_min <= r_max")

    def sample(self, rng, n):
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        u = rng.random(n)
        lo, hi = self.r_min**self.dim, self.r_max**self.dim
        return g * ((lo + u * (hi - lo)) ** (1.0 / self.dim))[:, None]

    def quadrature(self):
        if self.dim == 1:
            dirs = np.array([[1.0], [-1.0]])
        else:
            half, _ = sphere_mesh(self.dim, self.angular_nodes)
            if self.dim > 2:
                half = np.vstack([half, -half])  # antipodal symmetry
            dirs = half
        if self.r_min == self.r_max:
            radii, rw = np.array([self.r_min]), np.array([1.0])
        else:
            x, w = np.polynomial.legendre.leggauss(self.radial_nodes)
            radii = 0.5 * (self.r_max - self.r_min) * x + 0.5 * (self.r_max + self.r_min)
            rw = w * radii ** (self.dim - 1)
            rw /= rw.sum()
        nodes = (dirs[:, None, :] * radii[None, :, None]).reshape(-1, self.dim)
        weights = np.outer(np.full(len(dirs), 1.0 / len(dirs)), rw).reshape(-1)
        return nodes, weights

    def to_config(self):
        return {"kind": "shell", "dim": self.dim, "r_min": self.r_min, "r_max": self.r_max}


@dataclass(frozen=True, eq=False)
class LevyJumpSpec:
    intensity: float
    marks: MarkLaw

    def __post_init__(self):
        if not self.intensity >= 0 or not math.isfinite(self.intensity):
            raise CoefficientError("jump intensity must be finite and nonnegative")

    @property
    def dim(self):
        return self.marks.dim

    def to_config(self):
        return {"intensity": self.intensity, "marks": self.marks.to_config()}


# -- noise --------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDriver:
    """Reproducible noise substreams keyed by (namespace, particle id, role).

    A particle's Brownian path, jump stream and initial draw depend only on
    (seed, namespace, particle id), never on how many particles are run.
    """

    seed: int
    grid: TimeGrid
    brownian_dim: int
    namespace: int = 0

    def rng(self, particle: int, role: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.namespace, int(particle), role))
        return np.random.default_rng(ss)

    def brownian_increments(self, particle: int) -> np.ndarray:
        """Shape (M, m); row j is B_{t_{j+1}} - B_{t_j}."""
        z = self.rng(particle, BROWNIAN).standard_normal((self.grid.steps, self.brownian_dim))
        return z * np.sqrt(self.grid.dt)[:, None]

    def jump_stream(self, spec: LevyJumpSpec | None, particle: int):
        """Arrival times in (0, T] (sorted) and their marks."""
        if spec is None or spec.intensity == 0:
            d = spec.dim if spec is not None else 1
            return np.empty(0), np.empty((0, d))
        rng = self.rng(particle, JUMPS)
        horizon = self.grid.horizon
        count = rng.poisson(spec.intensity * horizon)
        times = np.sort(rng.uniform(0.0, horizon, size=count))
        return times, spec.marks.sample(rng, count)


def brownian_increments(driver: NoiseDriver, particle: int) -> np.ndarray:
    return driver.brownian_increments(particle)


def jump_stream(spec: LevyJumpSpec, driver: NoiseDriver, particle: int):
    return driver.jump_stream(spec, particle)


def step_of(grid: TimeGrid, times: np.ndarray) -> np.ndarray:
    """Index j of the step (t_j, t_{j+1}] containing each jump time."""
    return np.clip(np.searchsorted(grid.times, times, side="left") - 1, 0, grid.steps - 1)


# -- coefficients -------------------------------------------------------------
#
# Drift terms take (t, x, mu, a) with x of shape (N, d) and return (N, d).
# mu is an EmpiricalMeasure, a an action vector or None.


@dataclass(frozen=True)
class ConstantDrift:
    value: np.ndarray
    name = "constant"

    def __call__(self, t, x, mu, a=None):
        return np.broadcast_to(self.value, x.shape)

    lipschitz = 0.0


@dataclass(frozen=True)
class LinearDrift:
    matrix: np.ndarray
    offset: np.ndarray
    name = "linear"

    def __call__(self, t, x, mu, a=None):
        return x @ self.matrix.T + self.offset

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.matrix, 2))


@dataclass(frozen=True)
class MeanAttraction:
    """b = -rate (x - mean(mu))."""

    rate: float
    name = "mean_attraction"

    def __call__(self, t, x, mu, a=None):
        return -self.rate * (x - mu.mean())

    @property
    def lipschitz(self):
        return abs(self.rate)


@dataclass(frozen=True)
class ActionDrift:
    """b = scale * a (action space embedded in R^d)."""

    scale: float = 1.0
    name = "action"
    lipschitz = 0.0

    def __call__(self, t, x, mu, a=None):
        if a is None:
            raise CoefficientError("action drift evaluated without an action")
        return np.broadcast_to(self.scale * np.asarray(a, dtype=float), x.shape)


@dataclass(frozen=True)
class ConstantDiffusion:
    matrix: np.ndarray  # (d, m)
    name = "constant"
    lipschitz = 0.0

    def apply(self, t, x, mu, db):
        return db @ self.matrix.T

    def matrices(self, t, x, mu):
        return np.broadcast_to(self.matrix, (x.shape[0], *self.matrix.shape))


@dataclass(frozen=True)
class LinearDiffusion:
    """sigma(x) = diag(base + slope * x), one Brownian component per coordinate."""

    base: float
    slope: float
    name = "linear"

    def apply(self, t, x, mu, db):
        return (self.base + self.slope * x) * db

    def matrices(self, t, x, mu):
        diag = self.base + self.slope * x
        return diag[:, :, None] * np.eye(x.shape[1])[None]

    @property
    def lipschitz(self):
        return abs(self.slope)


@dataclass(frozen=True)
class LinearJump:
    """beta(t, x, mu, z) = value + mark_scale * z + state_rate * x."""

    value: np.ndarray
    mark_scale: float = 0.0
    state_rate: float = 0.0
    name = "linear"

    def __call__(self, t, x, mu, z):
        return self.value + self.mark_scale * z + self.state_rate * x

    def compensator(self, t, x, mu, nodes, weights):
        """sum_q w_q beta(t, x, mu, z_q), in closed form."""
        zbar = weights @ nodes
        return self.value + self.mark_scale * zbar + self.state_rate * x

    def lipschitz(self, intensity):
        return abs(self.state_rate) * math.sqrt(intensity)

    @property
    def trivial(self):
        return not np.any(self.value) and self.mark_scale == 0 and self.state_rate == 0


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    drift: tuple = ()
    diffusion: object = None
    jump: LinearJump | None = None
    brownian_dim: int = 1
    declared_lipschitz: float | None = None
    spec: dict = field(default_factory=dict)

    def b(self, t, x, mu, a=None):
        out = np.zeros_like(x)
        for term in self.drift:
            out = out + term(t, x, mu, a)
        return out

    @property
    def uses_action(self) -> bool:
        return any(isinstance(term, ActionDrift) for term in self.drift)

    @property
    def uses_measure(self) -> bool:
        return any(isinstance(term, MeanAttraction) for term in self.drift)

    def lipschitz(self, intensity: float = 0.0) -> float:
        if self.declared_lipschitz is not None:
            return self.declared_lipschitz
        g = sum(term.lipschitz for term in self.drift)
        if self.diffusion is not None:
            g += self.diffusion.lipschitz
        if self.jump is not None:
            g += self.jump.lipschitz(intensity)
        return g


def compensated_jump_integral(spec: LevyJumpSpec, coeffs: CoefficientSet, x, mu, t: float,
                              dt: float, marks) -> np.ndarray:
    """sum_{jumps in step} beta(t, x, mu, z) - dt * lambda_0 * sum_q w_q beta(t, x, mu, z_q)

    for one particle state ``x`` (shape (d,)) and the marks falling in the step.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    marks = np.asarray(marks, dtype=float).reshape(-1, x.shape[1])
    beta = coeffs.jump
    if beta is None:
        return np.zeros(x.shape[1])
    total = beta(t, np.repeat(x, len(marks), axis=0), mu, marks).sum(axis=0)
    nodes, weights = spec.marks.quadrature()
    return total - dt * spec.intensity * beta.compensator(t, x, mu, nodes, weights)[0]


def lipschitz_audit(coeffs: CoefficientSet, dim: int, rng: np.random.Generator,
                    pairs: int = 1000, support: int = 8, intensity: float = 0.0,
                    marks: MarkLaw | None = None) -> float:
    """Largest observed ratio of coefficient increments to |x-x'| + W2(mu, mu').

    The increment combines drift, diffusion (Frobenius) and the L2(lambda)
    norm of the jump coefficient, as in the Lipschitz assumptions.
    """
    worst = 0.0
    if marks is not None:
        nodes, weights = marks.quadrature()
    for _ in range(pairs):
        x, xp = rng.normal(size=(2, 1, dim)) * 2.0
        mu = EmpiricalMeasure(rng.normal(size=(support, dim)) * 2.0)
        mup = EmpiricalMeasure(rng.normal(size=(support, dim)) * 2.0)
        dist = np.linalg.norm(x - xp) + wasserstein2(mu, mup)
        inc = np.linalg.norm(coeffs.b(0.0, x, mu) - coeffs.b(0.0, xp, mup))
        if coeffs.diffusion is not None:
            inc += np.linalg.norm(coeffs.diffusion.matrices(0.0, x, mu)
                                  - coeffs.diffusion.matrices(0.0, xp, mup))
        if coeffs.jump is not None and marks is not None and intensity > 0:
            diffs = coeffs.jump(0.0, np.repeat(x, len(nodes), 0), mu, nodes) - coeffs.jump(
                0.0, np.repeat(xp, len(nodes), 0), mup, nodes)
            inc += math.sqrt(intensity * float(weights @ np.sum(diffs**2, axis=1)))
        if dist > 0:
            worst = max(worst, float(inc / dist))
    return worst


# -- registry -----------------------------------------------------------------


def _drift_term(rec: dict, d: int):
    name = rec.get("name")
    if name == "constant":
        return ConstantDrift(np.asarray(rec["value"], dtype=float).reshape(d))
    if name == "linear":
        return LinearDrift(
            np.asarray(rec["matrix"], dtype=float).reshape(d, d),
            np.asarray(rec.get("offset", [0.0] * d), dtype=float).reshape(d),
        )
    if name == "mean_attraction":
        return MeanAttraction(float(rec["rate"]))
    if name == "action":
        return ActionDrift(float(rec.get("scale", 1.0)))
    raise CoefficientError(f"unknown drift {name!r}")


def coefficients_from_config(rec: dict, d: int) -> CoefficientSet:
    try:
        drift = rec.get("drift", [])
        if isinstance(drift, dict):
            drift = [drift]
        terms = tuple(_drift_term(r, d) for r in drift)
        drec = rec.get("diffusion", {"name": "zero"})
        dname = drec.get("name")
        if dname == "zero":
            m = int(drec.get("brownian_dim", d))
            diffusion = ConstantDiffusion(np.zeros((d, m)))
        elif dname == "constant":
            if "matrix" in drec:
                mat = np.atleast_2d(np.asarray(drec["matrix"], dtype=float))
            else:
                mat = float(drec.get("scale", 1.0)) * np.eye(d)
            if mat.shape[0] != d:
                raise CoefficientError("diffusion matrix must have d rows")
            diffusion = ConstantDiffusion(mat)
        elif dname == "linear":
            diffusion = LinearDiffusion(float(drec.get("base", 0.0)), float(drec["slope"]))
        else:
            raise CoefficientError(f"unknown diffusion {dname!r}")
        m = diffusion.matrix.shape[1] if isinstance(diffusion, ConstantDiffusion) else d
        jrec = rec.get("jump", {"name": "zero"})
        jname = jrec.get("name")
        if jname == "zero":
            jump = None
        elif jname == "linear":
            jump = LinearJump(
                np.asarray(jrec.get("value", [0.0] * d), dtype=float).reshape(d),
                float(jrec.get("mark_scale", 0.0)),
                float(jrec.get("state_rate", 0.0)),
            )
        else:
            raise CoefficientError(f"unknown jump coefficient {jname!r}")
    except KeyError as exc:
        raise CoefficientError(f"coefficient record missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CoefficientError):
            raise
        raise CoefficientError(f"malformed coefficient record: {exc}") from None
    declared = rec.get("lipschitz")
    return CoefficientSet(terms, diffusion, jump, m, declared, dict(rec))


def jumps_from_config(rec: dict | None, d: int) -> LevyJumpSpec | None:
    if not rec:
        return None
    try:
        mrec = rec["marks"]
        if mrec["kind"] == "points":
            marks = PointMarks(mrec["points"])
        elif mrec["kind"] == "shell":
            marks = ShellMarks(d, float(mrec["r_min"]), float(mrec["r_max"]))
        else:
            raise CoefficientError(f"unknown mark law {mrec['kind']!r}")
    except KeyError as exc:
        raise CoefficientError(f"jump record missing field {exc}") from None
    if marks.dim != d:
        raise CoefficientError("jump marks have the wrong dimension")
    return LevyJumpSpec(float(rec["intensity"]), marks)
