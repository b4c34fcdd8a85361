"""Discrete Skorokhod maps for moving convex domains and for mean reflection.

The input path is treated as a step function jumping at the grid nodes, for
which the recursive projection scheme

    x_j = proj_{D_{t_j}}(x_{j-1} + y_j - y_{j-1}),   k_j = x_j - y_j

is the exact solution of the reflection problem.  The mean-reflection solver
reduces RP_D(phi, Y) to that problem for the path l^T E(Y) and maps the
pushing term back through (l^T)^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .constraint_map import ConstraintMap, TimeDomainFamily
from .geometry import ConvexDomain, Halfspace, hausdorff
from .grid import TimeGrid


class InitialConditionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReflectionLedger:
    """Deterministic pushing term recorded on the grid.

    ``increments[j]`` is the push applied at node j (index 0 holds a possible
    initial corrective shift), so ``k = cumsum(increments)``.
    """

    times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        inc = np.atleast_2d(np.asarray(self.increments, dtype=float))
        if inc.shape[0] != len(self.times):
            inc = inc.T
        object.__setattr__(self, "increments", inc)

    @classmethod
    def zeros(cls, times, d) -> ReflectionLedger:
        return cls(np.asarray(times), np.zeros((len(times), d)))

    @property
    def k(self) -> np.ndarray:
        return np.cumsum(self.increments, axis=0)

    @property
    def variation(self) -> np.ndarray:
        """|k|_{t_j} with the per-component-sum convention."""
        return np.cumsum(np.abs(self.increments).sum(axis=1))

    @property
    def total_variation(self) -> float:
        return float(self.variation[-1])

    @property
    def active(self) -> np.ndarray:
        return np.any(self.increments != 0, axis=1)

    @property
    def directions(self) -> np.ndarray:
        """Unit push directions; NaN rows on inactive steps."""
        norms = np.linalg.norm(self.increments, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.increments / norms
        out[~self.active] = np.nan
        return out


def _as_path(y, d=None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None] if d in (None, 1) else y.reshape(-1, d)
    if not np.all(np.isfinite(y)):
        raise ValueError("path contains non-finite entries")
    return y


def solve_time_dependent(family: TimeDomainFamily, y, project_initial: bool = False):
    """Reflect ``y`` (shape (M+1, d)) into the moving domain ``family``.

    Returns ``(x, ledger)``.  With ``project_initial`` a start outside D_0 is
    moved in by one recorded corrective push instead of raising.
    """
    y = _as_path(y, family.dim)
    if y.shape[0] != len(family.grid):
        raise ValueError("path length does not match the family's grid")
    tol = family.projector_tol
    inc = np.zeros_like(y)
    x = np.empty_like(y)
    x0 = family.project(0, y[0])
    if not np.array_equal(x0, y[0]):
        if not project_initial and np.linalg.norm(x0 - y[0]) > tol:
            raise InitialConditionError("initial point lies outside D_0")
        if project_initial:
            inc[0] = x0 - y[0]
        else:
            x0 = y[0]
    x[0] = x0
    for j in range(1, y.shape[0]):
        pred = x[j - 1] + (y[j] - y[j - 1])
        x[j] = family.project(j, pred)
        inc[j] = x[j] - pred
    return x, ReflectionLedger(family.grid.times, inc)


def solve_mean_reflection(
    cmap: ConstraintMap, domain: ConvexDomain, ybar, grid: TimeGrid, project_initial=False
) -> ReflectionLedger:
    """Pushing term k for the mean path ``ybar`` = E(Y) under phi = l l^T + v."""
    ybar = _as_path(ybar, cmap.dim)
    family = TimeDomainFamily(domain, cmap, grid)
    zbar = cmap.adjoint(ybar)
    _, kbar_ledger = solve_time_dependent(family, zbar, project_initial)
    return ReflectionLedger(grid.times, cmap.adjoint_inverse(kbar_ledger.increments))


def constrained_phi_mean(cmap: ConstraintMap, grid: TimeGrid, ybar, ledger) -> np.ndarray:
    """phi_t(E X_t) = l l^T (ybar_t + k_t) + v_t on the grid."""
    xbar = _as_path(ybar, cmap.dim) + ledger.k
    return (xbar @ cmap.l) @ cmap.l.T + cmap.v.on_grid(grid)


def check_minimality(mean_phi, ledger: ReflectionLedger, domain: ConvexDomain, probes=None,
                     probe_count: int = 32) -> float:
    """max over probes z and nodes t of sum_{t_j <= t} <mean_phi_j - z, dK_j>.

    Nonpositive (up to projection error) for a minimal pushing term.
    """
    mean_phi = _as_path(mean_phi, ledger.increments.shape[1])
    if probes is None:
        probes = domain.probe_points(probe_count)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    inc = ledger.increments
    own = np.cumsum(np.einsum("ij,ij->i", mean_phi, inc))
    cross = np.cumsum(inc, axis=0) @ probes.T
    return float(np.max(own[:, None] - cross))


def variation_bound_report(ledger: ReflectionLedger, ybar) -> tuple[float, float]:
    """(|k|_T, sup_j |ybar_j|^2 + 1); their ratio is bounded by an unknown constant."""
    ybar = _as_path(ybar, ledger.increments.shape[1])
    return ledger.total_variation, float(np.max(np.sum(ybar**2, axis=1))) + 1.0


class StabilityGap(NamedTuple):
    lhs: float
    rhs: float
    index: int
    path_term: float
    domain_term: float
    integral_term: float


def stability_gap(y, ytilde, family: TimeDomainFamily, family_tilde: TimeDomainFamily,
                  mesh: int = 720) -> StabilityGap:
    """Both sides of the two-solution stability estimate.

    lhs = max_j |k_j - k~_j|^2, and with j* the argmax, rhs is the bracket

        |y - y~|^2 + sup_{s<=t} d_H(D_s, D~_s)(|k|_t + |k~|_t)
          + sum_{s<=t} <y_t - y_s + y~_s - y~_t, dk_s - dk~_s>

    at t = t_{j*}; the estimate reads lhs <= 2 rhs.  The sum weighs each
    atom of dk at its own node, which is the Stieltjes integral of the
    step-function input.
    """
    y = _as_path(y, family.dim)
    yt = _as_path(ytilde, family.dim)
    _, led = solve_time_dependent(family, y)
    _, led_t = solve_time_dependent(family_tilde, yt)
    diff = led.k - led_t.k
    gaps = np.sum(diff**2, axis=1)
    j = int(np.argmax(gaps))
    u = y - yt
    path_term = float(np.sum(u[j] ** 2))
    dh = 0.0
    cache = {}
    for s in range(j + 1):
        a, b = family.domain(s), family_tilde.domain(s)
        key = (repr(a.to_config()), repr(b.to_config()))
        if key not in cache:
            cache[key] = hausdorff(a, b, mesh).distance if a.bounded else _unbounded_gap(a, b)
        dh = max(dh, cache[key])
    domain_term = dh * (led.variation[j] + led_t.variation[j])
    ddk = led.increments[: j + 1] - led_t.increments[: j + 1]
    integral_term = float(np.sum((u[j] - u[: j + 1]) * ddk))
    rhs = path_term + domain_term + integral_term
    return StabilityGap(float(gaps[j]), rhs, j, path_term, domain_term, integral_term)


def _unbounded_gap(a, b) -> float:
    """Hausdorff distance of two parallel halfspaces (inf if not parallel)."""
    if isinstance(a, Halfspace) and isinstance(b, Halfspace):
        na, nb = np.linalg.norm(a.normal), np.linalg.norm(b.normal)
        if np.allclose(a.normal / na, b.normal / nb, atol=1e-12):
            return abs(a.offset / na - b.offset / nb)
    return float("inf")
