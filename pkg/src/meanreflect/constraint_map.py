"""Affine constraint maps phi_t = l l^T + v_t and the induced moving domains.

The mean constraint phi_t(E X_t) in D is equivalent to l^T E X_t lying in
D_t = Phi_t^{-1}(D) with Phi_t(w) = l w + v_t.  ``TimeDomainFamily`` gives
the projection onto D_t at every grid node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import (
    Ball,
    Box,
    ConvexDomain,
    Ellipsoid,
    GeometryError,
    Halfspace,
    Polytope,
    UnsupportedDomainError,
    hausdorff,
)
from .grid import TimeGrid

SINGULAR_RATIO = 1e-8


class ConstraintMapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OffsetPath:
    """Right-continuous step function v on [0, T] given by breakpoints.

    ``values[k]`` holds on ``[times[k], times[k+1])``; ``times[0]`` must be 0.
    """

    times: np.ndarray
    values: np.ndarray
    kind: str = "samples"
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] != t.size:
            raise ConstraintMapError("offset path needs one value per breakpoint")
        if t.size == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConstraintMapError("offset breakpoints must start at 0 and increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value) -> OffsetPath:
        value = np.asarray(value, dtype=float).reshape(1, -1)
        return cls([0.0], value, "constant", {"value": value[0].tolist()})

    @classmethod
    def linear(cls, intercept, slope, grid: TimeGrid) -> OffsetPath:
        """Continuous v_t = intercept + slope t, sampled onto the grid nodes."""
        intercept = np.asarray(intercept, dtype=float).reshape(-1)
        slope = np.asarray(slope, dtype=float).reshape(-1)
        vals = intercept + np.outer(grid.times, slope)
        spec = {"intercept": intercept.tolist(), "slope": slope.tolist()}
        return cls(grid.times, vals, "linear", spec)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float) + 1e-12, side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def on_grid(self, grid: TimeGrid) -> np.ndarray:
        return self(grid.times)

    def check_horizon(self, horizon: float):
        if self.kind == "samples" and np.any(np.isclose(self.times[1:], horizon)):
            raise ConstraintMapError("a jump of v exactly at the terminal time is not supported")

    def to_config(self) -> dict:
        if self.kind == "samples":
            return {"kind": "samples", "times": self.times.tolist(), "values": self.values.tolist()}
        return {"kind": self.kind, **self.spec}


@dataclass(frozen=True, eq=False)
class ConstraintMap:
    """The pair (l, v) with phi_t(x) = l l^T x + v_t and Phi_t(w) = l w + v_t."""

    l: np.ndarray
    v: OffsetPath

    def __post_init__(self):
        l = np.atleast_2d(np.asarray(self.l, dtype=float))
        if l.shape[0] != l.shape[1]:
            raise ConstraintMapError("l must be a square matrix")
        if l.shape[0] != self.v.dim:
            raise ConstraintMapError("l and v have different dimensions")
        s = np.linalg.svd(l, compute_uv=False)
        if not np.all(np.isfinite(s)) or s[-1] < SINGULAR_RATIO * s[0] or s[0] == 0:
            raise ConstraintMapError(
                f"l is singular or ill-conditioned (singular values {s.min():.3g}..{s.max():.3g})"
            )
        object.__setattr__(self, "l", l)

    @classmethod
    def identity(cls, d: int) -> ConstraintMap:
        return cls(np.eye(d), OffsetPath.constant(np.zeros(d)))

    @property
    def dim(self) -> int:
        return self.l.shape[0]

    @cached_property
    def gamma1(self) -> float:
        return float(np.linalg.svd(self.l, compute_uv=False)[-1])

    @cached_property
    def gamma2(self) -> float:
        return float(np.linalg.svd(self.l, compute_uv=False)[0])

    @cached_property
    def l_inv(self) -> np.ndarray:
        return np.linalg.inv(self.l)

    @cached_property
    def similarity(self) -> float | None:
        """c if l = c Q with Q orthogonal, else None."""
        gram = self.l.T @ self.l
        c2 = gram[0, 0]
        if np.allclose(gram, c2 * np.eye(self.dim), rtol=0, atol=1e-12 * c2):
            return float(np.sqrt(c2))
        return None

    # Points are row vectors; (..., d) arrays are mapped row-wise.

    def phi(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x @ self.l) @ self.l.T + self.v(t)

    def big_phi(self, t, w) -> np.ndarray:
        return np.asarray(w, dtype=float) @ self.l.T + self.v(t)

    def big_phi_inverse(self, t, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.v(t)) @ self.l_inv.T

    def adjoint(self, x) -> np.ndarray:
        """l^T x (row-wise)."""
        return np.asarray(x, dtype=float) @ self.l

    def adjoint_inverse(self, w) -> np.ndarray:
        """(l^T)^{-1} w (row-wise)."""
        return np.asarray(w, dtype=float) @ self.l_inv

    def pulled_back(self, base: ConvexDomain, t) -> ConvexDomain:
        """D_t = Phi_t^{-1}(base) as a domain in w-coordinates."""
        return pull_back(base, self.l, self.v(t))

    def project_transformed(self, t, base: ConvexDomain, z, pulled: ConvexDomain | None = None):
        """Metric projection of z onto D_t = Phi_t^{-1}(base).

        ``pulled`` may supply a precomputed D_t.
        """
        z = np.asarray(z, dtype=float).reshape(-1)
        vt = self.v(t)
        image = self.l @ z + vt
        if base.contains(image):
            return z
        c = self.similarity
        if c is not None and isinstance(base, (Ball, Box, Halfspace)):
            # D_t is a similar copy of base: project in base coordinates and map back.
            return self.l_inv @ (base.project(image) - vt)
        if pulled is None:
            pulled = self.pulled_back(base, t)
        return pulled.project(z)

    def to_config(self) -> dict:
        return {"l": self.l.tolist(), "v": self.v.to_config()}


def pull_back(base: ConvexDomain, l: np.ndarray, v: np.ndarray) -> ConvexDomain:
    """{w : l w + v in base}, expressed as a geometry domain."""
    l_inv = np.linalg.inv(l)
    if isinstance(base, Ball):
        return Ellipsoid(l, base.center - v, base.radius)
    if isinstance(base, Ellipsoid):
        return Ellipsoid(base.matrix @ l, base.center - base.matrix @ v, base.radius)
    if isinstance(base, Halfspace):
        return Halfspace(l.T @ base.normal, base.offset - base.normal @ v)
    if isinstance(base, Box):
        base = base.as_polytope()
    if isinstance(base, Polytope):
        out = Polytope(base.normals @ l, base.offsets - base.normals @ v, l_inv @ (base.slater - v))
        # boundedness and vertices are carried by the affine map; seed the caches
        out.__dict__["bounded"] = base.bounded
        if base.bounded:
            out.__dict__["vertices"] = (base.vertices - v) @ l_inv.T
        return out
    raise GeometryError(f"cannot pull back domain of kind {base.kind}")


@dataclass(frozen=True, eq=False)
class TimeDomainFamily:
    """D_{t_j} = Phi_{t_j}^{-1}(base) for every node of ``grid``."""

    base: ConvexDomain
    cmap: ConstraintMap
    grid: TimeGrid

    def __post_init__(self):
        if self.base.dim != self.cmap.dim:
            raise ConstraintMapError("domain and constraint map dimensions differ")
        self.cmap.v.check_horizon(self.grid.horizon)
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_nodes", {})

    @classmethod
    def static(cls, base: ConvexDomain, grid: TimeGrid) -> TimeDomainFamily:
        return cls(base, ConstraintMap.identity(base.dim), grid)

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def projector_tol(self) -> float:
        return self.base.projector_tol

    def time(self, j: int) -> float:
        return float(self.grid.times[j])

    def domain(self, j: int) -> ConvexDomain:
        dom = self._nodes.get(j)
        if dom is not None:
            return dom
        # v is piecewise constant, so D_t is shared between nodes with equal v_t
        key = self.cmap.v(self.time(j)).tobytes()
        dom = self._cache.get(key)
        if dom is None:
            dom = self._cache[key] = self.cmap.pulled_back(self.base, self.time(j))
        self._nodes[j] = dom
        return dom

    def project(self, j: int, z) -> np.ndarray:
        cmap = self.cmap
        needs_pulled = cmap.similarity is None or not isinstance(self.base, (Ball, Box, Halfspace))
        pulled = self.domain(j) if needs_pulled else None
        return cmap.project_transformed(self.time(j), self.base, z, pulled)

    def witness(self, j: int) -> np.ndarray:
        """Phi_t^{-1} of the base interior point; lies in D_{t_j}."""
        return self.cmap.big_phi_inverse(self.time(j), self.base.interior_point())

    def distance(self, j: int, z) -> float:
        z = np.asarray(z, dtype=float).reshape(-1)
        return float(np.linalg.norm(z - self.project(j, z)))

    def hausdorff_modulus_check(self, s: int, t: int, mesh: int = 720):
        """(d_H(D_s, D_t), |v_t - v_s| / gamma1, mesh error) at node indices s, t."""
        if not self.base.bounded:
            raise UnsupportedDomainError("Hausdorff modulus needs a bounded base domain")
        lhs, err = hausdorff(self.domain(s), self.domain(t), mesh)
        dv = self.cmap.v(self.time(t)) - self.cmap.v(self.time(s))
        return lhs, float(np.linalg.norm(dv)) / self.cmap.gamma1, err


def constraint_map_from_config(rec: dict, grid: TimeGrid) -> ConstraintMap:
    try:
        l = np.asarray(rec["l"], dtype=float)
        vrec = rec.get("v", {"kind": "constant", "value": [0.0] * l.shape[0]})
        kind = vrec["kind"]
        if kind == "constant":
            v = OffsetPath.constant(vrec["value"])
        elif kind == "linear":
            v = OffsetPath.linear(vrec["intercept"], vrec["slope"], grid)
        elif kind == "samples":
            v = OffsetPath(vrec["times"], vrec["values"])
        else:
            raise ConstraintMapError(f"unknown offset kind {kind!r}")
    except KeyError as exc:
        raise ConstraintMapError(f"constraint map record missing field {exc}") from None
    return ConstraintMap(l, v)
