"""Closed convex domains of R^d.

Every domain exposes membership, metric projection, distance, extreme-point
samples and a serializable config record.  Projections are exact for balls,
boxes and halfspaces, bisection-based for ellipsoids and Dykstra-based for
general polytopes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import optimize
from scipy.stats import norm, qmc

# Membership band used to decide boundary/feasibility after a projection.
EXACT_TOL = 1e-10
DYKSTRA_TOL = 1e-7

DYKSTRA_MAX_ITER = 10_000
DYKSTRA_STEP_TOL = 1e-10
BISECTION_RTOL = 1e-12
SLATER_MARGIN = 1e-9


class GeometryError(ValueError):
    """Invalid domain definition."""


class ProjectionError(RuntimeError):
    """An iterative projection backend failed to converge."""


class UnsupportedDomainError(ValueError):
    """Operation is not defined for this domain variant (e.g. unbounded)."""


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


class ConvexDomain:
    """Base class. Subclasses are immutable dataclasses."""

    kind = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def projector_tol(self) -> float:
        return EXACT_TOL

    @property
    def bounded(self) -> bool:
        return True

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        raise NotImplementedError

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.distance(x) <= tol

    def distance(self, x) -> float:
        x = _vec(x)
        return float(np.linalg.norm(x - self.project(x)))

    def depth(self, x) -> float:
        """Lower bound on the distance from x to the complement (<= 0 outside)."""
        raise NotImplementedError

    def extreme_points(self, mesh: int = 64) -> tuple[np.ndarray, float]:
        """Extreme points (or a boundary mesh of them) plus the mesh covering radius."""
        raise NotImplementedError

    def probe_points(self, count: int = 32) -> np.ndarray:
        """At least ``count`` deterministic points of the domain.

        Extreme points come first, then convex combinations with the interior
        point.  Used for minimality and normal-cone checks.
        """
        ext, _ = self.extreme_points(max(count, 8))
        centre = self.interior_point()
        pts = [centre, *ext]
        k = 1
        while len(pts) < count:
            theta = 1.0 / (k + 1)
            pts.extend(centre + (1 - theta) * (e - centre) for e in ext)
            k += 1
        return np.array(pts)

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Ball(ConvexDomain):
    center: np.ndarray
    radius: float

    kind = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        if not self.radius > 0:
            raise GeometryError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.size

    def interior_point(self):
        return self.center.copy()

    def project(self, x):
        x = _vec(x)
        gap = x - self.center
        r = np.linalg.norm(gap)
        if r <= self.radius:
            return x
        return self.center + gap * (self.radius / r)

    def distance(self, x):
        return max(0.0, float(np.linalg.norm(_vec(x) - self.center)) - self.radius)

    def depth(self, x):
        return self.radius - float(np.linalg.norm(_vec(x) - self.center))

    def extreme_points(self, mesh=64):
        dirs, cover = sphere_mesh(self.dim, mesh)
        return self.center + self.radius * dirs, self.radius * cover

    def to_config(self):
        return {"type": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Ellipsoid(ConvexDomain):
    """{x : |M x - c| <= r} with M invertible (image of a ball under an affine map)."""

    matrix: np.ndarray
    center: np.ndarray
    radius: float

    kind = "ellipsoid"

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "center", _vec(self.center))
        if m.shape != (self.center.size, self.center.size):
            raise GeometryError("ellipsoid matrix must be square and match the center")
        if not self.radius > 0:
            raise GeometryError("ellipsoid radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))
        s = np.linalg.svd(m, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            raise GeometryError("ellipsoid matrix is singular")

    @property
    def dim(self):
        return self.center.size

    @cached_property
    def _svd(self):
        return np.linalg.svd(self.matrix)

    def interior_point(self):
        return np.linalg.solve(self.matrix, self.center)

    def _residual(self, x):
        return float(np.linalg.norm(self.matrix @ x - self.center))

    def project(self, x):
        x = _vec(x)
        if self._residual(x) <= self.radius:
            return x
        u, s, vt = self._svd
        z = vt @ x
        c = u.T @ self.center
        e = s * z - c  # residual coordinates at lambda = 0
        r = self.radius

        s2 = s * s

        def excess(lam):
            q = e / (1.0 + lam * s2)
            return math.sqrt(float(q @ q)) - r

        lo, hi = 0.0, (np.linalg.norm(e) / r - 1.0) / (s[-1] ** 2)
        while excess(hi) > 0:
            hi *= 2.0
        while hi - lo > BISECTION_RTOL * hi:
            mid = 0.5 * (lo + hi)
            if excess(mid) > 0:
                lo = mid
            else:
                hi = mid
        w = (z + hi * s * c) / (1.0 + hi * s2)
        return vt.T @ w

    def depth(self, x):
        return (self.radius - self._residual(_vec(x))) / self._svd[1][0]

    def extreme_points(self, mesh=64):
        dirs, cover = sphere_mesh(self.dim, mesh)
        pts = np.linalg.solve(self.matrix, (self.center + self.radius * dirs).T).T
        inv_norm = 1.0 / self._svd[1][-1]
        return pts, self.radius * inv_norm * cover

    def to_config(self):
        return {
            "type": "ellipsoid",
            "matrix": self.matrix.tolist(),
            "center": self.center.tolist(),
            "radius": self.radius,
        }


@dataclass(frozen=True, eq=False)
class Box(ConvexDomain):
    lower: np.ndarray
    upper: np.ndarray

    kind = "box"

    def __post_init__(self):
        lo, hi = _vec(self.lower), _vec(self.upper)
        if lo.shape != hi.shape:
            raise GeometryError("box corners differ in dimension")
        if not np.all(lo < hi):
            raise GeometryError("box requires lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.size

    def interior_point(self):
        return 0.5 * (self.lower + self.upper)

    def project(self, x):
        x = _vec(x)
        if np.all(x >= self.lower) and np.all(x <= self.upper):
            return x
        return np.clip(x, self.lower, self.upper)

    def depth(self, x):
        x = _vec(x)
        return float(min(np.min(x - self.lower), np.min(self.upper - x)))

    def extreme_points(self, mesh=64):
        corners = itertools.product(*zip(self.lower, self.upper))
        return np.array(list(corners), dtype=float), 0.0

    def as_polytope(self) -> Polytope:
        eye = np.eye(self.dim)
        return Polytope(
            np.vstack([eye, -eye]),
            np.concatenate([self.upper, -self.lower]),
            self.interior_point(),
        )

    def to_config(self):
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Halfspace(ConvexDomain):
    """{x : <a, x> <= b}."""

    normal: np.ndarray
    offset: float

    kind = "halfspace"

    def __post_init__(self):
        a = _vec(self.normal)
        if not np.any(a != 0):
            raise GeometryError("halfspace normal must be nonzero")
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.size

    @property
    def bounded(self):
        return False

    def interior_point(self):
        a = self.normal
        return a * ((self.offset - 1.0) / (a @ a))

    def project(self, x):
        x = _vec(x)
        a = self.normal
        viol = a @ x - self.offset
        if viol <= 0:
            return x
        return x - (viol / (a @ a)) * a

    def distance(self, x):
        return max(0.0, float(self.normal @ _vec(x) - self.offset)) / float(
            np.linalg.norm(self.normal)
        )

    def depth(self, x):
        return float(self.offset - self.normal @ _vec(x)) / float(np.linalg.norm(self.normal))

    def extreme_points(self, mesh=64):
        raise UnsupportedDomainError("a halfspace has no extreme points")

    def probe_points(self, count=32):
        a = self.normal / np.linalg.norm(self.normal)
        foot = a * (self.offset / np.linalg.norm(self.normal))
        basis = _tangent_basis(a)
        pts = [foot]
        scale = 1.0
        while len(pts) < count:
            for t in basis:
                pts += [foot + scale * t, foot - scale * t]
            pts.append(foot - scale * a)
            scale += 1.0
        return np.array(pts[:count])

    def to_config(self):
        return {"type": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class Polytope(ConvexDomain):
    """{x : A x <= b} with a declared strictly interior (Slater) point."""

    normals: np.ndarray
    offsets: np.ndarray
    slater: np.ndarray

    kind = "polytope"

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = _vec(self.offsets)
        s = _vec(self.slater)
        if a.shape[0] != b.size or a.shape[1] != s.size:
            raise GeometryError("polytope normals/offsets/slater point have inconsistent shapes")
        if np.any(np.linalg.norm(a, axis=1) == 0):
            raise GeometryError("polytope normals must be nonzero")
        margin = b - a @ s
        if np.any(margin < SLATER_MARGIN):
            raise GeometryError(
                f"declared interior point violates a constraint (min margin {margin.min():.3g})"
            )
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "slater", s)

    @property
    def dim(self):
        return self.slater.size

    @property
    def projector_tol(self):
        return DYKSTRA_TOL

    @cached_property
    def _sq_norms(self):
        return np.einsum("ij,ij->i", self.normals, self.normals)

    @cached_property
    def bounded(self):
        # The recession cone {A y <= 0} is {0} iff rank A = d and some
        # lambda > 0 has A^T lambda = 0 (Stiemke); scale so lambda >= 1.
        a = self.normals
        if np.linalg.matrix_rank(a) < self.dim:
            return False
        m = a.shape[0]
        res = optimize.linprog(np.zeros(m), A_eq=a.T, b_eq=np.zeros(self.dim),
                               bounds=[(1, None)] * m, method="highs")
        return res.status == 0

    @cached_property
    def vertices(self) -> np.ndarray:
        a, b = self.normals, self.offsets
        d = self.dim
        found = []
        for rows in itertools.combinations(range(len(b)), d):
            sub = a[list(rows)]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            p = np.linalg.solve(sub, b[list(rows)])
            if np.all(a @ p <= b + 1e-9 * (1 + np.abs(b))):
                if not any(np.allclose(p, q, atol=1e-10) for q in found):
                    found.append(p)
        return np.array(found).reshape(-1, d)

    def interior_point(self):
        return self.slater.copy()

    def contains(self, x, tol=0.0):
        x = _vec(x)
        viol = (self.normals @ x - self.offsets) / np.sqrt(self._sq_norms)
        if np.all(viol <= 0):
            return True
        if tol == 0:
            return False
        return self.distance(x) <= tol

    def project(self, x):
        x = _vec(x)
        a, b, nsq = self.normals, self.offsets, self._sq_norms
        viol = a @ x - b
        if np.all(viol <= 0):
            return x
        # A single violated face whose halfspace projection is feasible is the
        # exact answer, since the polytope lies inside that halfspace.
        for i in np.flatnonzero(viol > 0):
            cand = x - (viol[i] / nsq[i]) * a[i]
            if np.all(a @ cand <= b):
                return cand
        p = dykstra(a, b, x)
        return self._polish(x, p)

    def _polish(self, x, p):
        """Snap a Dykstra output onto the exact projection of its active face."""
        a, b = self.normals, self.offsets
        scale = np.sqrt(self._sq_norms)
        active = np.flatnonzero((a @ p - b) / scale > -1e-7)
        if active.size == 0:
            return p
        sub = a[active]
        mult, *_ = np.linalg.lstsq(sub @ sub.T, sub @ x - b[active], rcond=None)
        cand = x - sub.T @ mult
        if np.linalg.norm(cand - p) > 1e-6 or np.any(a @ cand - b > 1e-12 * (1 + np.abs(b))):
            return p
        # KKT: the displacement must be a nonnegative combination of active normals.
        _, resid = optimize.nnls(sub.T, x - cand)
        if resid > 1e-9 * (1 + np.linalg.norm(x - cand)):
            return p
        return cand

    def depth(self, x):
        return float(np.min((self.offsets - self.normals @ _vec(x)) / np.sqrt(self._sq_norms)))

    def extreme_points(self, mesh=64):
        if not self.bounded:
            raise UnsupportedDomainError("unbounded polytope has no finite extreme-point set")
        return self.vertices, 0.0

    def probe_points(self, count=32):
        if self.bounded:
            return super().probe_points(count)
        raise UnsupportedDomainError("probe points need a bounded polytope")

    def to_config(self):
        return {
            "type": "polytope",
            "normals": self.normals.tolist(),
            "offsets": self.offsets.tolist(),
            "slater": self.slater.tolist(),
        }


def dykstra(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Dykstra's alternating projections onto the halfspaces a_i . y <= b_i."""
    nsq = np.einsum("ij,ij->i", a, a)
    m = len(b)
    incr = np.zeros((m, x.size))
    y = x.copy()
    for _ in range(DYKSTRA_MAX_ITER):
        start = y.copy()
        for i in range(m):
            w = y + incr[i]
            viol = a[i] @ w - b[i]
            y = w - (viol / nsq[i]) * a[i] if viol > 0 else w
            incr[i] = w - y
        if np.linalg.norm(y - start) < DYKSTRA_STEP_TOL:
            return y
    raise ProjectionError(f"Dykstra projection did not converge in {DYKSTRA_MAX_ITER} cycles")


def _tangent_basis(a: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the hyperplane orthogonal to unit vector a."""
    q, _ = np.linalg.qr(np.column_stack([a, np.eye(a.size)]))
    return q[:, 1:a.size].T


def sphere_mesh(d: int, n: int) -> tuple[np.ndarray, float]:
    """Deterministic unit-sphere mesh and an estimate of its covering radius.

    d=1 gives the two poles, d=2 an equiangular grid (covering radius exact),
    d>=3 unscrambled Halton points pushed through the Gaussian quantile.
    """
    if d == 1:
        return np.array([[1.0], [-1.0]]), 0.0
    if d == 2:
        ang = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(ang), np.sin(ang)]), 2 * np.sin(np.pi / (2 * n))
    pts = _halton_dirs(d, n)
    check = _halton_dirs(d, 8 * n, skip=n)
    # covering radius estimate from a denser, disjoint check set
    cover = 0.0
    for chunk in np.array_split(check, max(1, len(check) // 512)):
        dist = np.linalg.norm(chunk[:, None, :] - pts[None, :, :], axis=2).min(axis=1)
        cover = max(cover, float(dist.max()))
    return pts, cover


def _halton_dirs(d, n, skip=0):
    raw = qmc.Halton(d, scramble=False).random(n + skip + 1)[skip + 1:]
    g = norm.ppf(np.clip(raw, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# -- module-level operations ---------------------------------------------------


def contains(domain: ConvexDomain, x, tol: float = 0.0) -> bool:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return domain.contains(x, tol)


def project(domain: ConvexDomain, x) -> np.ndarray:
    return domain.project(x)


def distance(domain: ConvexDomain, x) -> float:
    return domain.distance(x)


@dataclass(frozen=True)
class NormalCertificate:
    """Outcome of a finite-probe normal-cone test at boundary point ``point``.

    ``accepted`` iff <point - y, direction> <= tol for every probe y.  On
    rejection ``witness`` is the worst probe and ``violation`` its excess.
    """

    point: np.ndarray
    direction: np.ndarray
    tol: float
    accepted: bool
    witness: np.ndarray | None = None
    violation: float = 0.0

    def __bool__(self):
        return self.accepted


def certify_normal(domain: ConvexDomain, x, eta, tol: float = 1e-9, probe_count: int = 256):
    x, eta = _vec(x), _vec(eta)
    if abs(np.linalg.norm(eta) - 1.0) > 1e-9:
        raise ValueError("normal direction must be a unit vector")
    ptol = domain.projector_tol
    if not domain.contains(x, ptol) or domain.depth(x) > ptol:
        raise ValueError("certify_normal requires a point of the domain's boundary")
    if isinstance(domain, (Box, Polytope)):
        probes, _ = domain.extreme_points()
    else:
        probes = domain.probe_points(probe_count)
    scores = (x - probes) @ eta
    worst = int(np.argmax(scores))
    if scores[worst] <= tol:
        return NormalCertificate(x, eta, tol, True)
    return NormalCertificate(x, eta, tol, False, probes[worst].copy(), float(scores[worst]))


class HausdorffResult(NamedTuple):
    distance: float
    mesh_error: float


def _one_sided(src: ConvexDomain, dst: ConvexDomain, mesh: int):
    pts, cover = src.extreme_points(mesh)
    # distance to a convex set is convex, so its sup over src sits on extreme points
    return max(dst.distance(p) for p in pts), cover


def hausdorff(d1: ConvexDomain, d2: ConvexDomain, mesh: int = 256) -> HausdorffResult:
    """Hausdorff distance of two bounded domains.

    Exact (zero mesh error) when both sides are polytopes/boxes; for curved
    boundaries the sampled value can undershoot by at most ``mesh_error``.
    """
    for dom in (d1, d2):
        if not dom.bounded:
            raise UnsupportedDomainError(f"hausdorff needs bounded domains, got {dom.kind}")
    if isinstance(d1, Ball) and isinstance(d2, Ball):
        gap = float(np.linalg.norm(d1.center - d2.center)) + abs(d1.radius - d2.radius)
        return HausdorffResult(gap, 0.0)
    if (
        isinstance(d1, Ellipsoid) and isinstance(d2, Ellipsoid)
        and d1.radius == d2.radius and np.array_equal(d1.matrix, d2.matrix)
    ):
        # translates of one ellipsoid
        shift = np.linalg.solve(d1.matrix, d1.center - d2.center)
        return HausdorffResult(float(np.linalg.norm(shift)), 0.0)
    h12, e1 = _one_sided(d1, d2, mesh)
    h21, e2 = _one_sided(d2, d1, mesh)
    return HausdorffResult(max(h12, h21), max(e1, e2))


# -- config --------------------------------------------------------------------


def domain_from_config(rec: dict) -> ConvexDomain:
    try:
        kind = rec["type"]
        if kind == "ball":
            return Ball(rec["center"], rec["radius"])
        if kind == "box":
            return Box(rec["lower"], rec["upper"])
        if kind == "halfspace":
            return Halfspace(rec["normal"], rec["offset"])
        if kind == "polytope":
            return Polytope(rec["normals"], rec["offsets"], rec["slater"])
        if kind == "ellipsoid":
            return Ellipsoid(rec["matrix"], rec["center"], rec["radius"])
    except KeyError as exc:
        raise GeometryError(f"domain record missing field {exc}") from None
    except TypeError as exc:
        raise GeometryError(f"malformed domain record: {exc}") from None
    raise GeometryError(f"unknown domain type {rec.get('type')!r}")
