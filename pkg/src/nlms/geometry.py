"""Geometry of graphs, cones and voxelized sets.

A graph function u: R^n -> R is stored as samples on a uniform grid over the
box [-L, L]^n together with an extension policy that defines u outside the
box (affine far field, positively 1-homogeneous cone, or a growth-only
envelope). Sets in R^(n+1) are either subgraphs of such functions or
voxel indicators with an exterior descriptor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsistencyError,
    DomainError,
    UnsupportedEvaluationError,
    ValidationError,
)

__all__ = [
    "BoxRegion",
    "Annulus",
    "SlopeTrace",
    "CircleTrace",
    "SphereTrace",
    "SplitTrace",
    "AffineExtension",
    "HomogeneousExtension",
    "ZeroHomogeneousExtension",
    "LipschitzEnvelope",
    "GraphFunction",
    "CallableGraph",
    "ConeGraph",
    "rescale",
    "blowup_at",
    "lipschitz_constant",
    "RotationTheta",
    "RotatedCone",
    "rotate_cone",
    "VoxelSet",
    "EmptyExterior",
    "FullExterior",
    "HalfSpaceExterior",
    "SubgraphExterior",
    "ComplementExterior",
    "unit_directions",
    "extension_to_descriptor",
    "extension_from_descriptor",
    "trace_to_descriptor",
    "trace_from_descriptor",
    "exterior_to_descriptor",
    "exterior_from_descriptor",
]


def _pts(x, n: int) -> tuple[np.ndarray, bool]:
    """Normalize point input to (M, n); returns (array, was_single_point)."""
    a = np.asarray(x, dtype=float)
    if n == 1 and a.ndim == 0:
        return a.reshape(1, 1), True
    if a.ndim == 1:
        if a.shape[0] == n:
            return a.reshape(1, n), True
        if n == 1:
            return a.reshape(-1, 1), False
        raise ValidationError(f"expected points in R^{n}, got shape {a.shape}")
    if a.ndim == 2 and a.shape[1] == n:
        return a, False
    raise ValidationError(f"expected points in R^{n}, got shape {a.shape}")


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class BoxRegion:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValidationError("box region needs lo < hi componentwise")
        object.__setattr__(self, "lo", tuple(lo))
        object.__setattr__(self, "hi", tuple(hi))

    @property
    def dim(self):
        return len(self.lo)

    def bounds(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def mask(self, pts):
        lo, hi = self.bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True)
class Annulus:
    """Centered annulus r_inner <= |x| <= r_outer (Euclidean)."""

    r_inner: float
    r_outer: float
    dim: int = 1

    def __post_init__(self):
        if not (0.0 <= self.r_inner < self.r_outer):
            raise ValidationError("annulus needs 0 <= r_inner < r_outer")

    def bounds(self):
        r = self.r_outer
        return -r * np.ones(self.dim), r * np.ones(self.dim)

    def mask(self, pts):
        r = np.sqrt(np.sum(pts * pts, axis=1))
        return (r >= self.r_inner) & (r <= self.r_outer)


# ---------------------------------------------------------------------------
# traces on the unit sphere (values of a 1-homogeneous function)


class SlopeTrace:
    """Trace of a one-dimensional cone u(x) = a x (x>0), b x (x<0)."""

    dim = 1

    def __init__(self, a: float, b: float):
        self.a = float(a)
        self.b = float(b)
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValidationError("slope trace needs finite slopes")

    def sphere_value(self, omega):
        om = np.asarray(omega, dtype=float).reshape(-1)
        return np.where(om > 0, self.a, np.where(om < 0, -self.b, 0.0))

    def values(self):
        return np.array([self.a, -self.b])

    def with_values(self, vals):
        # sphere values (v(+1), v(-1)) back to slopes
        return SlopeTrace(float(vals[0]), -float(vals[1]))

    def directions(self):
        return np.array([[1.0], [-1.0]])

    def lipschitz_bound(self):
        return max(abs(self.a), abs(self.b))

    def max_abs(self):
        return max(abs(self.a), abs(self.b))

    def __repr__(self):
        return f"SlopeTrace(a={self.a}, b={self.b})"


class CircleTrace:
    """Piecewise-linear periodic values at m uniform angles on the circle."""

    dim = 2

    def __init__(self, values):
        v = np.asarray(values, dtype=float).ravel()
        if v.size < 3 or not np.all(np.isfinite(v)):
            raise ValidationError("circle trace needs >= 3 finite samples")
        self._v = v.copy()
        self._v.flags.writeable = False

    def sphere_value(self, omega):
        om = np.asarray(omega, dtype=float).reshape(-1, 2)
        phi = np.mod(np.arctan2(om[:, 1], om[:, 0]), 2.0 * math.pi)
        m = self._v.size
        t = phi * m / (2.0 * math.pi)
        i0 = np.floor(t).astype(np.int64) % m
        frac = t - np.floor(t)
        return (1.0 - frac) * self._v[i0] + frac * self._v[(i0 + 1) % m]

    def values(self):
        return self._v.copy()

    def with_values(self, vals):
        return CircleTrace(vals)

    def directions(self):
        m = self._v.size
        ang = 2.0 * math.pi * np.arange(m) / m
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def lipschitz_bound(self):
        # gradient of r*v(phi) on a linear-in-angle segment is (v, dv/dphi)
        m = self._v.size
        dphi = 2.0 * math.pi / m
        v0 = self._v
        v1 = np.roll(self._v, -1)
        g = (v1 - v0) / dphi
        seg = np.sqrt(np.maximum(v0 * v0, v1 * v1) + g * g)
        return float(np.max(seg))

    def max_abs(self):
        return float(np.max(np.abs(self._v)))

    def __repr__(self):
        return f"CircleTrace(m={self._v.size})"


class SphereTrace:
    """Nearest-simplex interpolation of values at points on S^(dim-1), dim>=3."""

    def __init__(self, points, values):
        from scipy.spatial import ConvexHull

        p = np.asarray(points, dtype=float)
        v = np.asarray(values, dtype=float).ravel()
        if p.ndim != 2 or p.shape[0] != v.size or p.shape[1] < 3:
            raise ValidationError("sphere trace needs (K, dim>=3) points and K values")
        norms = np.sqrt(np.sum(p * p, axis=1))
        if np.any(norms <= 0):
            raise ValidationError("sphere trace points must be nonzero")
        self.dim = p.shape[1]
        self._p = p / norms[:, None]
        self._vals = v.copy()
        hull = ConvexHull(self._p)
        self._simplices = hull.simplices
        # per-simplex inverse of the vertex matrix, for barycentric ray hits
        mats = self._p[self._simplices]  # (S, dim, dim)
        self._inv = np.linalg.inv(np.swapaxes(mats, 1, 2))

    def sphere_value(self, omega):
        om = np.asarray(omega, dtype=float).reshape(-1, self.dim)
        lam = np.einsum("sij,mj->smi", self._inv, om)
        ok = np.all(lam >= -1e-9, axis=2) & (np.sum(lam, axis=2) > 1e-12)
        out = np.empty(om.shape[0])
        for m in range(om.shape[0]):
            hits = np.nonzero(ok[:, m])[0]
            if hits.size == 0:
                raise DomainError("direction not covered by the sphere trace hull")
            sidx = hits[0]
            l = np.clip(lam[sidx, m], 0.0, None)
            out[m] = float(np.dot(l, self._vals[self._simplices[sidx]]) / np.sum(l))
        return out

    def values(self):
        return self._vals.copy()

    def directions(self):
        return self._p.copy()

    def lipschitz_bound(self):
        # conservative: angular slope over hull edges plus the value scale
        vmax = self.max_abs()
        slope = 0.0
        for simplex in self._simplices:
            for i, j in itertools.combinations(simplex, 2):
                ang = math.acos(float(np.clip(np.dot(self._p[i], self._p[j]), -1.0, 1.0)))
                if ang > 1e-12:
                    slope = max(slope, abs(self._vals[i] - self._vals[j]) / ang)
        return 2.0 * math.sqrt(slope * slope + vmax * vmax)

    def max_abs(self):
        return float(np.max(np.abs(self._vals)))

    def __repr__(self):
        return f"SphereTrace(dim={self.dim}, K={self._vals.size})"


class SplitTrace:
    """Trace of v0(x) = vstar(x_1..x_{n-1}) + kappa * x_n with vstar a cone.

    base is a trace in dimension n-1 realizing vstar; sphere values are
    vstar(omega_hat) + kappa * omega_n.
    """

    def __init__(self, base, kappa: float):
        self.base = base
        self.kappa = float(kappa)
        if not math.isfinite(self.kappa):
            raise ValidationError("kappa must be finite")
        self.dim = base.dim + 1

    def sphere_value(self, omega):
        om = np.asarray(omega, dtype=float).reshape(-1, self.dim)
        hat = om[:, :-1]
        rh = np.sqrt(np.sum(hat * hat, axis=1))
        out = np.zeros(om.shape[0])
        pos = rh > 0
        if np.any(pos):
            out[pos] = rh[pos] * self.base.sphere_value(
                hat[pos] / rh[pos, None]
            )
        return out + self.kappa * om[:, -1]

    def vstar(self, y_hat):
        """The 1-homogeneous base cone evaluated at points of R^(dim-1)."""
        yh = np.asarray(y_hat, dtype=float).reshape(-1, self.dim - 1)
        r = np.sqrt(np.sum(yh * yh, axis=1))
        out = np.zeros(yh.shape[0])
        pos = r > 0
        if np.any(pos):
            out[pos] = r[pos] * self.base.sphere_value(yh[pos] / r[pos, None])
        return out

    def directions(self):
        base_dirs = self.base.directions()
        k = base_dirs.shape[0]
        up = np.zeros((k, self.dim))
        up[:, :-1] = base_dirs
        pole = np.zeros((2, self.dim))
        pole[0, -1] = 1.0
        pole[1, -1] = -1.0
        dirs = np.vstack([up, pole])
        return dirs / np.sqrt(np.sum(dirs * dirs, axis=1))[:, None]

    def lipschitz_bound(self):
        base = self.base.lipschitz_bound()
        return math.sqrt(base * base + self.kappa * self.kappa)

    def max_abs(self):
        return self.base.max_abs() + abs(self.kappa)

    def __repr__(self):
        return f"SplitTrace(base={self.base!r}, kappa={self.kappa})"


# ---------------------------------------------------------------------------
# extension policies


class AffineExtension:
    """u(x) = slope . x + offset outside the grid box."""

    kind = "affine"

    def __init__(self, slope, offset: float):
        s = np.atleast_1d(np.asarray(slope, dtype=float))
        if s.ndim != 1 or not np.all(np.isfinite(s)) or not math.isfinite(float(offset)):
            raise ValidationError("affine extension needs finite slope and offset")
        self.slope = s.copy()
        self.slope.flags.writeable = False
        self.offset = float(offset)

    def eval(self, pts):
        return pts @ self.slope + self.offset

    def __repr__(self):
        return f"AffineExtension(slope={self.slope.tolist()}, offset={self.offset})"


class HomogeneousExtension:
    """Positively 1-homogeneous: u(x) = |x| * trace(x/|x|)."""

    kind = "homogeneous"

    def __init__(self, trace):
        self.trace = trace

    def eval(self, pts):
        r = np.sqrt(np.sum(pts * pts, axis=1))
        out = np.zeros(pts.shape[0])
        pos = r > 0
        if np.any(pos):
            out[pos] = r[pos] * self.trace.sphere_value(pts[pos] / r[pos, None])
        return out

    def __repr__(self):
        return f"HomogeneousExtension({self.trace!r})"


class ZeroHomogeneousExtension:
    """Degree-zero homogeneous: u(x) = trace(x/|x|), u(0) = 0."""

    kind = "zero-homogeneous"

    def __init__(self, trace):
        self.trace = trace

    def eval(self, pts):
        r = np.sqrt(np.sum(pts * pts, axis=1))
        out = np.zeros(pts.shape[0])
        pos = r > 0
        if np.any(pos):
            out[pos] = self.trace.sphere_value(pts[pos] / r[pos, None])
        return out

    def __repr__(self):
        return f"ZeroHomogeneousExtension({self.trace!r})"


class LipschitzEnvelope:
    """Growth-only far field: |u(x)| <= bound * |x|, no pointwise values."""

    kind = "lipschitz"

    def __init__(self, bound: float):
        b = float(bound)
        if not (math.isfinite(b) and b >= 0):
            raise ValidationError("lipschitz envelope needs a finite bound >= 0")
        self.bound = b

    def eval(self, pts):
        raise UnsupportedEvaluationError(
            "the lipschitz-envelope policy carries a growth bound only; "
            "pointwise evaluation outside the grid box is undefined"
        )

    def __repr__(self):
        return f"LipschitzEnvelope(bound={self.bound})"


# ---------------------------------------------------------------------------
# graph functions


class GraphBase:
    """Shared evaluation shell: inside the box by the subclass rule,
    outside by the extension policy."""

    n: int
    half_width: float
    extension: object

    def _eval_inside(self, pts):  # pragma: no cover - abstract
        raise NotImplementedError

    def eval(self, x):
        pts, single = _pts(x, self.n)
        if not np.all(np.isfinite(pts)):
            raise DomainError("evaluation points must be finite")
        out = np.empty(pts.shape[0])
        if self.half_width > 0:
            inside = np.all(np.abs(pts) <= self.half_width, axis=1)
        else:
            inside = np.zeros(pts.shape[0], dtype=bool)
        if np.any(inside):
            out[inside] = self._eval_inside(pts[inside])
        if np.any(~inside):
            out[~inside] = self.extension.eval(pts[~inside])
        return float(out[0]) if single else out

    def __call__(self, x):
        return self.eval(x)


class GraphFunction(GraphBase):
    """Grid samples on [-L, L]^n, multilinear interpolation inside,
    extension policy outside.

    The constructor checks that boundary-layer samples agree with the
    extension to within boundary_tol (skipped for growth-only envelopes).
    """

    def __init__(self, samples, half_width: float, extension, boundary_tol: float = 1e-9):
        a = np.asarray(samples, dtype=float)
        if a.ndim < 1 or not np.all(np.isfinite(a)):
            raise ValidationError("samples must be a finite array")
        m = a.shape[0]
        if any(dim != m for dim in a.shape) or m < 2:
            raise ValidationError(
                f"samples must be (m,)*n with m >= 2, got shape {a.shape}"
            )
        L = float(half_width)
        if not (math.isfinite(L) and L > 0):
            raise ValidationError("half_width must be positive and finite")
        self.n = a.ndim
        self.m = m
        self.half_width = L
        self.spacing = 2.0 * L / (m - 1)
        self.extension = extension
        self.boundary_tol = float(boundary_tol)
        self._samples = a.copy()
        self._samples.flags.writeable = False
        self._flat = self._samples.ravel()
        self._strides = np.array(
            [m ** (self.n - 1 - ax) for ax in range(self.n)], dtype=np.int64
        )
        if not isinstance(extension, LipschitzEnvelope):
            bpts = self.boundary_nodes()
            mism = np.max(np.abs(self._node_values(bpts) - extension.eval(bpts)))
            if mism > self.boundary_tol:
                raise ValidationError(
                    f"boundary samples disagree with the extension by {mism:.3e}"
                    f" > boundary_tol {self.boundary_tol:.3e}"
                )

    # -- grid bookkeeping

    @property
    def samples(self):
        return self._samples

    def grid1d(self):
        return -self.half_width + self.spacing * np.arange(self.m)

    def nodes(self):
        axes = [self.grid1d()] * self.n
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def boundary_nodes(self):
        pts = self.nodes()
        idx = np.stack(
            np.unravel_index(np.arange(pts.shape[0]), self._samples.shape), axis=1
        )
        on_bnd = np.any((idx == 0) | (idx == self.m - 1), axis=1)
        return pts[on_bnd]

    def _node_values(self, pts):
        # exact sample lookup for points that are grid nodes
        idx = np.rint((pts + self.half_width) / self.spacing).astype(np.int64)
        return self._flat[idx @ self._strides]

    def _eval_inside(self, pts):
        t = (pts + self.half_width) / self.spacing
        i0 = np.clip(np.floor(t).astype(np.int64), 0, self.m - 2)
        frac = t - i0
        base = i0 @ self._strides
        out = np.zeros(pts.shape[0])
        for corner in itertools.product((0, 1), repeat=self.n):
            w = np.ones(pts.shape[0])
            off = 0
            for ax, c in enumerate(corner):
                w = w * (frac[:, ax] if c else (1.0 - frac[:, ax]))
                off += int(c) * int(self._strides[ax])
            out += w * self._flat[base + off]
        return out

    def with_samples(self, new_samples):
        return GraphFunction(
            new_samples, self.half_width, self.extension, self.boundary_tol
        )

    # -- factories

    @staticmethod
    def affine(slope, offset, n: int, half_width: float, num_points: int):
        ext = AffineExtension(np.broadcast_to(np.atleast_1d(slope), (n,)), offset)
        g = GraphFunction.__new__(GraphFunction)
        coords = np.linspace(-half_width, half_width, num_points)
        mesh = np.meshgrid(*([coords] * n), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = ext.eval(pts).reshape((num_points,) * n)
        GraphFunction.__init__(g, vals, half_width, ext, boundary_tol=1e-11)
        return g

    @staticmethod
    def from_callable(fn, n: int, half_width: float, num_points: int, extension,
                      boundary_tol: float = 1e-9):
        coords = np.linspace(-half_width, half_width, num_points)
        mesh = np.meshgrid(*([coords] * n), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.asarray(fn(pts), dtype=float).reshape((num_points,) * n)
        return GraphFunction(vals, half_width, extension, boundary_tol)

    @staticmethod
    def from_trace(trace, half_width: float, num_points: int,
                   boundary_tol: float = 1e-9):
        """Grid realization of the cone |x| * trace(x/|x|) with matching
        homogeneous extension."""
        ext = HomogeneousExtension(trace)
        n = trace.dim
        coords = np.linspace(-half_width, half_width, num_points)
        mesh = np.meshgrid(*([coords] * n), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = ext.eval(pts).reshape((num_points,) * n)
        return GraphFunction(vals, half_width, ext, boundary_tol)


class CallableGraph(GraphBase):
    """Analytic graph: a vectorized callable inside the box, extension outside.

    Used for fixtures where grid interpolation error would mask the effect
    under study. The callable must agree with the extension on the box
    boundary to within boundary_tol (probed, not proven).
    """

    def __init__(self, fn, n: int, half_width: float, extension,
                 boundary_tol: float = 1e-9):
        self.fn = fn
        self.n = int(n)
        self.half_width = float(half_width)
        self.extension = extension
        self.boundary_tol = float(boundary_tol)
        self.spacing = None
        if not isinstance(extension, LipschitzEnvelope):
            probes = self._boundary_probes()
            mism = np.max(np.abs(np.asarray(fn(probes), dtype=float)
                                 - extension.eval(probes)))
            if mism > self.boundary_tol:
                raise ValidationError(
                    f"callable disagrees with the extension on the box "
                    f"boundary by {mism:.3e} > {self.boundary_tol:.3e}"
                )

    def _boundary_probes(self):
        L, n = self.half_width, self.n
        side = np.linspace(-L, L, 9)
        probes = []
        for ax in range(n):
            for sgn in (-L, L):
                mesh = np.meshgrid(*([side] * (n - 1)), indexing="ij") if n > 1 else []
                if n == 1:
                    probes.append(np.array([[sgn]]))
                else:
                    rest = np.stack([m.ravel() for m in mesh], axis=1)
                    block = np.insert(rest, ax, sgn, axis=1)
                    probes.append(block)
        return np.vstack(probes)

    def _eval_inside(self, pts):
        return np.asarray(self.fn(pts), dtype=float).reshape(pts.shape[0])


class ConeGraph(GraphBase):
    """Exact positively-1-homogeneous graph |x| * trace(x/|x|), no grid."""

    def __init__(self, trace):
        self.trace = trace
        self.n = trace.dim
        self.half_width = 0.0
        self.extension = HomogeneousExtension(trace)
        self.spacing = None

    def _eval_inside(self, pts):  # pragma: no cover - box is degenerate
        return self.extension.eval(pts)


# ---------------------------------------------------------------------------
# transformations


def rescale(u, r: float, num_points: int | None = None):
    """Parabolic-style rescaling u_r(y) = u(r y) / r.

    Grid graphs are re-sampled (box shrinks to L/r, spacing kept near the
    original); analytic and cone graphs transform exactly.
    """
    rf = float(r)
    if not (math.isfinite(rf) and rf > 0):
        raise ValidationError("rescale factor must be positive and finite")
    if isinstance(u, ConeGraph):
        return ConeGraph(u.trace)  # exact fixed point
    ext = _rescale_extension(u.extension, rf)
    if isinstance(u, CallableGraph):
        fn = u.eval  # evaluates interior and extension consistently
        return CallableGraph(
            lambda y, _fn=fn, _r=rf: np.asarray(_fn(np.asarray(y) * _r)) / _r,
            u.n,
            u.half_width / rf,
            ext,
            boundary_tol=max(u.boundary_tol, u.boundary_tol / rf),
        )
    new_half = u.half_width / rf
    if num_points is None:
        num_points = max(3, int(round(2.0 * new_half / u.spacing)) + 1)
    coords = np.linspace(-new_half, new_half, num_points)
    mesh = np.meshgrid(*([coords] * u.n), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = (u.eval(rf * pts) / rf).reshape((num_points,) * u.n)
    # regridding can leave interpolation-level mismatch at the boundary;
    # the declared tolerance records it honestly
    try:
        return GraphFunction(vals, new_half, ext, boundary_tol=u.boundary_tol)
    except ValidationError:
        gap = _measured_boundary_gap(vals, new_half, ext)
        return GraphFunction(vals, new_half, ext,
                             boundary_tol=2.0 * gap + u.boundary_tol)


def _measured_boundary_gap(vals, half, ext):
    g = GraphFunction(vals, half, LipschitzEnvelope(0.0))
    bpts = g.boundary_nodes()
    return float(np.max(np.abs(g._node_values(bpts) - ext.eval(bpts))))


def _rescale_extension(ext, r):
    if isinstance(ext, AffineExtension):
        return AffineExtension(ext.slope, ext.offset / r)
    if isinstance(ext, (HomogeneousExtension, ZeroHomogeneousExtension,
                        LipschitzEnvelope)):
        return ext
    raise ValidationError(f"cannot rescale extension {ext!r}")


def blowup_at(u, point, r: float, half_width: float | None = None,
              num_points: int | None = None):
    """Blow-up w(x) = (u(p + r x) - u(p)) / r on a window box.

    Affine far fields rebase analytically; other policies fall back to a
    growth-only envelope measured from the window samples.
    """
    rf = float(r)
    if not (math.isfinite(rf) and rf > 0):
        raise ValidationError("blow-up scale must be positive and finite")
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != (u.n,) or not np.all(np.isfinite(p)):
        raise ValidationError(f"base point must be a finite point of R^{u.n}")
    W = float(half_width) if half_width is not None else u.half_width
    if isinstance(u.extension, LipschitzEnvelope):
        if np.max(np.abs(p)) + rf * W > u.half_width:
            raise DomainError(
                "blow-up window leaves the evaluable region of a "
                "growth-envelope graph"
            )
    spacing = u.spacing if u.spacing else 2.0 * W / 64
    mm = num_points or max(3, int(round(2.0 * W / spacing)) + 1)
    coords = np.linspace(-W, W, mm)
    mesh = np.meshgrid(*([coords] * u.n), indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    u0 = u.eval(p)
    vals = ((u.eval(p + rf * pts) - u0) / rf).reshape((mm,) * u.n)
    if isinstance(u.extension, AffineExtension):
        sl = u.extension.slope
        off = (float(sl @ p) + u.extension.offset - u0) / rf
        ext = AffineExtension(sl, off)
        try:
            return GraphFunction(vals, W, ext, boundary_tol=u.boundary_tol)
        except ValidationError:
            gap = _measured_boundary_gap(vals, W, ext)
            return GraphFunction(vals, W, ext,
                                 boundary_tol=2.0 * gap + u.boundary_tol)
    bound = _corner_gradient_max(vals, 2.0 * W / (mm - 1))
    return GraphFunction(vals, W, LipschitzEnvelope(bound * (1 + 1e-12)),
                         boundary_tol=u.boundary_tol)


def _corner_gradient_max(vals, h):
    """Exact sup of |grad| of the multilinear interpolant of a sample block."""
    v = np.asarray(vals, dtype=float)
    n = v.ndim
    comp_max = []
    for ax in range(n):
        d = np.abs(np.diff(v, axis=ax)) / h
        comp_max.append(d)
    # per-cell: max slope of each component over the cell's corner lines
    cells = None
    for ax, d in enumerate(comp_max):
        # reduce the other axes to cell resolution by pairwise max
        red = d
        for other in range(n):
            if other == ax:
                continue
            sl_lo = [slice(None)] * n
            sl_hi = [slice(None)] * n
            sl_lo[other] = slice(0, -1)
            sl_hi[other] = slice(1, None)
            red = np.maximum(red[tuple(sl_lo)], red[tuple(sl_hi)])
        sq = red * red
        cells = sq if cells is None else cells + sq
    return float(np.sqrt(np.max(cells))) if cells.size else 0.0


def lipschitz_constant(u, region, resolution: float | None = None) -> float:
    """Sup of |grad| of the interpolated graph over the region, computed
    cell-by-cell from corner difference quotients on a sampling lattice.

    A lower bound of the true Lipschitz constant, converging as the lattice
    refines; exact for affine and piecewise-linear data aligned with it.
    """
    lo, hi = region.bounds()
    if lo.shape[0] != u.n:
        raise ValidationError("region dimension does not match the graph")
    h = resolution or u.spacing or float(np.max(hi - lo)) / 128
    counts = [max(2, int(math.ceil((hi[ax] - lo[ax]) / h)) + 1) for ax in range(u.n)]
    axes = [np.linspace(lo[ax], hi[ax], counts[ax]) for ax in range(u.n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.asarray(u.eval(pts)).reshape([c for c in counts])
    inregion = region.mask(pts).reshape([c for c in counts])
    # cells whose every corner lies in the region
    cellmask = inregion
    for ax in range(u.n):
        sl_lo = [slice(None)] * u.n
        sl_hi = [slice(None)] * u.n
        sl_lo[ax] = slice(0, -1)
        sl_hi[ax] = slice(1, None)
        cellmask = cellmask[tuple(sl_lo)] & cellmask[tuple(sl_hi)]
    if not np.any(cellmask):
        raise DomainError("region contains no full sampling cell")
    best = 0.0
    steps = [axes[ax][1] - axes[ax][0] for ax in range(u.n)]
    comp_cell = []
    for ax in range(u.n):
        d = np.abs(np.diff(vals, axis=ax)) / steps[ax]
        red = d
        for other in range(u.n):
            if other == ax:
                continue
            sl_lo = [slice(None)] * u.n
            sl_hi = [slice(None)] * u.n
            sl_lo[other] = slice(0, -1)
            sl_hi[other] = slice(1, None)
            red = np.maximum(red[tuple(sl_lo)], red[tuple(sl_hi)])
        comp_cell.append(red)
    total = sum(c * c for c in comp_cell)
    best = float(np.sqrt(np.max(total[cellmask])))
    return best


# ---------------------------------------------------------------------------
# rotations of split cones


class RotationTheta:
    """Rotation by theta in the (x_n, x_{n+1}) coordinate plane."""

    def __init__(self, theta: float):
        t = float(theta)
        if not (math.isfinite(t) and abs(t) < 0.5 * math.pi):
            raise ValidationError("theta must satisfy |theta| < pi/2")
        self.theta = t
        self.cos = math.cos(t)
        self.sin = math.sin(t)

    def apply(self, pts):
        """Forward rotation of the last two coordinates."""
        y = np.array(np.atleast_2d(np.asarray(pts, dtype=float)))
        a = y[:, -2].copy()
        b = y[:, -1].copy()
        y[:, -2] = self.cos * a - self.sin * b
        y[:, -1] = self.sin * a + self.cos * b
        return y

    def inverse(self, pts):
        y = np.array(np.atleast_2d(np.asarray(pts, dtype=float)))
        a = y[:, -2].copy()
        b = y[:, -1].copy()
        y[:, -2] = self.cos * a + self.sin * b
        y[:, -1] = -self.sin * a + self.cos * b
        return y


class RotatedCone:
    """Membership oracle for the rotated subgraph of a split cone.

    The input cone is E = {x_{n+1} < vstar(x_hat) + kappa x_n}; after the
    rotation by theta = arctan(kappa) in the (x_n, x_{n+1}) plane the image
    is again a subgraph, of y_{n+1} < cos(theta) * vstar(y_hat), with no
    dependence on y_n. Both the raw rotated margin and the factorized margin
    are exposed so the identity between them can be checked pointwise.
    """

    def __init__(self, trace: SplitTrace, rotation: RotationTheta):
        self.trace = trace
        self.rotation = rotation
        self.kappa = trace.kappa
        self.n = trace.dim
        self.cos_theta = rotation.cos
        self.sin_theta = rotation.sin

    def _as_points(self, y):
        a = np.atleast_2d(np.asarray(y, dtype=float))
        if a.shape[1] != self.n + 1:
            raise ValidationError(
                f"points must lie in R^{self.n + 1}, got shape {a.shape}"
            )
        return a

    def raw_margin(self, y):
        """v0(x(y)) - x_{n+1}(y) with x the pre-rotation coordinates."""
        yy = self._as_points(y)
        c, s = self.cos_theta, self.sin_theta
        x_n = c * yy[:, -2] - s * yy[:, -1]
        x_last = s * yy[:, -2] + c * yy[:, -1]
        vh = self.trace.vstar(yy[:, : self.n - 1]) if self.n > 1 else 0.0
        return vh + self.kappa * x_n - x_last

    def factor_margin(self, y):
        """cos(theta) * vstar(y_hat) - y_{n+1}, the factorized form."""
        yy = self._as_points(y)
        vh = self.trace.vstar(yy[:, : self.n - 1]) if self.n > 1 else 0.0
        return self.cos_theta * vh - yy[:, -1]

    def contains(self, y):
        return self.raw_margin(y) > 0.0


def rotate_cone(v0, theta) -> RotatedCone:
    """Rotate the subgraph of a split cone v0 = vstar + kappa x_n by theta.

    Requires theta = arctan(kappa) to within 1e-10: that is the unique angle
    flattening the linear summand, any other angle is a consistency error.
    """
    ext = getattr(v0, "extension", None)
    if not isinstance(ext, HomogeneousExtension) or not isinstance(
        ext.trace, SplitTrace
    ):
        raise ValidationError(
            "rotate_cone needs a homogeneous graph whose trace has the "
            "split form vstar + kappa * x_n"
        )
    rot = theta if isinstance(theta, RotationTheta) else RotationTheta(theta)
    want = math.atan(ext.trace.kappa)
    if abs(rot.theta - want) > 1e-10:
        raise ConsistencyError(
            f"rotation angle {rot.theta!r} does not match arctan(kappa) = {want!r}"
        )
    return RotatedCone(ext.trace, rot)


# ---------------------------------------------------------------------------
# voxel sets


class EmptyExterior:
    kind = "empty"

    def contains(self, pts):
        return np.zeros(np.atleast_2d(pts).shape[0], dtype=bool)

    def complement(self):
        return FullExterior()

    def scaled(self, r):
        return self

    def __repr__(self):
        return "EmptyExterior()"


class FullExterior:
    kind = "full"

    def contains(self, pts):
        return np.ones(np.atleast_2d(pts).shape[0], dtype=bool)

    def complement(self):
        return EmptyExterior()

    def scaled(self, r):
        return self

    def __repr__(self):
        return "FullExterior()"


class HalfSpaceExterior:
    """E beyond the box is {y . normal < offset}; normal is normalized."""

    kind = "halfspace"

    def __init__(self, normal, offset: float):
        nu = np.atleast_1d(np.asarray(normal, dtype=float))
        nn = float(np.sqrt(np.sum(nu * nu)))
        if not (nn > 0 and np.all(np.isfinite(nu)) and math.isfinite(float(offset))):
            raise ValidationError("halfspace needs a nonzero normal and finite offset")
        self.normal = nu / nn
        self.normal.flags.writeable = False
        self.offset = float(offset) / nn

    def contains(self, pts):
        return np.atleast_2d(pts) @ self.normal < self.offset

    def complement(self):
        return HalfSpaceExterior(-self.normal, -self.offset)

    def scaled(self, r):
        return HalfSpaceExterior(self.normal, self.offset * r)

    def __repr__(self):
        return f"HalfSpaceExterior(normal={self.normal.tolist()}, offset={self.offset})"


class SubgraphExterior:
    """E beyond the box is the subgraph {y_D < graph(y_1..y_{D-1})}."""

    kind = "subgraph"

    def __init__(self, graph):
        self.graph = graph

    def contains(self, pts):
        p = np.atleast_2d(pts)
        return p[:, -1] < self.graph.eval(p[:, :-1])

    def complement(self):
        return ComplementExterior(self)

    def scaled(self, r):
        return SubgraphExterior(rescale(self.graph, 1.0 / r))

    def __repr__(self):
        return f"SubgraphExterior({self.graph!r})"


class ComplementExterior:
    kind = "complement"

    def __init__(self, inner):
        self.inner = inner

    def contains(self, pts):
        return ~self.inner.contains(pts)

    def complement(self):
        return self.inner

    def scaled(self, r):
        return ComplementExterior(self.inner.scaled(r))

    def __repr__(self):
        return f"ComplementExterior({self.inner!r})"


def _far_field_form(ext, sign=1):
    """Reduce an exterior descriptor to one of ('empty',), ('full',),
    ('halfspace', nu, d) for analytic far-field tails."""
    if isinstance(ext, EmptyExterior):
        return ("empty",) if sign > 0 else ("full",)
    if isinstance(ext, FullExterior):
        return ("full",) if sign > 0 else ("empty",)
    if isinstance(ext, HalfSpaceExterior):
        if sign > 0:
            return ("halfspace", ext.normal, ext.offset)
        return ("halfspace", -ext.normal, -ext.offset)
    if isinstance(ext, ComplementExterior):
        return _far_field_form(ext.inner, -sign)
    if isinstance(ext, SubgraphExterior):
        g = ext.graph
        if not isinstance(g.extension, AffineExtension):
            raise DomainError(
                "subgraph exterior admits analytic far-field tails only for "
                "affine far fields"
            )
        p = g.extension.slope
        c = g.extension.offset
        nu = np.concatenate([-p, [1.0]])
        if sign > 0:
            return ("halfspace", nu / np.linalg.norm(nu), c / np.linalg.norm(nu))
        return ("halfspace", -nu / np.linalg.norm(nu), -c / np.linalg.norm(nu))
    raise ValidationError(f"unknown exterior {ext!r}")


class VoxelSet:
    """Indicator of a set of R^D on a uniform voxel grid over a box,
    plus an exterior descriptor for everything beyond the box."""

    def __init__(self, origin, cell: float, indicator, exterior):
        org = np.atleast_1d(np.asarray(origin, dtype=float))
        ind = np.asarray(indicator, dtype=bool)
        if ind.ndim != org.shape[0]:
            raise ValidationError("indicator rank must match origin dimension")
        c = float(cell)
        if not (math.isfinite(c) and c > 0):
            raise ValidationError("cell size must be positive")
        self.origin = org.copy()
        self.origin.flags.writeable = False
        self.cell = c
        self.indicator = ind.copy()
        self.indicator.flags.writeable = False
        self.exterior = exterior
        self.dim = ind.ndim
        self.shape = ind.shape
        self.upper = self.origin + c * np.asarray(ind.shape)

    def far_field(self, complement: bool = False):
        return _far_field_form(self.exterior, -1 if complement else 1)

    def cell_centers(self, mask=None):
        axes = [
            self.origin[ax] + self.cell * (np.arange(self.shape[ax]) + 0.5)
            for ax in range(self.dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        if mask is None:
            return pts
        return pts[np.asarray(mask, dtype=bool).ravel()]

    def true_centers(self):
        return self.cell_centers(self.indicator)

    def false_centers(self):
        return self.cell_centers(~self.indicator)

    def contains(self, pts):
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(p.shape[0], dtype=bool)
        inside = np.all((p >= self.origin) & (p < self.upper), axis=1)
        if np.any(inside):
            idx = np.floor((p[inside] - self.origin) / self.cell).astype(np.int64)
            idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
            flat = np.ravel_multi_index(tuple(idx.T), self.shape)
            out[inside] = self.indicator.ravel()[flat]
        if np.any(~inside):
            out[~inside] = self.exterior.contains(p[~inside])
        return out

    def complement(self):
        return VoxelSet(self.origin, self.cell, ~self.indicator,
                        self.exterior.complement())

    def scaled(self, r: float):
        return VoxelSet(self.origin * r, self.cell * r, self.indicator,
                        self.exterior.scaled(r))

    def boundary_agreement(self) -> float:
        """Fraction of boundary-layer voxels whose indicator agrees with the
        exterior descriptor evaluated at their centers."""
        idx = np.stack(
            np.unravel_index(np.arange(self.indicator.size), self.shape), axis=1
        )
        on_bnd = np.any(
            (idx == 0) | (idx == np.asarray(self.shape) - 1), axis=1
        )
        pts = self.cell_centers()[on_bnd]
        want = self.exterior.contains(pts)
        got = self.indicator.ravel()[on_bnd]
        return float(np.mean(want == got))

    @staticmethod
    def from_function(fn, lo, hi, cell: float, exterior):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        shape = tuple(
            max(1, int(round((hi[ax] - lo[ax]) / cell))) for ax in range(lo.shape[0])
        )
        axes = [lo[ax] + cell * (np.arange(shape[ax]) + 0.5) for ax in range(len(shape))]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        ind = np.asarray(fn(pts), dtype=bool).reshape(shape)
        return VoxelSet(lo, cell, ind, exterior)


def unit_directions(n: int, count: int = 64) -> np.ndarray:
    """Deterministic direction set on S^(n-1)."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = 2.0 * math.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci sphere for n == 3
    if n == 3:
        k = np.arange(count) + 0.5
        phi = math.pi * (1.0 + math.sqrt(5.0)) * k
        z = 1.0 - 2.0 * k / count
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise ValidationError("direction sets support n <= 3")


# ---------------------------------------------------------------------------
# descriptors (serialization helpers)


def trace_to_descriptor(trace) -> dict:
    if isinstance(trace, SlopeTrace):
        return {"kind": "slope", "a": trace.a, "b": trace.b}
    if isinstance(trace, CircleTrace):
        return {"kind": "circle", "values": trace.values().tolist()}
    if isinstance(trace, SphereTrace):
        return {
            "kind": "sphere",
            "points": trace.directions().tolist(),
            "values": trace.values().tolist(),
        }
    if isinstance(trace, SplitTrace):
        return {
            "kind": "split",
            "kappa": trace.kappa,
            "base": trace_to_descriptor(trace.base),
        }
    raise ValidationError(f"unknown trace {trace!r}")


def trace_from_descriptor(d: dict):
    kind = d.get("kind")
    if kind == "slope":
        return SlopeTrace(d["a"], d["b"])
    if kind == "circle":
        return CircleTrace(d["values"])
    if kind == "sphere":
        return SphereTrace(d["points"], d["values"])
    if kind == "split":
        return SplitTrace(trace_from_descriptor(d["base"]), d["kappa"])
    raise ValidationError(f"unknown trace descriptor {d!r}")


def extension_to_descriptor(ext) -> dict:
    if isinstance(ext, AffineExtension):
        return {"kind": "affine", "slope": ext.slope.tolist(), "offset": ext.offset}
    if isinstance(ext, HomogeneousExtension):
        return {"kind": "homogeneous", "trace": trace_to_descriptor(ext.trace)}
    if isinstance(ext, ZeroHomogeneousExtension):
        return {"kind": "zero-homogeneous", "trace": trace_to_descriptor(ext.trace)}
    if isinstance(ext, LipschitzEnvelope):
        return {"kind": "lipschitz", "bound": ext.bound}
    raise ValidationError(f"unknown extension {ext!r}")


def extension_from_descriptor(d: dict):
    kind = d.get("kind")
    if kind == "affine":
        return AffineExtension(d["slope"], d["offset"])
    if kind == "homogeneous":
        return HomogeneousExtension(trace_from_descriptor(d["trace"]))
    if kind == "zero-homogeneous":
        return ZeroHomogeneousExtension(trace_from_descriptor(d["trace"]))
    if kind == "lipschitz":
        return LipschitzEnvelope(d["bound"])
    raise ValidationError(f"unknown extension descriptor {d!r}")


def exterior_to_descriptor(ext) -> dict:
    if isinstance(ext, EmptyExterior):
        return {"kind": "empty"}
    if isinstance(ext, FullExterior):
        return {"kind": "full"}
    if isinstance(ext, HalfSpaceExterior):
        return {"kind": "halfspace", "normal": ext.normal.tolist(),
                "offset": ext.offset}
    if isinstance(ext, SubgraphExterior):
        from . import gridio

        return {"kind": "subgraph", "graph": gridio.graph_to_dict(ext.graph)}
    if isinstance(ext, ComplementExterior):
        return {"kind": "complement", "inner": exterior_to_descriptor(ext.inner)}
    raise ValidationError(f"unknown exterior {ext!r}")


def exterior_from_descriptor(d: dict):
    kind = d.get("kind")
    if kind == "empty":
        return EmptyExterior()
    if kind == "full":
        return FullExterior()
    if kind == "halfspace":
        return HalfSpaceExterior(d["normal"], d["offset"])
    if kind == "subgraph":
        from . import gridio

        return SubgraphExterior(gridio.graph_from_dict(d["graph"]))
    if kind == "complement":
        return ComplementExterior(exterior_from_descriptor(d["inner"]))
    raise ValidationError(f"unknown exterior descriptor {d!r}")
