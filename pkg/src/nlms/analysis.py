"""Verification instruments for cone criticality and structure.

check_max_principle certifies, node by node, the sign structure that
pins down the linearized curvature operator at a sphere maximum of a
0-homogeneous perturbation. dimension_reduction_oracle compares the
(n+1)-dimensional slab integral between two graphs against its
n-dimensional F-form reduction, Monte Carlo against quadrature.
blowdown_diagnostics tracks parabolic rescalings toward their affine
limit, and product_structure_test checks that a rotated-cone membership
predicate is cylindrical (independent of the rotation axis coordinate).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DomainError, ValidationError
from .geometry import BoxRegion, lipschitz_constant, rescale
from .kernel import FractionalParams, KernelAccuracy, get_kernel
from .operators import QuadratureConfig, nmc_linearized

__all__ = [
    "MaxPrincipleCertificate",
    "DimensionReductionRecord",
    "BlowdownRecord",
    "ProductStructureResult",
    "check_max_principle",
    "dimension_reduction_oracle",
    "blowdown_diagnostics",
    "product_structure_test",
]

_EPS = float(np.finfo(np.float64).eps)
# same rounding-residue scale the curvature operator uses to flush exact
# cancellations; certificate thresholds are built from it
_SNAP = 32.0

_HOMOGENEITY_TOL = 1e-10
_HOMOGENEITY_SCALES = (0.5, 2.0)

_MC_PARTITIONS = 64

# F-form radial window: panels start far below any feature scale so the
# analytic inner bound (quadratic pinch) stays under the MC noise floor
_FFORM_INNER = 1e-15
_FFORM_PANELS_PER_DECADE = 6
_FFORM_ANGULAR = 64
# below this slope separation the F difference is evaluated through the
# closed-form derivative, dodging interpolant error cancellation
_FDIFF_TAYLOR = 1e-6


# ---------------------------------------------------------------------------
# maximum-principle certificate


@dataclass(frozen=True)
class MaxPrincipleCertificate:
    """Node-level record of one sign-certificate evaluation.

    integrand_samples holds the signed pair values F'(d+) dv+ + F'(d-) dv-
    at every quadrature node of the linearized operator at the argmax
    direction; the kernel power is a positive factor and cannot change
    their signs. measure_weights are the matching surface-measure weights.
    """

    argmax_direction: tuple
    max_value: float
    integrand_samples: np.ndarray
    measure_weights: np.ndarray
    node_tolerance: float
    fraction_strictly_negative: float
    verdict: str

    def to_dict(self) -> dict:
        return {
            "argmax_direction": list(self.argmax_direction),
            "max_value": self.max_value,
            "integrand_samples": [float(t) for t in self.integrand_samples],
            "measure_weights": [float(t) for t in self.measure_weights],
            "node_tolerance": self.node_tolerance,
            "fraction_strictly_negative": self.fraction_strictly_negative,
            "verdict": self.verdict,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _sphere_directions(n: int, count: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = 2.0 * math.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    raise ValidationError("sphere sampling supports n in {1, 2}")


def _lexicographic_order(points: np.ndarray) -> np.ndarray:
    # np.lexsort keys are minor to major, so feed columns in reverse
    return np.lexsort(tuple(points[:, c] for c in reversed(range(points.shape[1]))))


def _check_homogeneity(g, dirs: np.ndarray, degree: int, name: str) -> np.ndarray:
    base = np.asarray(g.eval(dirs), dtype=float)
    for t in _HOMOGENEITY_SCALES:
        scaled = np.asarray(g.eval(t * dirs), dtype=float)
        expect = base * t**degree
        if float(np.max(np.abs(scaled - expect))) > _HOMOGENEITY_TOL:
            raise ValidationError(
                f"{name} is not positively {degree}-homogeneous on the "
                f"sampled sphere (scale {t})"
            )
    return base


def check_max_principle(u, v, params: FractionalParams,
                        quad: QuadratureConfig | None = None
                        ) -> MaxPrincipleCertificate:
    """Certify the sign of the linearized-operator integrand at the sphere
    maximum of v.

    u must be positively 1-homogeneous and v positively 0-homogeneous
    (sampled gates, tolerance 1e-10). The argmax over the sphere sample
    set breaks ties by the lexicographically smallest direction. Verdicts:
    constant-v when v's sphere range is below tolerance, violation when
    some integrand sample exceeds +node_tolerance, certificate-holds
    otherwise.
    """
    quad = quad or QuadratureConfig()
    if not isinstance(params, FractionalParams):
        raise ValidationError("params must be a FractionalParams instance")
    if u.n != params.n or v.n != params.n:
        raise ValidationError("u, v and params must share the dimension n")

    dirs = _sphere_directions(params.n, quad.n_angular)
    order = _lexicographic_order(dirs)
    dirs = dirs[order]

    _check_homogeneity(u, dirs, 1, "u")
    vvals = _check_homogeneity(v, dirs, 0, "v")

    imax = int(np.argmax(vvals))  # first max in lexicographic order
    xbar = dirs[imax]
    vmax = float(vvals[imax])
    v_range = float(np.max(vvals) - np.min(vvals))

    rep = nmc_linearized(u, v, xbar, params, quad, collect_nodes=True)
    if rep.nodes is None:
        raise ConsistencyError("linearized evaluation collected no nodes")
    samples = rep.nodes.pair_value
    weights = rep.nodes.measure_weight

    node_scale = 2.0 * max(1.0, float(np.max(np.abs(vvals))))
    node_tol = _SNAP * _EPS * node_scale

    total_weight = float(np.sum(weights))
    strictly = samples < -10.0 * node_tol
    fraction = float(np.sum(weights[strictly]) / total_weight) if total_weight else 0.0

    if v_range < _HOMOGENEITY_TOL:
        verdict = "constant-v"
    elif bool(np.any(samples > node_tol)):
        verdict = "violation"
    else:
        verdict = "certificate-holds"

    return MaxPrincipleCertificate(
        argmax_direction=tuple(float(c) for c in xbar),
        max_value=vmax,
        integrand_samples=samples,
        measure_weights=weights,
        node_tolerance=node_tol,
        fraction_strictly_negative=fraction,
        verdict=verdict,
    )


# ---------------------------------------------------------------------------
# dimensional reduction


@dataclass(frozen=True)
class DimensionReductionRecord:
    """Both sides of the slab identity on a common truncation window.

    mc_value estimates the (n+1)-dimensional integral over the slab
    between the graphs inside the cylinder |y - x| <= truncation_radius;
    f_form_value is the n-dimensional F-form over the same window. The
    tails beyond the window cancel in the discrepancy; tail_bound caps
    what enlarging the window could add to either side.
    """

    mc_value: float
    mc_standard_error: float
    f_form_value: float
    f_form_error: float
    tail_bound: float
    discrepancy: float
    mc_samples: int
    mc_partitions: int
    seed: int
    truncation_radius: float
    n: int
    s: float

    def to_dict(self) -> dict:
        return {
            "mc_value": self.mc_value,
            "mc_standard_error": self.mc_standard_error,
            "f_form_value": self.f_form_value,
            "f_form_error": self.f_form_error,
            "tail_bound": self.tail_bound,
            "discrepancy": self.discrepancy,
            "mc_samples": self.mc_samples,
            "mc_partitions": self.mc_partitions,
            "seed": self.seed,
            "truncation_radius": self.truncation_radius,
            "n": self.n,
            "s": self.s,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _eval_graph(g, pts: np.ndarray) -> np.ndarray:
    return np.asarray(g.eval(pts), dtype=float)


def _probe_directions(n: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    ang = 2.0 * math.pi * np.arange(16) / 16.0
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _gap_sup(f, g, x: np.ndarray, dirs: np.ndarray, rho: float) -> float:
    pts = x[None, :] + rho * dirs
    return float(np.max(np.abs(_eval_graph(g, pts) - _eval_graph(f, pts))))


def _mc_partition(f, g, x, x_last, n, s, r_mc, per, seed, idx):
    rng = np.random.default_rng([seed, idx])
    if n == 1:
        omega = (rng.integers(0, 2, size=per) * 2.0 - 1.0)[:, None]
    else:
        ang = rng.uniform(0.0, 2.0 * math.pi, size=per)
        omega = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # radial importance rho ~ rho^(-s) keeps the pinch variance finite
    u01 = 1.0 - rng.random(per)
    rho = r_mc * u01 ** (1.0 / (1.0 - s))
    y = x[None, :] + rho[:, None] * omega
    fv = _eval_graph(f, y)
    gv = _eval_graph(g, y)
    delta = gv - fv
    t = fv + rng.random(per) * delta
    dist2 = rho * rho + (t - x_last) ** 2
    kern = dist2 ** (-0.5 * (n + 1 + s))
    sphere = 2.0 if n == 1 else 2.0 * math.pi
    p_rho = (1.0 - s) * rho ** (-s) / r_mc ** (1.0 - s)
    w = delta * kern * sphere * rho ** (n - 1) / p_rho
    return float(np.mean(w))


def _fform_panels(r_outer: float) -> np.ndarray:
    decades = math.log10(r_outer / _FFORM_INNER)
    count = max(1, int(math.ceil(decades * _FFORM_PANELS_PER_DECADE)))
    return np.geomspace(_FFORM_INNER, r_outer, count + 1)


def _panel_rule(edges: np.ndarray, order: int):
    base, wts = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    rho = (mid[:, None] + rad[:, None] * base[None, :]).ravel()
    w = (rad[:, None] * wts[None, :]).ravel()
    return rho, w


def _fform_side(f, g, x, x_last, params, kern, r_mc):
    """F-form integral over |theta| <= r_mc with a per-node error budget."""
    n, s = params.n, params.s
    if n == 1:
        dirs = np.array([[1.0], [-1.0]])
        w_ang = 1.0
    else:
        ang = 2.0 * math.pi * np.arange(_FFORM_ANGULAR) / _FFORM_ANGULAR
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        w_ang = 2.0 * math.pi / _FFORM_ANGULAR
    edges = _fform_panels(r_mc)
    f2max = kern.second_derivative_max
    cert = kern.certified_error

    value = 0.0
    quad_err = 0.0
    node_err = 0.0
    for omega in dirs:
        vals = []
        for order in (6, 10):
            rho, w = _panel_rule(edges, order)
            y = x[None, :] + rho[:, None] * omega[None, :]
            a = (_eval_graph(g, y) - x_last) / rho
            b = (_eval_graph(f, y) - x_last) / rho
            d = a - b
            small = np.abs(d) < _FDIFF_TAYLOR
            mid = 0.5 * (a + b)
            fdiff = np.where(small, kern.prime(mid) * d, kern(a) - kern(b))
            kernel_pow = rho ** (-1.0 - s)
            vals.append(float(np.sum(w * fdiff * kernel_pow)))
            if order == 10:
                per_node = np.where(small, f2max * d * d / 8.0, 2.0 * cert)
                node_err += w_ang * float(np.sum(w * per_node * kernel_pow))
        value += w_ang * vals[1]
        quad_err += w_ang * abs(vals[1] - vals[0])

    # inner remainder: quadratic pinch coefficient probed near the origin
    pdirs = _probe_directions(n)
    c_quad = max(
        _gap_sup(f, g, x, pdirs, 1e-3) / 1e-6,
        _gap_sup(f, g, x, pdirs, 1e-2) / 1e-4,
    )
    ang_total = 2.0 if n == 1 else 2.0 * math.pi
    inner_err = ang_total * c_quad * _FFORM_INNER ** (1.0 - s) / (1.0 - s)
    return value, quad_err + node_err + inner_err


def dimension_reduction_oracle(f, g, x, params: FractionalParams,
                               mc_samples: int = 1_000_000, seed: int = 0,
                               truncation_radius: float = 30.0,
                               threads: int = 1) -> DimensionReductionRecord:
    """Compare the slab integral between graphs f and g against its
    F-form reduction on the common window |y - x| <= truncation_radius.

    The left side is seeded Monte Carlo over the slab (64 partitions,
    per-partition seeds derived from `seed` and the partition index, so
    the result is identical for any thread count); the right side is
    radial-panel quadrature of the F-form. Requires f(x) = g(x); regions
    where the graphs swap order contribute with their sign.
    """
    if not isinstance(params, FractionalParams):
        raise ValidationError("params must be a FractionalParams instance")
    n, s = params.n, params.s
    if n not in (1, 2):
        raise ValidationError("dimension reduction supports n in {1, 2}")
    if f.n != n or g.n != n:
        raise ValidationError("f, g and params must share the dimension n")
    r_mc = float(truncation_radius)
    if not (math.isfinite(r_mc) and r_mc > 1.0):
        raise ValidationError("truncation_radius must be finite and > 1")
    mc_samples = int(mc_samples)
    if mc_samples < _MC_PARTITIONS:
        raise ValidationError(
            f"mc_samples must be at least {_MC_PARTITIONS}"
        )
    xv = np.asarray(x, dtype=float).ravel()
    if xv.shape[0] != n or not np.all(np.isfinite(xv)):
        raise ValidationError(f"x must be a finite point in R^{n}")

    fx = float(_eval_graph(f, xv[None, :])[0])
    gx = float(_eval_graph(g, xv[None, :])[0])
    if abs(fx - gx) > 1e-12 * max(1.0, abs(fx)):
        raise ValidationError(
            "f(x) and g(x) must agree at the base point (the slab pinches "
            "at X)"
        )
    x_last = fx

    # superlinear slab growth makes both sides non-integrable
    pdirs = _probe_directions(n)
    d_quarter = _gap_sup(f, g, xv, pdirs, r_mc / 4.0)
    d_full = _gap_sup(f, g, xv, pdirs, r_mc)
    if d_full > 4.0 * 1.2 * d_quarter + 1e-12:
        raise DomainError(
            "slab height g - f grows superlinearly; the interaction "
            "integral does not converge"
        )

    per = mc_samples // _MC_PARTITIONS

    def run(idx: int) -> float:
        return _mc_partition(f, g, xv, x_last, n, s, r_mc, per, seed, idx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            means = list(pool.map(run, range(_MC_PARTITIONS)))
    else:
        means = [run(idx) for idx in range(_MC_PARTITIONS)]
    means = np.asarray(means)
    mc_value = float(np.mean(means))
    mc_se = float(np.std(means, ddof=1) / math.sqrt(_MC_PARTITIONS))

    kern = get_kernel(params, KernelAccuracy())
    f_form, f_err = _fform_side(f, g, xv, x_last, params, kern, r_mc)

    # cap on what lies beyond the window, under a probed far-field model:
    # bounded gap, linearly growing gap, and the universal F bound
    probes = [r_mc, 2.0 * r_mc, 4.0 * r_mc, 8.0 * r_mc]
    gaps = [_gap_sup(f, g, xv, pdirs, rr) for rr in probes]
    d_far = max(gaps)
    c_slope = max(gv / rr for gv, rr in zip(gaps, probes))
    ang_total = 2.0 if n == 1 else 2.0 * math.pi
    tail_bound = ang_total * min(
        d_far * r_mc ** (-(1.0 + s)) / (1.0 + s),
        c_slope * r_mc ** (-s) / s,
        2.0 * kern.f_infinity * r_mc ** (-s) / s,
    )

    return DimensionReductionRecord(
        mc_value=mc_value,
        mc_standard_error=mc_se,
        f_form_value=f_form,
        f_form_error=f_err,
        tail_bound=tail_bound,
        discrepancy=mc_value - f_form,
        mc_samples=mc_samples,
        mc_partitions=_MC_PARTITIONS,
        seed=int(seed),
        truncation_radius=r_mc,
        n=n,
        s=s,
    )


# ---------------------------------------------------------------------------
# blow-down diagnostics


@dataclass(frozen=True)
class BlowdownRecord:
    """Rescaling trajectory of a graph on the unit box.

    For each radius r the graph y -> u(r y) / r is sampled on a unit-box
    lattice; sup_distance_to_affine measures the gap to its own best-fit
    affine function, successive_distances the sup gap between consecutive
    rescalings on the lattice.
    """

    radii: tuple
    sup_distance_to_affine: tuple
    affine_slopes: tuple
    affine_offsets: tuple
    lipschitz_monitors: tuple
    successive_distances: tuple
    cauchy: bool
    distances_decreasing: bool
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "radii": list(self.radii),
            "sup_distance_to_affine": list(self.sup_distance_to_affine),
            "affine_slopes": [list(sl) for sl in self.affine_slopes],
            "affine_offsets": list(self.affine_offsets),
            "lipschitz_monitors": list(self.lipschitz_monitors),
            "successive_distances": list(self.successive_distances),
            "cauchy": self.cauchy,
            "distances_decreasing": self.distances_decreasing,
            "tolerance": self.tolerance,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _box_lattice(n: int, half: float, points_per_axis: int) -> np.ndarray:
    coords = np.linspace(-half, half, points_per_axis)
    mesh = np.meshgrid(*([coords] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def blowdown_diagnostics(u, radii, lattice_points: int = 65,
                         tolerance: float = 1e-2) -> BlowdownRecord:
    """Track rescalings u(r y)/r for increasing radii.

    Each rescaling is restricted to the unit box: a sampled graph whose
    rescaled box has shrunk inside it is measured on that smaller box
    (the restriction of the rescaled object), analytic graphs on the
    full unit box. Best-fit affine functions are least-squares fits on
    the restriction lattice; successive rescalings are compared on the
    later (smaller) lattice.
    """
    rs = [float(r) for r in radii]
    if not rs:
        raise ValidationError("radii must be a nonempty sequence")
    if not all(math.isfinite(r) and r > 0 for r in rs):
        raise ValidationError("radii must be finite and positive")
    if any(b <= a for a, b in zip(rs, rs[1:])):
        raise DomainError("radii must be strictly increasing")
    if not (math.isfinite(tolerance) and tolerance > 0):
        raise ValidationError("tolerance must be positive")

    n = u.n
    m = int(lattice_points)

    sup_dist = []
    slopes = []
    offsets = []
    lips = []
    scaled = []
    halves = []
    for r in rs:
        w = rescale(u, r)
        half = float(w.half_width) if getattr(w, "half_width", 0.0) else 1.0
        half = min(1.0, half)
        pts = _box_lattice(n, half, m)
        design = np.hstack([pts, np.ones((pts.shape[0], 1))])
        vals = np.asarray(w.eval(pts), dtype=float)
        coeff, *_ = np.linalg.lstsq(design, vals, rcond=None)
        sup_dist.append(float(np.max(np.abs(vals - design @ coeff))))
        slopes.append(tuple(float(c) for c in coeff[:-1]))
        offsets.append(float(coeff[-1]))
        region = BoxRegion((-half,) * n, (half,) * n)
        lips.append(float(lipschitz_constant(w, region)))
        scaled.append(w)
        halves.append(half)

    successive = []
    for k in range(len(rs) - 1):
        half = min(halves[k], halves[k + 1])
        pts = _box_lattice(n, half, m)
        a = np.asarray(scaled[k].eval(pts), dtype=float)
        b = np.asarray(scaled[k + 1].eval(pts), dtype=float)
        successive.append(float(np.max(np.abs(b - a))))
    cauchy = all(d <= tolerance for d in successive)
    decreasing = all(
        b <= a * (1.0 + 1e-12) + 1e-15
        for a, b in zip(sup_dist, sup_dist[1:])
    )
    return BlowdownRecord(
        radii=tuple(rs),
        sup_distance_to_affine=tuple(sup_dist),
        affine_slopes=tuple(slopes),
        affine_offsets=tuple(offsets),
        lipschitz_monitors=tuple(lips),
        successive_distances=tuple(successive),
        cauchy=cauchy,
        distances_decreasing=decreasing,
        tolerance=float(tolerance),
    )


# ---------------------------------------------------------------------------
# product structure


@dataclass(frozen=True)
class ProductStructureResult:
    """Outcome of a cylindrical-invariance sweep over a probe lattice.

    holds is true when membership never depends on the next-to-last
    coordinate within any group of lattice points sharing the remaining
    coordinates; max_violation, when present, is the disagreeing pair
    with the largest coordinate gap.
    """

    holds: bool
    max_violation: tuple | None
    points_checked: int
    groups_checked: int

    def __bool__(self) -> bool:
        return self.holds

    def to_dict(self) -> dict:
        viol = None
        if self.max_violation is not None:
            a, b = self.max_violation
            viol = [list(a), list(b)]
        return {
            "holds": self.holds,
            "max_violation": viol,
            "points_checked": self.points_checked,
            "groups_checked": self.groups_checked,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def product_structure_test(membership, probe_lattice) -> ProductStructureResult:
    """Check that membership(y_hat, y_n, y_last) does not depend on y_n.

    membership is either an object with a vectorized `contains` or a bare
    callable on point arrays. Points in the probe lattice are grouped by
    every coordinate except the next-to-last; the verdict is true iff
    membership is constant within each group. The reported violation is
    the disagreeing pair with maximal |y_n| separation (first found on
    ties, in lexicographic scan order).
    """
    pts = np.atleast_2d(np.asarray(probe_lattice, dtype=float))
    if pts.ndim != 2 or pts.shape[1] < 2:
        raise ValidationError("probe lattice needs points with >= 2 coordinates")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("probe lattice must be finite")

    if hasattr(membership, "contains"):
        member = membership.contains(pts)
    else:
        member = membership(pts)
    member = np.asarray(member, dtype=bool).ravel()
    if member.shape[0] != pts.shape[0]:
        raise ValidationError("membership must return one value per point")

    axis = pts.shape[1] - 2
    key_cols = [c for c in range(pts.shape[1]) if c != axis]
    order = np.lexsort(
        (pts[:, axis],) + tuple(pts[:, c] for c in reversed(key_cols))
    )
    sp = pts[order]
    sm = member[order]

    keys = sp[:, key_cols]
    new_group = np.ones(sp.shape[0], dtype=bool)
    if sp.shape[0] > 1:
        new_group[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], sp.shape[0])

    best_gap = -1.0
    best_pair = None
    for a, b in zip(starts, ends):
        mg = sm[a:b]
        if mg.all() or not mg.any():
            continue
        yn = sp[a:b, axis]
        t_lo, t_hi = np.flatnonzero(mg)[[0, -1]]
        f_lo, f_hi = np.flatnonzero(~mg)[[0, -1]]
        # widest disagreeing pair inside this group
        if yn[t_hi] - yn[f_lo] >= yn[f_hi] - yn[t_lo]:
            i, j = f_lo, t_hi
        else:
            i, j = t_lo, f_hi
        gap = abs(float(yn[j] - yn[i]))
        if gap > best_gap:
            best_gap = gap
            lo, hi = (i, j) if yn[i] <= yn[j] else (j, i)
            best_pair = (
                tuple(float(c) for c in sp[a + lo]),
                tuple(float(c) for c in sp[a + hi]),
            )

    return ProductStructureResult(
        holds=best_pair is None,
        max_violation=best_pair,
        points_checked=int(pts.shape[0]),
        groups_checked=int(starts.shape[0]),
    )
