"""Relaxation solvers for the zero-curvature graph equation.

solve_dirichlet drives the grid samples of a graph toward F[u] = 0 inside
an interior box, holding the exterior samples and the far-field extension
fixed. The update is the damped pointwise rule

    u <- u + damping * scale * h^s * F[u]

applied as a synchronized Jacobi sweep, so one iteration is deterministic
regardless of evaluation order or thread count. The positive sign makes
the sweep a descent on the residual near equilibrium: the linearized
operator has strictly positive pair weights, which gives the iteration a
discrete maximum-principle structure.

solve_cone is the cone-constrained variant. It iterates on the sphere
trace of a positively 1-homogeneous graph and evaluates the residual at
the radius-1 points of the trace. Among cones the flat ones are the
critical points but not constrained minima, so the contraction toward
them is the opposite update direction, v <- v - damping * scale * F.

Stability: the Jacobi diagonal is dominated by quadrature nodes inside
the grid cell around the updated sample and grows like (h/delta)^s / h
for inner cutoff delta. The default quadrature therefore ties the inner
cutoff to half the grid spacing, and the default damping (0.04) is
calibrated on the |x| exterior fixture at grid spacing 0.125; the
stable range shrinks proportionally to h on finer grids.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError, DomainError, ValidationError
from .geometry import (
    AffineExtension,
    BoxRegion,
    ConeGraph,
    GraphFunction,
    lipschitz_constant,
)
from .kernel import FractionalParams
from .operators import QuadratureConfig, nmc_graph_batch

__all__ = [
    "SolveConfig",
    "SolveReport",
    "ToleranceWarning",
    "solve_dirichlet",
    "solve_cone",
]


class ToleranceWarning(UserWarning):
    """residual_tol is tighter than the quadrature error budget."""


@dataclass(frozen=True)
class SolveConfig:
    """Iteration knobs shared by both solvers.

    damping       step fraction in (0, 1]; the default is calibrated on
                  the |x| exterior fixture (cycle onset near 0.055 at
                  grid spacing 0.125) with a safety margin
    max_iters     sweep budget
    residual_tol  sup-norm target for F[u] over the solved nodes
    step_rule     "fixed" keeps the damping constant; "diminishing"
                  scales it by 1/sqrt(k+1) at sweep k
    precond_scale extra factor on the update (the grid solvers already
                  multiply by h^s; this is the knob on top of that)
    """

    damping: float = 0.04
    max_iters: int = 20000
    residual_tol: float = 1e-6
    step_rule: str = "fixed"
    precond_scale: float = 1.0

    def __post_init__(self):
        if not (
            isinstance(self.damping, (int, float))
            and math.isfinite(self.damping)
            and 0.0 < self.damping <= 1.0
        ):
            raise ValidationError("damping must be a real in (0, 1]")
        if not (isinstance(self.max_iters, int) and self.max_iters > 0):
            raise ValidationError("max_iters must be a positive integer")
        if not (
            isinstance(self.residual_tol, (int, float))
            and math.isfinite(self.residual_tol)
            and self.residual_tol > 0.0
        ):
            raise ValidationError("residual_tol must be positive")
        if self.step_rule not in ("fixed", "diminishing"):
            raise ValidationError("step_rule must be 'fixed' or 'diminishing'")
        if not (
            isinstance(self.precond_scale, (int, float))
            and math.isfinite(self.precond_scale)
            and self.precond_scale > 0.0
        ):
            raise ValidationError("precond_scale must be positive")

    def step_factor(self, k: int) -> float:
        if self.step_rule == "diminishing":
            return self.damping / math.sqrt(k + 1.0)
        return self.damping


@dataclass(frozen=True)
class SolveReport:
    """What one solve actually measured.

    residual_history[k] is the sup-norm of F[u] over the solved nodes
    after k sweeps (entry 0 is the initial guess), so
    converged == (residual_history[-1] <= residual_tol) and
    iterations == len(residual_history) - 1.
    """

    iterations: int
    residual_history: tuple
    lipschitz_monitor: float
    converged: bool

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual_history": list(self.residual_history),
            "lipschitz_monitor": self.lipschitz_monitor,
            "converged": self.converged,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @staticmethod
    def from_dict(d: dict) -> "SolveReport":
        return SolveReport(
            iterations=int(d["iterations"]),
            residual_history=tuple(float(r) for r in d["residual_history"]),
            lipschitz_monitor=float(d["lipschitz_monitor"]),
            converged=bool(d["converged"]),
        )

    @staticmethod
    def from_json(text: str) -> "SolveReport":
        return SolveReport.from_dict(json.loads(text))


def _box_bounds(interior_box, n: int):
    if isinstance(interior_box, BoxRegion):
        lo, hi = interior_box.bounds()
    else:
        lo, hi = interior_box
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != (n,) or hi.shape != (n,):
        raise ValidationError(
            f"interior box must provide {n}-vector bounds, got {lo.shape}"
        )
    if np.any(hi <= lo):
        raise ValidationError("interior box needs lo < hi componentwise")
    return lo, hi


def _check_grid_problem(exterior, interior_box, params):
    if not isinstance(exterior, GraphFunction):
        raise ValidationError(
            "exterior data must be a grid-sampled GraphFunction; analytic "
            "graphs carry no unknowns to relax"
        )
    if not isinstance(params, FractionalParams):
        raise ValidationError("params must be a FractionalParams instance")
    if params.n != exterior.n:
        raise ValidationError(
            f"params.n={params.n} does not match the graph dimension "
            f"n={exterior.n}"
        )
    lo, hi = _box_bounds(interior_box, exterior.n)
    L = exterior.half_width
    for ax in range(exterior.n):
        if lo[ax] < -L or hi[ax] > L:
            raise DomainError(
                f"interior box [{lo[ax]}, {hi[ax]}] on axis {ax} leaves the "
                f"sampled grid [-{L}, {L}]; no exterior data there"
            )
    return lo, hi


def _interior_mask(exterior: GraphFunction, lo, hi):
    pts = exterior.nodes()
    eps = 1e-12 * float(np.max(hi - lo))
    mask = np.all((pts > lo + eps) & (pts < hi - eps), axis=1)
    if not np.any(mask):
        raise DomainError("interior box contains no grid nodes to solve for")
    return pts[mask], mask


def _transfinite_blend(exterior, lo, hi, pts):
    """Boolean-sum multilinear blend of the exterior values on the
    interior-box faces; exact on affine data."""
    n = pts.shape[1]
    t = (pts - lo) / (hi - lo)
    out = np.zeros(pts.shape[0])
    for r in range(1, n + 1):
        sign = 1.0 if r % 2 == 1 else -1.0
        for axes in itertools.combinations(range(n), r):
            for sides in itertools.product((0, 1), repeat=r):
                w = np.ones(pts.shape[0])
                q = pts.copy()
                for ax, side in zip(axes, sides):
                    w = w * (t[:, ax] if side else 1.0 - t[:, ax])
                    q[:, ax] = hi[ax] if side else lo[ax]
                out += sign * w * np.asarray(exterior.eval(q))
    return out


def _anchored(exterior: GraphFunction):
    """Shift affine-extended data so the box-center value is zero.

    The operator depends only on differences of u, so iterating on the
    shifted samples and adding the constant back afterwards makes the
    vertical-shift equivariance of the solve exact at node level.
    """
    ext = exterior.extension
    if not isinstance(ext, AffineExtension):
        return exterior, 0.0
    anchor = float(ext.offset)
    if anchor == 0.0:
        return exterior, 0.0
    work = GraphFunction(
        exterior.samples - anchor,
        exterior.half_width,
        AffineExtension(ext.slope, 0.0),
        boundary_tol=max(exterior.boundary_tol,
                         64.0 * np.finfo(float).eps * (1.0 + abs(anchor))),
    )
    return work, anchor


def _default_quad(quad, spacing):
    if quad is not None:
        return quad
    base = QuadratureConfig()
    if spacing and 0.5 * spacing > base.inner_cutoff:
        return replace(base, inner_cutoff=0.5 * spacing)
    return base


def _budget_warning(reports, tol):
    budget = max(r.total_error for r in reports)
    if tol < budget:
        warnings.warn(
            f"residual_tol {tol:g} is below the quadrature error budget "
            f"{budget:.3g}; the computed residual can still reach it, but "
            f"the solution is only accurate to the budget",
            ToleranceWarning,
            stacklevel=3,
        )


def _diverged(history: list) -> bool:
    if not math.isfinite(history[-1]):
        return True
    k = len(history) - 1
    return k >= 50 and history[k] > 10.0 * history[k - 50]


def solve_dirichlet(exterior, interior_box, params, quad=None, config=None,
                    threads: int = 1):
    """Relax the graph samples inside interior_box to F[u] = 0, keeping
    the exterior samples and far-field extension fixed.

    Returns (solution GraphFunction, SolveReport). The initial guess is
    the multilinear blend of the exterior values on the box faces, so
    affine data is solved exactly by the guess itself (zero sweeps).
    Raises DivergenceError, with the partial report attached, if the
    residual grows tenfold over a 50-sweep window.
    """
    cfg = config or SolveConfig()
    lo, hi = _check_grid_problem(exterior, interior_box, params)
    quad = _default_quad(quad, exterior.spacing)
    work, anchor = _anchored(exterior)

    pts, mask = _interior_mask(work, lo, hi)
    flat = work.samples.copy().ravel()
    flat[mask] = _transfinite_blend(work, lo, hi, pts)
    u = work.with_samples(flat.reshape(work.samples.shape))

    h = exterior.spacing
    scale = cfg.precond_scale * h ** params.s
    history = []
    converged = False
    for k in range(cfg.max_iters + 1):
        reports = nmc_graph_batch(u, pts, params, quad, threads=threads)
        fvals = np.array([float(r) for r in reports])
        history.append(float(np.max(np.abs(fvals))))
        if k == 0:
            _budget_warning(reports, cfg.residual_tol)
        if _diverged(history):
            raise DivergenceError(
                f"residual grew to {history[-1]:.3g} at sweep {k}",
                report=_grid_report(u, lo, hi, history, anchor,
                                    exterior, converged=False)[1],
            )
        if history[-1] <= cfg.residual_tol:
            converged = True
            break
        if k == cfg.max_iters:
            break
        flat = u.samples.copy().ravel()
        flat[mask] = flat[mask] + cfg.step_factor(k) * scale * fvals
        u = u.with_samples(flat.reshape(u.samples.shape))
    return _grid_report(u, lo, hi, history, anchor, exterior, converged)


def _grid_report(u, lo, hi, history, anchor, exterior, converged):
    if anchor != 0.0:
        final = GraphFunction(
            u.samples + anchor,
            exterior.half_width,
            exterior.extension,
            boundary_tol=max(exterior.boundary_tol,
                             64.0 * np.finfo(float).eps * (1.0 + abs(anchor))),
        )
    else:
        final = u
    monitor = lipschitz_constant(final, BoxRegion(tuple(lo), tuple(hi)))
    report = SolveReport(
        iterations=len(history) - 1,
        residual_history=tuple(history),
        lipschitz_monitor=monitor,
        converged=converged,
    )
    return final, report


def solve_cone(trace_exterior, params, quad=None, config=None,
               fixed=None, threads: int = 1):
    """Relax the sphere trace of a 1-homogeneous graph toward zero
    curvature at its radius-1 points.

    Each sweep extends the trace homogeneously (degree one), evaluates F
    at the trace directions, and moves the free trace values against the
    curvature. For one-dimensional slope traces this contracts toward
    the flat critical cones; finely sampled circle traces can excite a
    locally expansive tent mode, which the divergence check reports
    rather than damps. `fixed` is an optional boolean mask of directions
    to hold as boundary data; by default every value relaxes. Returns
    (trace, SolveReport).
    """
    cfg = config or SolveConfig()
    if not hasattr(trace_exterior, "dim") or not hasattr(
        trace_exterior, "with_values"
    ):
        raise ValidationError("trace_exterior must be a sphere-trace object")
    n = trace_exterior.dim
    if n not in (1, 2):
        raise ValidationError("cone solving supports n in {1, 2}")
    if not isinstance(params, FractionalParams):
        raise ValidationError("params must be a FractionalParams instance")
    if params.n != n:
        raise ValidationError(
            f"params.n={params.n} does not match the trace dimension n={n}"
        )
    quad = quad or QuadratureConfig()
    trace = trace_exterior
    dirs = trace.directions()
    if fixed is None:
        free = np.ones(dirs.shape[0], dtype=bool)
    else:
        fixed = np.asarray(fixed, dtype=bool).ravel()
        if fixed.shape[0] != dirs.shape[0]:
            raise ValidationError(
                "fixed mask length must match the trace direction count"
            )
        free = ~fixed
        if not np.any(free):
            raise ValidationError("every trace value is fixed; nothing to solve")

    history = []
    converged = False
    for k in range(cfg.max_iters + 1):
        reports = nmc_graph_batch(ConeGraph(trace), dirs, params, quad,
                                  threads=threads)
        fvals = np.array([float(r) for r in reports])
        history.append(float(np.max(np.abs(fvals))))
        if k == 0:
            _budget_warning(reports, cfg.residual_tol)
        if _diverged(history):
            raise DivergenceError(
                f"residual grew to {history[-1]:.3g} at sweep {k}",
                report=_cone_report(trace, history, converged=False)[1],
            )
        if history[-1] <= cfg.residual_tol:
            converged = True
            break
        if k == cfg.max_iters:
            break
        vals = trace.values()
        vals[free] = vals[free] - cfg.step_factor(k) * cfg.precond_scale \
            * fvals[free]
        trace = trace.with_values(vals)
    return _cone_report(trace, history, converged)


def _cone_report(trace, history, converged):
    report = SolveReport(
        iterations=len(history) - 1,
        residual_history=tuple(history),
        lipschitz_monitor=float(trace.lipschitz_bound()),
        converged=converged,
    )
    return trace, report
