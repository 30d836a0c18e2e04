"""Geometry layer: traces, extensions, graphs, transforms, voxel sets."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlms.errors import (
    ConsistencyError,
    DomainError,
    UnsupportedEvaluationError,
    ValidationError,
)
from nlms.geometry import (
    AffineExtension,
    Annulus,
    BoxRegion,
    CallableGraph,
    CircleTrace,
    ComplementExterior,
    ConeGraph,
    EmptyExterior,
    FullExterior,
    GraphFunction,
    HalfSpaceExterior,
    HomogeneousExtension,
    LipschitzEnvelope,
    RotationTheta,
    SlopeTrace,
    SphereTrace,
    SplitTrace,
    SubgraphExterior,
    VoxelSet,
    ZeroHomogeneousExtension,
    blowup_at,
    lipschitz_constant,
    rescale,
    rotate_cone,
    unit_directions,
)


def bump_profile(pts, width):
    """C-infinity bump supported on |x| < width, equal to e^0=1 at 0... scaled."""
    t2 = np.sum(pts * pts, axis=1) / width**2
    out = np.zeros(pts.shape[0])
    m = t2 < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - t2[m]))
    return out


# ---------------------------------------------------------------------------
# traces


class TestSlopeTrace:
    def test_sphere_values(self):
        tr = SlopeTrace(2.0, -0.5)
        # [TRIVIAL] v(+1) = a, v(-1) = -b by definition of the slope pair
        assert tr.sphere_value(np.array([1.0]))[0] == 2.0
        assert tr.sphere_value(np.array([-1.0]))[0] == 0.5

    def test_roundtrip_values(self):
        tr = SlopeTrace(1.25, -3.0)
        back = tr.with_values(tr.values())
        assert back.a == tr.a and back.b == tr.b

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            SlopeTrace(float("nan"), 0.0)


class TestCircleTrace:
    def test_node_values_exact(self):
        vals = np.array([1.0, -2.0, 3.0, 0.25])
        tr = CircleTrace(vals)
        dirs = tr.directions()
        got = tr.sphere_value(dirs)
        assert np.allclose(got, vals, rtol=0, atol=1e-12)

    def test_midpoint_is_average(self):
        tr = CircleTrace([1.0, 3.0, 5.0, 7.0])
        # halfway between angle nodes 0 and pi/2
        ang = math.pi / 4
        got = tr.sphere_value(np.array([[math.cos(ang), math.sin(ang)]]))[0]
        assert got == pytest.approx(2.0, abs=1e-12)

    def test_periodic_wrap(self):
        tr = CircleTrace([1.0, 3.0, 5.0, 7.0])
        ang = 2 * math.pi * 7 / 8  # halfway between last node and node 0
        got = tr.sphere_value(np.array([[math.cos(ang), math.sin(ang)]]))[0]
        assert got == pytest.approx(4.0, abs=1e-12)

    def test_scale_free(self):
        tr = CircleTrace([0.5, 1.5, -0.5, 2.5, 0.0])
        w = np.array([[0.3, -0.4]])
        assert tr.sphere_value(w)[0] == tr.sphere_value(10.0 * w)[0]

    def test_needs_three_samples(self):
        with pytest.raises(ValidationError):
            CircleTrace([1.0, 2.0])


class TestSphereTrace:
    def test_constant_everywhere(self):
        dirs = unit_directions(3, 20)
        tr = SphereTrace(dirs, np.full(20, 1.5))
        probes = unit_directions(3, 57)
        assert np.allclose(tr.sphere_value(probes), 1.5, rtol=0, atol=1e-12)

    def test_vertex_values_reproduce(self):
        dirs = unit_directions(3, 14)
        vals = np.linspace(-1.0, 1.0, 14)
        tr = SphereTrace(dirs, vals)
        got = tr.sphere_value(dirs)
        assert np.allclose(got, vals, rtol=0, atol=1e-10)

    def test_octahedron_linear_data(self):
        # [DERIVED] vertices +-e_i with values p_i give, on the facet
        # hit radially by omega, value p.omega / |omega|_1 (projection onto
        # the cross-polytope where sum |x_i| = 1, then linear interpolation)
        pts = np.vstack([np.eye(3), -np.eye(3)])
        p = np.array([0.7, -0.2, 0.4])
        vals = pts @ p
        tr = SphereTrace(pts, vals)
        omega = np.array([[0.6, 0.48, 0.64]])
        omega /= np.linalg.norm(omega)
        want = float((omega @ p)[0]) / np.sum(np.abs(omega))
        assert tr.sphere_value(omega)[0] == pytest.approx(want, abs=1e-12)


class TestSplitTrace:
    def test_sphere_value_formula(self):
        base = SlopeTrace(1.0, -1.0)  # vstar(x) = |x|
        tr = SplitTrace(base, 1.0)
        for phi in (0.3, 1.2, 2.5, 4.0):
            om = np.array([[math.cos(phi), math.sin(phi)]])
            want = abs(math.cos(phi)) + math.sin(phi)
            assert tr.sphere_value(om)[0] == pytest.approx(want, abs=1e-14)

    def test_pole_value_is_kappa(self):
        tr = SplitTrace(SlopeTrace(2.0, 0.0), 0.75)
        assert tr.sphere_value(np.array([[0.0, 1.0]]))[0] == 0.75

    def test_vstar_is_base_cone(self):
        tr = SplitTrace(SlopeTrace(1.0, -1.0), 0.5)
        assert tr.vstar(np.array([[-0.7]]))[0] == pytest.approx(0.7, abs=1e-15)


# ---------------------------------------------------------------------------
# extensions


class TestExtensions:
    def test_affine_eval(self):
        ext = AffineExtension([2.0, -1.0], 0.25)
        pts = np.array([[1.0, 1.0], [0.0, 3.0]])
        assert np.array_equal(ext.eval(pts), np.array([1.25, -2.75]))

    def test_homogeneous_degree_one(self):
        ext = HomogeneousExtension(CircleTrace([1.0, 0.5, 2.0, 0.25]))
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 2))
        v1 = ext.eval(pts)
        v2 = ext.eval(2.0 * pts) / 2.0
        assert np.allclose(v1, v2, rtol=1e-13, atol=1e-13)
        assert ext.eval(np.zeros((1, 2)))[0] == 0.0

    def test_zero_homogeneous_degree_zero(self):
        ext = ZeroHomogeneousExtension(SlopeTrace(1.0, -1.0))
        pts = np.array([[0.2], [-5.0], [0.0]])
        assert np.array_equal(ext.eval(pts), np.array([1.0, 1.0, 0.0]))

    def test_envelope_refuses_eval(self):
        ext = LipschitzEnvelope(2.0)
        with pytest.raises(UnsupportedEvaluationError):
            ext.eval(np.array([[1.0]]))

    def test_envelope_bound_validated(self):
        with pytest.raises(ValidationError):
            LipschitzEnvelope(-1.0)


# ---------------------------------------------------------------------------
# graph functions


class TestGraphFunction:
    def test_affine_factory_reproduces(self):
        for n in (1, 2, 3):
            slope = np.arange(1, n + 1, dtype=float) / 2.0
            g = GraphFunction.affine(slope, 0.3, n=n, half_width=1.0, num_points=9)
            rng = np.random.default_rng(11 + n)
            pts = rng.uniform(-2.0, 2.0, size=(50, n))
            want = pts @ slope + 0.3
            got = g.eval(pts)
            assert np.max(np.abs(got - want)) <= 1e-13

    def test_bilinear_data_interpolates_exactly(self):
        coords = np.linspace(-1.0, 1.0, 17)
        xx, yy = np.meshgrid(coords, coords, indexing="ij")
        samples = xx * yy
        g = GraphFunction(samples, 1.0, LipschitzEnvelope(2.0))
        pts = np.random.default_rng(5).uniform(-1.0, 1.0, size=(30, 2))
        want = pts[:, 0] * pts[:, 1]
        assert np.max(np.abs(g.eval(pts) - want)) <= 1e-14

    def test_node_eval_bitwise(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 65)
        nodes = g.nodes()
        got = g.eval(nodes)
        assert np.array_equal(got, g.samples.ravel())

    def test_boundary_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="boundary"):
            GraphFunction.from_callable(
                lambda p: np.sum(p, axis=1) + 1.0,
                n=1,
                half_width=1.0,
                num_points=9,
                extension=AffineExtension([1.0], 0.0),
            )

    def test_extension_used_outside(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 33)
        assert g.eval(np.array([7.0])) == 7.0
        assert g.eval(np.array([-4.0])) == 4.0

    def test_scalar_and_batch_shapes(self):
        g = GraphFunction.affine([1.0], 0.0, n=1, half_width=1.0, num_points=5)
        assert isinstance(g.eval(0.25), float)
        assert g.eval(np.array([0.25, 0.5])).shape == (2,)
        assert g.eval(np.array([[0.25], [0.5]])).shape == (2,)

    def test_nan_point_rejected(self):
        g = GraphFunction.affine([1.0], 0.0, n=1, half_width=1.0, num_points=5)
        with pytest.raises(DomainError):
            g.eval(float("nan"))

    def test_samples_read_only(self):
        g = GraphFunction.affine([1.0], 0.0, n=1, half_width=1.0, num_points=5)
        with pytest.raises(ValueError):
            g.samples[0] = 99.0

    def test_with_samples(self):
        g = GraphFunction.affine([1.0], 0.0, n=1, half_width=1.0, num_points=5)
        g2 = g.with_samples(g.samples * 1.0)
        assert np.array_equal(g2.samples, g.samples)
        assert g2.extension is g.extension

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            GraphFunction(np.zeros((4, 5)), 1.0, LipschitzEnvelope(1.0))
        with pytest.raises(ValidationError):
            GraphFunction(np.zeros((3, 3)), -1.0, LipschitzEnvelope(1.0))


class TestCallableGraph:
    def test_inside_outside_split(self):
        ext = AffineExtension([0.5], 0.1)

        def fn(p):
            return p[:, 0] * 0.5 + 0.1 + bump_profile(p, 0.5)

        g = CallableGraph(fn, 1, 1.0, ext)
        assert g.eval(0.0) == pytest.approx(0.1 + math.e * math.exp(-1.0), abs=1e-15)
        assert g.eval(3.0) == pytest.approx(1.6, abs=1e-15)

    def test_boundary_probe_rejects_mismatch(self):
        with pytest.raises(ValidationError):
            CallableGraph(
                lambda p: np.ones(p.shape[0]), 2, 1.0, AffineExtension([0.0, 0.0], 0.0)
            )


class TestConeGraph:
    def test_exact_homogeneous_values(self):
        g = ConeGraph(SlopeTrace(2.0, -1.0))
        assert g.eval(0.5) == 1.0
        assert g.eval(-0.5) == 0.5
        assert g.eval(0.0) == 0.0

    def test_circle_cone(self):
        g = ConeGraph(CircleTrace([1.0, 1.0, 1.0, 1.0]))
        pts = np.array([[3.0, 4.0]])
        assert g.eval(pts)[0] == pytest.approx(5.0, abs=1e-14)


# ---------------------------------------------------------------------------
# transforms


class TestRescale:
    def test_cone_fixed_point(self):
        g = ConeGraph(SlopeTrace(1.0, 0.5))
        for r in (0.5, 2.0, 3.7):
            gr = rescale(g, r)
            pts = np.linspace(-3, 3, 13)
            assert np.array_equal(gr.eval(pts), g.eval(pts))

    def test_callable_rescale_exact(self):
        ext = AffineExtension([1.0], 0.0)

        def fn(p):
            return p[:, 0] + bump_profile(p, 0.5)

        g = CallableGraph(fn, 1, 1.0, ext)
        r = 3.0
        gr = rescale(g, r)
        pts = np.linspace(-2.0, 2.0, 41)
        want = g.eval(r * pts) / r
        # bitwise inside the rescaled box (the closure route), 1-ulp relative
        # agreement beyond it (the extension evaluates directly)
        inside = np.abs(pts) <= gr.half_width
        assert np.array_equal(gr.eval(pts)[inside], want[inside])
        assert np.allclose(gr.eval(pts), want, rtol=1e-14, atol=0.0)
        assert gr.half_width == pytest.approx(1.0 / 3.0)

    def test_grid_halving_is_refinement(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 33)
        gr = rescale(g, 0.5)
        pts = np.linspace(-2.0, 2.0, 81)
        want = g.eval(0.5 * pts) / 0.5
        assert np.max(np.abs(gr.eval(pts) - want)) <= 1e-15

    def test_affine_offset_transforms(self):
        g = GraphFunction.affine([2.0], 1.0, n=1, half_width=1.0, num_points=9)
        gr = rescale(g, 4.0)
        assert gr.extension.offset == 0.25
        assert np.array_equal(gr.extension.slope, g.extension.slope)

    def test_validates_factor(self):
        g = ConeGraph(SlopeTrace(1.0, 1.0))
        with pytest.raises(ValidationError):
            rescale(g, 0.0)
        with pytest.raises(ValidationError):
            rescale(g, float("inf"))


class TestBlowup:
    def test_affine_blowup_is_linear_part(self):
        g = GraphFunction.affine([1.5, -0.5], 2.0, n=2, half_width=1.0, num_points=9)
        w = blowup_at(g, [0.25, -0.5], 0.125)
        pts = np.random.default_rng(2).uniform(-1.5, 1.5, size=(40, 2))
        want = pts @ np.array([1.5, -0.5])
        assert np.max(np.abs(w.eval(pts) - want)) <= 1e-12

    def test_cone_blowup_at_origin_reproduces(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 65)
        w = blowup_at(g, [0.0], 0.25)
        xs = np.linspace(-1.0, 1.0, 21)
        assert np.max(np.abs(w.eval(xs) - np.abs(xs))) <= 1e-12

    def test_envelope_window_guard(self):
        g = GraphFunction(np.zeros(9), 1.0, LipschitzEnvelope(1.0))
        with pytest.raises(DomainError):
            blowup_at(g, [0.9], 1.0)

    def test_envelope_bound_covers_window(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 33)
        w = blowup_at(g, [0.5], 0.25, half_width=0.5)
        assert isinstance(w.extension, LipschitzEnvelope)
        assert w.extension.bound >= 1.0 - 1e-9


class TestLipschitz:
    def test_affine_matches_gradient_norm(self):
        for n in (1, 2):
            p = np.array([3.0, -4.0][:n])
            g = GraphFunction.affine(p, 0.0, n=n, half_width=1.0, num_points=17)
            got = lipschitz_constant(g, BoxRegion((-0.8,) * n, (0.8,) * n))
            assert abs(got - np.linalg.norm(p)) <= 1e-12

    def test_cone_away_from_apex(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, -1.0), 1.0, 65)
        got = lipschitz_constant(g, Annulus(0.5, 2.0, dim=1))
        assert got == 1.0

    def test_empty_region_rejected(self):
        # lattice so coarse that no cell has every corner inside the annulus
        g = GraphFunction.affine([1.0], 0.0, n=1, half_width=1.0, num_points=5)
        with pytest.raises(DomainError):
            lipschitz_constant(g, Annulus(0.45, 0.55, dim=1), resolution=0.5)


class TestRotation:
    def test_apply_inverse_roundtrip(self):
        rot = RotationTheta(0.7)
        pts = np.random.default_rng(4).normal(size=(30, 3))
        back = rot.inverse(rot.apply(pts))
        assert np.max(np.abs(back - pts)) <= 1e-14

    def test_angle_validated(self):
        with pytest.raises(ValidationError):
            RotationTheta(math.pi / 2)

    def test_rotate_cone_needs_split_trace(self):
        g = ConeGraph(SlopeTrace(1.0, 1.0))
        with pytest.raises(ValidationError):
            rotate_cone(g, 0.5)

    def test_rotate_cone_angle_gate(self):
        v0 = ConeGraph(SplitTrace(SlopeTrace(1.0, -1.0), 1.0))
        with pytest.raises(ConsistencyError):
            rotate_cone(v0, math.atan(1.0) + 1e-6)

    def test_margin_identity(self):
        # raw margin times cos(theta) equals the factorized margin
        v0 = ConeGraph(SplitTrace(SlopeTrace(1.0, -1.0), 1.0))
        rc = rotate_cone(v0, math.atan(1.0))
        pts = np.random.default_rng(9).uniform(-2.0, 2.0, size=(200, 3))
        raw = rc.raw_margin(pts) * rc.cos_theta
        fac = rc.factor_margin(pts)
        assert np.max(np.abs(raw - fac)) <= 1e-12

    def test_membership_independent_of_translation_axis(self):
        v0 = ConeGraph(SplitTrace(SlopeTrace(1.0, -1.0), 1.0))
        rc = rotate_cone(v0, math.atan(1.0))
        ys = np.linspace(-2.0, 2.0, 9)
        zs = ys + 0.137  # keep every lattice margin away from zero
        grid = np.array([[a, b, c] for a in ys for b in ys for c in zs])
        assert np.min(np.abs(rc.factor_margin(grid))) > 1e-2
        member = rc.contains(grid)
        shifted = grid.copy()
        shifted[:, 1] += 0.613  # move along the flattened axis only
        assert np.array_equal(member, rc.contains(shifted))


# ---------------------------------------------------------------------------
# voxel sets


class TestVoxelSet:
    def ball(self, dim=2, radius=0.8, cell=0.1):
        return VoxelSet.from_function(
            lambda p: np.sum(p * p, axis=1) < radius**2,
            lo=[-1.0] * dim,
            hi=[1.0] * dim,
            cell=cell,
            exterior=EmptyExterior(),
        )

    def test_contains_at_centers(self):
        v = self.ball()
        inside = v.true_centers()
        outside = v.false_centers()
        assert np.all(v.contains(inside))
        assert not np.any(v.contains(outside))

    def test_exterior_beyond_box(self):
        v = self.ball()
        assert not v.contains(np.array([[5.0, 5.0]]))[0]
        w = VoxelSet(v.origin, v.cell, v.indicator, FullExterior())
        assert w.contains(np.array([[5.0, 5.0]]))[0]

    def test_complement_flips_everywhere(self):
        v = self.ball()
        c = v.complement()
        pts = np.random.default_rng(7).uniform(-3.0, 3.0, size=(100, 2))
        assert np.array_equal(c.contains(pts), ~v.contains(pts))

    def test_halfspace_boundary_agreement(self):
        hs = HalfSpaceExterior([1.0, 0.0], 0.0)
        v = VoxelSet.from_function(
            lambda p: p[:, 0] < 0.0, [-1.0, -1.0], [1.0, 1.0], 0.125, hs
        )
        assert v.boundary_agreement() == 1.0

    def test_scaled_membership_covariant(self):
        v = self.ball(cell=0.125)
        v2 = v.scaled(2.0)
        pts = np.random.default_rng(13).uniform(-1.5, 1.5, size=(64, 2))
        assert np.array_equal(v2.contains(2.0 * pts), v.contains(pts))

    def test_upper_face_belongs_to_exterior(self):
        v = self.ball()
        on_face = np.array([[1.0, 0.0]])
        assert not v.contains(on_face)[0]

    def test_far_field_forms(self):
        assert self.ball().far_field() == ("empty",)
        assert self.ball().far_field(complement=True) == ("full",)
        hs = HalfSpaceExterior([2.0, 0.0], 1.0)
        v = VoxelSet(np.zeros(2), 1.0, np.ones((2, 2), dtype=bool), hs)
        kind, nu, d = v.far_field()
        assert kind == "halfspace"
        assert np.allclose(nu, [1.0, 0.0]) and d == 0.5
        kindc, nuc, dc = v.far_field(complement=True)
        assert np.allclose(nuc, [-1.0, 0.0]) and dc == -0.5

    def test_far_field_subgraph_affine(self):
        g = GraphFunction.affine([1.0], 0.5, n=1, half_width=1.0, num_points=5)
        v = VoxelSet(np.zeros(2), 1.0, np.ones((2, 2), dtype=bool),
                     SubgraphExterior(g))
        kind, nu, d = v.far_field()
        assert kind == "halfspace"
        assert np.allclose(nu, np.array([-1.0, 1.0]) / math.sqrt(2.0))
        assert d == pytest.approx(0.5 / math.sqrt(2.0))

    def test_far_field_subgraph_needs_affine(self):
        g = GraphFunction.from_trace(SlopeTrace(1.0, 1.0), 1.0, 9)
        v = VoxelSet(np.zeros(2), 1.0, np.ones((2, 2), dtype=bool),
                     SubgraphExterior(g))
        with pytest.raises(DomainError):
            v.far_field()

    def test_complement_exterior_resolves(self):
        inner = HalfSpaceExterior([1.0], 0.25)
        ce = ComplementExterior(inner)
        pts = np.array([[0.0], [1.0]])
        assert np.array_equal(ce.contains(pts), ~inner.contains(pts))
        assert ce.complement() is inner


class TestUnitDirections:
    @pytest.mark.parametrize("n,count", [(1, 2), (2, 48), (3, 100)])
    def test_unit_norm(self, n, count):
        d = unit_directions(n, count)
        assert d.shape[1] == n
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_one_dimensional_pair(self):
        assert np.array_equal(unit_directions(1), np.array([[1.0], [-1.0]]))


# ---------------------------------------------------------------------------
# property checks


@settings(max_examples=40, deadline=None)
@given(
    r=st.floats(min_value=0.05, max_value=20.0),
    x=st.floats(min_value=-5.0, max_value=5.0),
)
def test_rescale_invariant_callable(r, x):
    ext = AffineExtension([1.0], 0.0)
    g = CallableGraph(
        lambda p: p[:, 0] + bump_profile(p, 0.5), 1, 1.0, ext
    )
    gr = rescale(g, r)
    assert gr.eval(x) == pytest.approx(g.eval(r * x) / r, rel=1e-13, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(
    t=st.floats(min_value=1e-3, max_value=1e3),
    phi=st.floats(min_value=0.0, max_value=2 * math.pi),
)
def test_homogeneous_extension_scales(t, phi):
    ext = HomogeneousExtension(CircleTrace([1.0, 0.25, -0.5, 2.0]))
    p = np.array([[math.cos(phi), math.sin(phi)]])
    v1 = ext.eval(t * p)[0]
    v0 = ext.eval(p)[0]
    assert v1 == pytest.approx(t * v0, rel=1e-12, abs=1e-300)
