"""Kernel primitive tests: direct quadrature route and cached interpolant.

Reference values come from the hand-rolled adaptive Simpson oracles in
oracles.py, never from the implementation under test.
"""

import concurrent.futures
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlms import (
    DomainError,
    F_infinity,
    FractionalParams,
    KernelAccuracy,
    ValidationError,
    eval_F,
    eval_F_prime,
    get_kernel,
)
from nlms.kernel import S_MAX, S_MIN, FKernel

from oracles import adaptive_simpson, f_limit_oracle, f_primitive_oracle

P15 = FractionalParams(1, 0.5)

# frozen oracle outputs (adaptive Simpson at 1e-12, computed once, pinned)
F_AT_1_N1_S05 = 0.7443030797604929
F_INF_N1_S05 = 1.1981402347355916


class TestEvalF:
    def test_zero_is_exactly_zero(self):
        assert eval_F(0.0, P15) == 0.0

    def test_frozen_value(self):
        assert abs(eval_F(1.0, P15) - F_AT_1_N1_S05) <= 1e-10

    @pytest.mark.parametrize("r", [0.25, 1.0, 3.0, 30.0, 75.0])
    @pytest.mark.parametrize("n,s", [(1, 0.5), (2, 0.3), (3, 0.9)])
    def test_matches_simpson_oracle(self, r, n, s):
        p = FractionalParams(n, s)
        assert abs(eval_F(r, p) - f_primitive_oracle(r, n, s)) <= 1e-10

    def test_oddness_examples(self):
        for r in (0.5, 1.0, 10.0, 60.0):
            assert abs(eval_F(r, P15) + eval_F(-r, P15)) <= 2e-12

    def test_random_triples_sweep(self):
        # small cousin of the full acceptance sweep
        rng = np.random.default_rng(7)
        for _ in range(12):
            n = int(rng.integers(1, 4))
            s = float(rng.uniform(0.1, 0.9))
            r = float(rng.uniform(-80.0, 80.0))
            p = FractionalParams(n, s)
            assert abs(eval_F(r, p) - f_primitive_oracle(r, n, s)) <= 1e-10

    def test_saturation_below_limit(self):
        for n, s in [(1, 0.5), (2, 0.7)]:
            p = FractionalParams(n, s)
            assert abs(eval_F(1e5, p)) < F_infinity(p)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_nonfinite_r_rejected(self, bad):
        with pytest.raises(DomainError):
            eval_F(bad, P15)

    @settings(max_examples=50, deadline=None)
    @given(r=st.floats(-30.0, 30.0), r2=st.floats(-30.0, 30.0))
    def test_lipschitz_and_monotone(self, r, r2):
        a, b = eval_F(r, P15), eval_F(r2, P15)
        assert abs(a - b) <= abs(r - r2) * (1.0 + 1e-12) + 4e-12
        if r - r2 > 1e-11:
            assert a > b

    @settings(max_examples=40, deadline=None)
    @given(r=st.floats(0.0, 100.0))
    def test_odd_property(self, r):
        assert abs(eval_F(r, P15) + eval_F(-r, P15)) <= 2e-12


class TestEvalFPrime:
    def test_at_zero(self):
        assert eval_F_prime(0.0, P15) == 1.0

    def test_even_exact(self):
        for r in (0.3, 1.7, 12.0):
            assert eval_F_prime(r, P15) == eval_F_prime(-r, P15)

    def test_range(self):
        for r in np.linspace(-20, 20, 41):
            v = eval_F_prime(float(r), P15)
            assert 0.0 < v <= 1.0

    def test_fundamental_theorem(self):
        # central differences of F converge to F' at second order
        r0 = 0.7
        errs = []
        acc = KernelAccuracy(abs_tol=1e-13)
        for h in (1e-3, 1e-4):
            fd = (eval_F(r0 + h, P15, acc) - eval_F(r0 - h, P15, acc)) / (2 * h)
            errs.append(abs(fd - eval_F_prime(r0, P15)))
        assert errs[0] <= 2e-6
        assert errs[1] <= 5e-8

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            eval_F_prime(float("nan"), P15)


class TestFInfinity:
    def test_frozen_value(self):
        assert abs(F_infinity(P15) - F_INF_N1_S05) <= 1e-12

    @pytest.mark.parametrize("n,s", [(1, 0.2), (1, 0.5), (2, 0.5), (3, 0.8)])
    def test_matches_split_quadrature_oracle(self, n, s):
        assert abs(F_infinity(FractionalParams(n, s)) - f_limit_oracle(n, s)) <= 1e-10

    def test_tail_bound_bracket(self):
        # truncated quadrature plus the analytic tail bound R^-(n+s)/(n+s)
        n, s = 1, 0.5
        beta = 0.5 * (n + 1 + s)
        for R in (10.0, 100.0):
            head = adaptive_simpson(lambda t: (1 + t * t) ** (-beta), 0.0, R, 1e-12)
            bound = R ** (-(n + s)) / (n + s)
            assert abs(F_infinity(FractionalParams(n, s)) - head) <= bound + 1e-10

    def test_decreasing_in_s(self):
        vals = [F_infinity(FractionalParams(1, s)) for s in (0.2, 0.5, 0.8)]
        assert vals[0] > vals[1] > vals[2]


class TestFKernel:
    def test_certified_within_budget(self):
        k = get_kernel(P15)
        assert k.certified_error <= KernelAccuracy().abs_tol

    def test_agreement_with_eval_F(self):
        k = get_kernel(P15)
        acc = KernelAccuracy(abs_tol=1e-13)
        sweep = np.concatenate(
            [np.linspace(-60, 60, 97), [-1e4, -120.0, 120.0, 1e4, 1e9]]
        )
        for r in sweep:
            assert abs(k(float(r)) - eval_F(float(r), P15, acc)) <= k.certified_error

    def test_exact_oddness_bitwise(self):
        k = get_kernel(P15)
        rs = np.concatenate([np.linspace(0, 55, 111), [1e3, 1e7]])
        assert np.all(k(-rs) == -k(rs))

    def test_zero(self):
        k = get_kernel(P15)
        assert k(0.0) == 0.0
        assert k(np.array([0.0, -0.0])).tolist() == [0.0, 0.0]

    def test_pair_cancellation_is_exact(self):
        # the property the affine-annihilation machinery leans on
        k = get_kernel(P15)
        for a in (0.1, 0.77, 3.3, 41.0):
            assert k(a) + k(-a) == 0.0

    def test_prime_matches(self):
        k = get_kernel(P15)
        for r in (0.0, 0.4, 2.0, -7.0):
            assert k.prime(r) == eval_F_prime(r, P15)

    def test_scalar_and_array_shapes(self):
        k = get_kernel(P15)
        assert isinstance(k(1.0), float)
        out = k(np.ones((3, 2)))
        assert out.shape == (3, 2)

    def test_second_derivative_max_is_max(self):
        k = get_kernel(P15)
        beta = P15.beta

        def fpp(r):
            return abs(-2.0 * beta * r * (1 + r * r) ** (-beta - 1.0))

        grid = np.linspace(0, 5, 2001)
        assert k.second_derivative_max >= max(fpp(float(r)) for r in grid) - 1e-12

    def test_cache_identity(self):
        assert get_kernel(P15) is get_kernel(FractionalParams(1, 0.5))
        assert get_kernel(P15) is not get_kernel(FractionalParams(1, 0.3))

    def test_threaded_bit_identity(self):
        rs = np.linspace(-55, 55, 201)
        p = FractionalParams(2, 0.45)

        def task(_):
            return get_kernel(p)(rs)

        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as ex:
            outs = list(ex.map(task, range(16)))
        for o in outs[1:]:
            assert np.array_equal(o, outs[0])

    def test_nonfinite_rejected(self):
        k = get_kernel(P15)
        with pytest.raises(DomainError):
            k(np.array([1.0, float("nan")]))


class TestValidation:
    @pytest.mark.parametrize("s", [0.01, 0.99, -0.5, float("nan")])
    def test_bad_s(self, s):
        with pytest.raises(ValidationError):
            FractionalParams(1, s)

    @pytest.mark.parametrize("n", [0, -1, 1.5, True])
    def test_bad_n(self, n):
        with pytest.raises(ValidationError):
            FractionalParams(n, 0.5)

    def test_range_edges_allowed(self):
        FractionalParams(1, S_MIN)
        FractionalParams(1, S_MAX)

    def test_ambient_dimension(self):
        assert FractionalParams(2, 0.5).N == 3

    def test_accuracy_floor(self):
        with pytest.raises(ValidationError):
            KernelAccuracy(abs_tol=1e-17)
        with pytest.raises(ValidationError):
            KernelAccuracy(max_subdivisions=2)

    def test_kernel_accuracy_target_enforced(self):
        # a loose target is fine too, the certificate simply has slack
        k = FKernel(P15, KernelAccuracy(abs_tol=1e-9))
        assert k.certified_error <= 1e-9
