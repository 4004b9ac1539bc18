import json
import math

import mpmath
import numpy as np
import pytest

from cocycle_kam.analytic import (AnalyticFunction, MatrixFunction, birkhoff_sum, direct_birkhoff_values,
                                  matmul, multiply, norm_strip, rotation_matrices, shift, verify_denjoy_bounds)
from cocycle_kam.arithmetic import ContinuedFraction, DiophantineParams, select_Q
from cocycle_kam.errors import OutsideStrip, ResonantFrequency

L, H = 12, 0.5
rng = np.random.default_rng(7)


def decaying(L=L, h=H, real=True, seed=0):
    """Random trigonometric polynomial whose coefficients decay like e^{-2 pi |l| h}."""
    r = np.random.default_rng(seed)
    ls = np.arange(-L, L + 1)
    c = (r.normal(size=2 * L + 1) + 1j * r.normal(size=2 * L + 1)) * np.exp(-2 * np.pi * np.abs(ls) * h)
    f = AnalyticFunction(c, h, real_symmetric=False)
    return f.symmetrized() if real else f


def eval_at(f: AnalyticFunction, z):
    """Direct evaluation of the trigonometric sum at complex points."""
    ls = np.arange(-f.L, f.L + 1)
    return np.array([np.sum(f.coeffs * np.exp(2j * np.pi * ls * zz)) for zz in np.atleast_1d(z)])


class TestNorms:
    @pytest.mark.parametrize("seed", range(4))
    def test_upper_dominates_sampled_strip(self, seed):
        f = decaying(seed=seed)
        hp = 0.3
        x = np.linspace(0, 1, 301)
        sup = max(np.abs(eval_at(f, x + 1j * y)).max() for y in np.linspace(-hp, hp, 7))
        up, lo = norm_strip(f, hp)
        assert up >= sup * (1 - 1e-12)
        assert lo <= up * (1 + 1e-12)
        # the lower bound is a real sample of |f| on the boundary
        assert lo >= np.abs(eval_at(f, x + 1j * hp)).max() * (1 - 1e-3)

    def test_single_mode_is_sharp(self):
        f = AnalyticFunction.from_modes({3: 2.0}, L, H, real_symmetric=False)
        up, lo = f.norm_strip(0.2)
        assert up == pytest.approx(2 * math.exp(2 * math.pi * 3 * 0.2), rel=1e-13)
        assert lo == pytest.approx(up, rel=1e-12)

    def test_outside_strip(self):
        f = decaying()
        with pytest.raises(OutsideStrip, match="outside strip"):
            f.norm_upper(0.6)
        with pytest.raises(OutsideStrip):
            f.norm_upper(-0.1)
        with pytest.raises(OutsideStrip):
            MatrixFunction.identity(L, H).norm_upper(0.9)

    def test_tail_budget_is_added(self):
        f = decaying()
        g = f.with_L(4)
        assert g.err > 0
        assert g.norm_upper(0.4) >= f.norm_upper(0.4) - 1e-12 - (f.norm_upper(0.4) - g.norm_upper(0.4) + g.err)
        # truncation never loses certified mass
        assert g.norm_upper(0.5) >= f.norm_upper(0.5) * (1 - 1e-12)


class TestAlgebra:
    def test_multiply_matches_pointwise(self):
        f, g = decaying(L=8, seed=1), decaying(L=8, seed=2)
        prod = multiply(f.with_L(16), g.with_L(16))
        x = rng.random(50)
        assert np.allclose(prod(x), f(x) * g(x), atol=1e-13)
        assert prod.err < 1e-12

    def test_multiply_truncation_budget_covers_loss(self):
        f, g = decaying(seed=3), decaying(seed=4)
        prod = f * g
        x = rng.random(40) + 0.25j
        exact = eval_at(f, x) * eval_at(g, x)
        assert np.abs(eval_at(prod, x) - exact).max() <= prod.err + 1e-12

    def test_from_callable_recovers_function(self):
        f = AnalyticFunction.from_callable(lambda x: np.exp(np.cos(2 * np.pi * x)), 24, 0.4)
        x = rng.random(30)
        assert np.allclose(f(x), np.exp(np.cos(2 * np.pi * x)), atol=1e-13)
        # Bessel coefficients I_l(1)
        for l in range(4):
            assert f.coeff(l).real == pytest.approx(float(mpmath.besseli(l, 1)), abs=1e-14)

    def test_shift_matches_evaluation(self):
        f = decaying(seed=5)
        x = rng.random(20)
        for beta in (0.1, 0.37, -0.2):
            assert np.allclose(shift(f, beta)(x), f(x + beta), atol=1e-13)

    def test_shift_by_integer_is_identity(self):
        f = decaying(seed=6)
        assert np.allclose(f.shift(3).coeffs, f.coeffs)

    def test_symmetry(self):
        f = decaying(real=False, seed=7)
        assert f.real_symmetry_defect() > 1e-3
        s = f.symmetrized()
        assert s.real_symmetry_defect() == 0.0
        assert np.abs(s(rng.random(10)).imag).max() < 1e-14

    def test_dict_round_trip(self):
        f = decaying(seed=8)._with(decaying(seed=8).coeffs, err=1e-9)
        g = AnalyticFunction.from_dict(json.loads(json.dumps(f.to_dict())))
        assert np.array_equal(g.coeffs, f.coeffs) and g.err == f.err and g.h == f.h

    def test_bad_lengths(self):
        with pytest.raises(ValueError):
            AnalyticFunction(np.zeros(4))
        d = decaying().to_dict()
        d["L"] = 3
        with pytest.raises(ValueError):
            AnalyticFunction.from_dict(d)

    def test_large_lift_angle_values(self):
        theta = AnalyticFunction.cos(1, 0.01, L, H) + 8000.3
        vals, k = theta.angle_grid_values(64)
        assert k == 8000
        x = np.arange(64) / 64
        assert np.allclose(vals, 0.3 + 0.01 * np.cos(2 * np.pi * x), atol=1e-14)


class TestBirkhoff:
    @pytest.mark.parametrize("n", [1, 2, 5, 34, 233])
    def test_against_direct_sum(self, golden, n):
        f = decaying(seed=9)
        x = rng.random(12)
        direct = direct_birkhoff_values(f, golden, n, x)
        closed = birkhoff_sum(f, golden, n)(x)
        assert np.abs(closed - direct).max() <= 1e-10 * max(1.0, np.abs(direct).max())

    def test_against_high_precision(self, golden):
        f = AnalyticFunction.from_modes({1: 1.0}, L, H, real_symmetric=False)
        n = 10 ** 6 + 7
        got = birkhoff_sum(f, golden, n).coeff(1)
        with mpmath.workdps(60):
            a = (mpmath.sqrt(5) - 1) / 2
            e = mpmath.exp(2j * mpmath.pi * a)
            want = complex((1 - e ** n) / (1 - e))
        assert abs(got - want) <= 1e-9 * abs(want)

    def test_resonance(self):
        f = decaying()
        with pytest.raises(ResonantFrequency, match="resonant frequency"):
            birkhoff_sum(f, 0.25, 10)

    def test_n_must_be_positive(self, golden):
        with pytest.raises(ValueError):
            birkhoff_sum(decaying(), golden, 0)

    def test_denjoy_ratios_bounded(self, golden_cf):
        p = DiophantineParams(2.0, 0.4, 0.1)
        rep = verify_denjoy_bounds(AnalyticFunction.cos(1, 1.0, 16, 0.4), golden_cf, select_Q(golden_cf, p),
                                   p, 0.4, 0.04)
        assert rep.ks and 0 < rep.max_ratio < 10
        assert set(rep.to_dict()) >= {"k", "ratio_Q", "ratio_l", "C_empirical"}


class TestMatrixFunction:
    def test_matmul_matches_numpy(self):
        A = MatrixFunction.from_entries(decaying(L=6, seed=1), decaying(L=6, seed=2),
                                        decaying(L=6, seed=3), decaying(L=6, seed=4))
        B = MatrixFunction.from_entries(decaying(L=6, seed=5), decaying(L=6, seed=6),
                                        decaying(L=6, seed=7), decaying(L=6, seed=8))
        A, B = A.with_L(14), B.with_L(14)
        x = rng.random(25)
        assert np.allclose((A @ B)(x), np.einsum("nij,njk->nik", A(x), B(x)), atol=1e-12)
        assert np.allclose(matmul(A, B, noise_factor=4.0)(x), (A @ B)(x), atol=1e-12)

    def test_adjugate_is_inverse_on_sl2(self):
        theta = AnalyticFunction.cos(1, 0.1, L, H) + 0.2
        R = MatrixFunction.rotation(theta)
        D = MatrixFunction.constant(np.array([[2.0, 1.0], [1.0, 1.0]]), L, H)
        M = R @ D
        x = rng.random(10)
        assert np.allclose(M.det()(x), 1.0, atol=1e-12)
        assert np.allclose(np.einsum("nij,njk->nik", M.inv_sl2()(x), M(x)), np.eye(2), atol=1e-12)
        assert np.allclose(M.inv_sl2()(x), np.linalg.inv(M(x)), atol=1e-12)

    def test_trace_transpose(self):
        A = MatrixFunction.from_entries(decaying(seed=1), decaying(seed=2), decaying(seed=3), decaying(seed=4))
        x = rng.random(7)
        assert np.allclose(A.trace()(x), np.trace(A(x), axis1=1, axis2=2))
        assert np.allclose(A.transpose()(x), np.transpose(A(x), (0, 2, 1)))

    def test_rotation_entries(self):
        theta = AnalyticFunction.sin(2, 0.05, L, H) + 0.1
        x = rng.random(9)
        assert np.allclose(MatrixFunction.rotation(theta)(x), rotation_matrices(theta(x)), atol=1e-13)
        # integer lifts are invisible
        assert np.allclose(MatrixFunction.rotation(theta + 5000)(x), rotation_matrices(theta(x)), atol=1e-11)

    def test_operator_norm_bound(self):
        A = MatrixFunction.from_entries(decaying(seed=1), decaying(seed=2), decaying(seed=3), decaying(seed=4))
        hp = 0.25
        x = np.linspace(0, 1, 101)
        sampled = max(np.linalg.norm(A(x + 1j * y), 2, axis=(1, 2)).max() for y in (-hp, 0, hp))
        up, lo = A.norm_strip(hp)
        assert up >= sampled * (1 - 1e-12) and lo <= up * (1 + 1e-12)

    def test_shift(self):
        A = MatrixFunction.from_entries(decaying(seed=1), decaying(seed=2), decaying(seed=3), decaying(seed=4))
        x = rng.random(6)
        assert np.allclose(A.shift(0.3)(x), A(x + 0.3), atol=1e-13)

    def test_dict_round_trip(self):
        A = MatrixFunction.from_entries(decaying(seed=1), decaying(seed=2), decaying(seed=3), decaying(seed=4))
        B = MatrixFunction.from_dict(json.loads(json.dumps(A.to_dict())))
        assert np.array_equal(A.coeffs, B.coeffs) and A.h == B.h


def test_liouville_sum_is_finite(liouville_cf):
    f = AnalyticFunction.cos(1, 1.0, 16, 0.4)
    s = birkhoff_sum(f, liouville_cf.alpha, liouville_cf.q[-1])
    assert np.all(np.isfinite(s.coeffs))


def test_from_quotients_alpha_matches(liouville_cf):
    assert isinstance(liouville_cf, ContinuedFraction)
    assert liouville_cf.q[:7] == [1, 1, 21, 22, 44021, 44043, 88086044021]
