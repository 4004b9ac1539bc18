"""Property-based checks of the structural invariants of each module."""

import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cocycle_kam.analytic import AnalyticFunction, MatrixFunction, birkhoff_sum, shift
from cocycle_kam.arithmetic import (ContinuedFraction, DiophantineParams, RationalOrExhausted, expand_cf,
                                    frac_mul, select_Q, torus_norm)
from cocycle_kam.cocycle import (Cocycle, almost_mathieu_potential, iterate, lyapunov, rotation_number,
                                 schrodinger)
from cocycle_kam.experiments import ScanRecord, scan_energies, summarize
from cocycle_kam.kam import I2, KamConfig, reduce_to_rotations

from oracles import best_denominators, selection_violations

L, H = 10, 0.4

fractions_ = st.builds(Fraction, st.integers(1, 10 ** 12 - 1), st.just(10 ** 12))
seeds = st.integers(0, 2 ** 31)
quotient_lists = st.lists(st.one_of(st.integers(1, 5), st.integers(10, 10 ** 4),
                                    st.integers(10 ** 6, 10 ** 40)), min_size=2, max_size=8)


def rand_fn(seed, L=L, h=H, real=True):
    r = np.random.default_rng(seed)
    ls = np.arange(-L, L + 1)
    c = (r.normal(size=2 * L + 1) + 1j * r.normal(size=2 * L + 1)) * np.exp(-2 * np.pi * np.abs(ls) * h)
    f = AnalyticFunction(c, h, real_symmetric=False)
    return f.symmetrized() if real else f


def rand_matrix(seed, L=L, h=H, size=0.1):
    """An SL(2,R)-valued analytic function: product of two shears with analytic entries."""
    a, b = rand_fn(seed, L, h) * size, rand_fn(seed + 1, L, h) * size
    U = MatrixFunction.from_entries(1.0, a, 0.0, 1.0)
    Lw = MatrixFunction.from_entries(1.0, 0.0, b, 1.0)
    return (U.with_L(3 * L) @ Lw.with_L(3 * L))


GOLDEN = (mpmath.sqrt(5) - 1) / 2


# --------------------------------------------------------------------------- arithmetic

class TestArithmeticProperties:
    @given(fractions_)
    def test_best_denominator_property(self, alpha):
        try:
            cf = expand_cf(alpha, 10 ** 4)
        except RationalOrExhausted as e:
            cf = e.partial
        qs = [q for q in cf.q if q <= 10 ** 4]
        brute = best_denominators(alpha, qs[-1])
        # convergent denominators are exactly the record-setters (q_0 = q_1 = 1 collapse)
        assert sorted(set(qs)) == brute

    @given(fractions_)
    def test_determinant_identity(self, alpha):
        try:
            cf = expand_cf(alpha, 10 ** 9)
        except RationalOrExhausted as e:
            cf = e.partial
        conv = cf.convergents
        for k in range(1, len(conv)):
            (p1, q1), (p0, q0) = conv[k], conv[k - 1]
            assert p1 * q0 - p0 * q1 == (-1) ** (k - 1)

    @given(fractions_)
    def test_reconstruction(self, alpha):
        try:
            cf = expand_cf(alpha, 10 ** 9)
        except RationalOrExhausted as e:
            cf = e.partial
        x = Fraction(0)
        for a in reversed(cf.partial_quotients):
            x = 1 / (a + x)
        assert abs(x - alpha) <= Fraction(1, cf.q[-1] ** 2)

    @given(quotient_lists, st.sampled_from([1.5, 2.0, 5.0, 20.0]))
    def test_selection_invariants(self, quotients, M):
        cf = ContinuedFraction.from_quotients(quotients, max_q=10 ** 60)
        seq = select_Q(cf, M)
        assert selection_violations(cf.q, seq.indices, seq.calA, seq.truncated) == []


# --------------------------------------------------------------------------- analytic

class TestAnalyticProperties:
    @given(seeds, st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 500))
    def test_birkhoff_linear(self, seed, a, b, n):
        f, g = rand_fn(seed), rand_fn(seed + 7)
        lhs = birkhoff_sum(f * a + g * b, GOLDEN, n).coeffs
        rhs = (birkhoff_sum(f, GOLDEN, n) * a + birkhoff_sum(g, GOLDEN, n) * b).coeffs
        assert np.abs(lhs - rhs).max() <= 1e-13 * n * (1 + abs(a) + abs(b))

    @given(seeds, st.integers(1, 300), st.integers(1, 300))
    def test_birkhoff_cocycle_identity(self, seed, m, n):
        f = rand_fn(seed)
        lhs = birkhoff_sum(f, GOLDEN, m + n).coeffs
        rhs = (birkhoff_sum(f, GOLDEN, m) + shift(birkhoff_sum(f, GOLDEN, n), frac_mul(GOLDEN, m))).coeffs
        assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(lhs).max())

    @given(seeds, st.floats(0, H), st.floats(0, H))
    def test_norm_monotone(self, seed, h1, h2):
        f = rand_fn(seed)
        lo, hi = sorted((h1, h2))
        assert f.norm_upper(lo) <= f.norm_upper(hi)

    @given(seeds, st.floats(-2, 2), st.integers(1, 1000))
    def test_real_symmetry_preserved(self, seed, beta, n):
        f = rand_fn(seed)
        assert shift(f, beta).real_symmetry_defect() <= 1e-15 * max(1, np.abs(f.coeffs).max())
        s = birkhoff_sum(f, GOLDEN, n)
        assert s.real_symmetry_defect() <= 1e-13 * max(1.0, np.abs(s.coeffs).max())

    @given(seeds, st.integers(2, 9), st.floats(0.0, 0.35))
    def test_truncation_certificate(self, seed, L2, hp):
        f = rand_fn(seed, L=16, h=H)
        g = f.with_L(L2)
        x = np.linspace(0, 1, 41) + 1j * hp
        true_err = np.abs(f(x) - g.with_L(16)(x)).max()
        assert true_err <= g.err * (1 + 1e-12) + 1e-15


# --------------------------------------------------------------------------- cocycle

class TestCocycleProperties:
    @settings(max_examples=15)
    @given(seeds, st.integers(1, 32), st.integers(1, 32))
    def test_chain_rule(self, seed, m, n):
        A = rand_matrix(seed)
        c = Cocycle(GOLDEN, A.with_L(48), 0, 0.0)
        lhs = iterate(c, m + n)
        rhs = iterate(c, n).shift(frac_mul(GOLDEN, m)) @ iterate(c, m)
        x = np.arange(256) / 256
        scale = max(1.0, float(np.abs(lhs(x)).max()))
        assert np.abs(lhs(x) - rhs(x)).max() <= 1e-10 * scale

    @settings(max_examples=15)
    @given(seeds, st.integers(2, 40))
    def test_commutation(self, seed, q):
        A = rand_matrix(seed).with_L(48)
        Aq = iterate(Cocycle(GOLDEN, A, 0, 0.0), q)
        x = np.arange(256) / 256
        a, qa = frac_mul(GOLDEN, 1), frac_mul(GOLDEN, q)
        lhs = Aq((x + a) % 1) @ A(x)
        rhs = A((x + qa) % 1) @ Aq(x)
        assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, float(np.abs(lhs).max()))

    @settings(max_examples=10)
    @given(st.floats(0.05, 0.45), st.integers(2, 50), st.floats(0, 0.02))
    def test_rho_additivity(self, theta0, q, amp):
        theta = AnalyticFunction.cos(1, amp, L, H) + theta0
        c = Cocycle(GOLDEN, MatrixFunction.rotation(theta) @ MatrixFunction.from_entries(
            1.0, AnalyticFunction.cos(1, 0.01, L, H), 0.0, 1.0))
        rho = rotation_number(c, 4000).rho
        Aq = iterate(c, q)
        rq = rotation_number(Cocycle(frac_mul(GOLDEN, q), Aq, 0, 0.0), 4000).rho
        assert torus_norm(rq - q * rho) <= 1e-5

    @settings(max_examples=6)
    @given(seeds, st.sampled_from([0.0, 0.5, 1.5]))
    def test_lyapunov_conjugacy_invariance(self, seed, E):
        c = schrodinger(almost_mathieu_potential(1.5, 24, H), E, GOLDEN)
        B = rand_matrix(seed, L=8, size=0.3)
        assert abs(lyapunov(c, 3000).value - lyapunov(c.conjugate(B.with_L(24)), 3000).value) <= 2e-3

    @settings(max_examples=10)
    @given(seeds, st.integers(1, 64))
    def test_determinant(self, seed, n):
        A = rand_matrix(seed).with_L(48)
        P = iterate(Cocycle(GOLDEN, A, 0, 0.0), n)
        d = P.det()
        assert (d - 1.0).norm_upper(0.0) <= max(1e-10, d.err) * max(1.0, P.norm_upper(0.0) ** 2)


# --------------------------------------------------------------------------- kam

@pytest.fixture(scope="module")
def golden_runs(golden_cf):
    out = []
    for E in (-1.2, 0.3):
        c = schrodinger(almost_mathieu_potential(1e-3, 64, 0.5), E, GOLDEN)
        r = reduce_to_rotations(c, KamConfig(), golden_cf)
        assert r.status == "converged"
        out.append((c, r))
    return out


class TestKamProperties:
    def test_real_symmetry(self, golden_runs):
        for _, r in golden_runs:
            assert r.B.real_symmetry_defect() <= 1e-12 and r.phi.real_symmetry_defect() <= 1e-12

    def test_rotation_number_preserved(self, golden_runs):
        for c, r in golden_runs:
            conj = Cocycle(c.alpha, r.conjugated(c), 0, 0.0)
            assert torus_norm(rotation_number(c, 4000).rho - rotation_number(conj, 4000).rho) <= 1e-5

    def test_residuals_contract(self, golden_runs):
        for _, r in golden_runs:
            xs = [h["xi"] for h in r.history]
            assert all(b < a for a, b in zip(xs, xs[1:]))
            assert all(b <= a ** 1.5 for a, b in zip(xs[1:], xs[2:]))

    def test_strip_schedule(self, golden_runs):
        cfg = KamConfig()
        for _, r in golden_runs:
            hs = [h["h_k"] for h in r.history]
            for k in range(1, len(hs)):
                assert hs[k] == hs[k - 1] * (1 - cfg.eta_k(k)) ** 2

    def test_det_B(self, golden_runs):
        x = np.arange(256) / 256
        for _, r in golden_runs:
            assert np.abs(np.linalg.det(r.conjugacy()(x)) - 1).max() <= 1e-10
            assert (r.B - I2).norm_upper(0.05) < 0.1


# --------------------------------------------------------------------------- experiments

statuses = st.sampled_from(["converged", "stalled", "precondition_failed", "not_attempted"])


class TestExperimentProperties:
    @given(st.booleans(), statuses)
    def test_record_invariant(self, cert, status):
        ok = cert or status in ("precondition_failed", "not_attempted")
        if ok:
            ScanRecord(0.0, 0.1, 0.0, cert, status, 1.0, 0.0, 0.0)
        else:
            with pytest.raises(ValueError):
                ScanRecord(0.0, 0.1, 0.0, cert, status, 1.0, 0.0, 0.0)

    @given(st.lists(st.tuples(st.booleans(), statuses), min_size=2, max_size=30), st.randoms())
    def test_summary_order_independent(self, flags, rnd):
        recs = []
        for i, (cert, status) in enumerate(flags):
            assume(cert or status in ("precondition_failed", "not_attempted"))
            recs.append(ScanRecord(-1 + i * 0.1, 0.1, 0.0, cert, status, 1.0, 0.0, 0.0))
        shuffled = recs[:]
        rnd.shuffle(shuffled)
        a, b = summarize(recs), summarize(shuffled)
        assert a.n_converged == b.n_converged and a.n_admitted == b.n_admitted
        assert math.isclose(a.measure, b.measure) and a.interval == b.interval

    def test_grid_refinement_stable(self, golden_cf):
        v = almost_mathieu_potential(1e-3, 64, 0.5)
        coarse = np.linspace(-0.6, 0.6, 13)
        fine = np.linspace(-0.6, 0.6, 25)
        rc = scan_energies(v, GOLDEN, coarse, KamConfig(), golden_cf, n_lyap=0)
        rf = scan_energies(v, GOLDEN, fine, KamConfig(), golden_cf, n_lyap=0)
        flags = [r.kam_status == "converged" for r in rc.records]
        components = 2 * sum(1 for i, f in enumerate(flags) if f and (i == 0 or not flags[i - 1]))
        assert abs(rc.summary.measure - rf.summary.measure) <= rc.summary.cell * max(components, 1)
