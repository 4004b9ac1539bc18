import math
from fractions import Fraction

import mpmath
import pytest

from cocycle_kam.arithmetic import (ContinuedFraction, DiophantineParams, RationalOrExhausted,
                                    alpha_from_json, alpha_to_json, certificate_depth, check_rho_condition,
                                    check_selection, expand_cf, frac_mul, is_cd_bridge, parse_alpha,
                                    select_Q, signed_frac_mul, torus_norm)
from cocycle_kam.errors import ArithmeticConditionError


def brute_best_q(alpha: Fraction, upto: int) -> list[int]:
    """Denominators q <= upto that beat every smaller denominator in ||q alpha||."""
    out, best = [], None
    for q in range(1, upto + 1):
        d = abs(q * alpha - round(q * alpha))
        if best is None or d < best:
            out.append(q)
            best = d
    return out


class TestExpansion:
    def test_golden_is_fibonacci(self, golden):
        cf = expand_cf(golden, 100)
        assert cf.q[:11] == [1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89]
        assert set(cf.partial_quotients) == {1}

    def test_sqrt2(self):
        cf = expand_cf(parse_alpha("expr:sqrt2"), 30)
        assert cf.q[:5] == [1, 2, 5, 12, 29]
        assert set(cf.partial_quotients) == {2}

    def test_rational_input_stops_with_partial(self):
        with pytest.raises(RationalOrExhausted) as err:
            expand_cf(Fraction(1, 3), 100)
        assert err.value.partial.partial_quotients == (3,)
        assert "rational or precision exhausted" in str(err.value)

    def test_float_precision_runs_out(self):
        # a double carries ~53 bits; it cannot certify denominators near 1e12
        with pytest.raises(RationalOrExhausted):
            expand_cf(0.6180339887498949, 10 ** 12)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
    def test_alpha_outside_unit_interval(self, alpha):
        with pytest.raises(ValueError):
            expand_cf(alpha, 10)

    def test_recurrences_and_determinant(self, golden_cf):
        p, q, a = golden_cf.p, golden_cf.q, golden_cf.partial_quotients
        assert (p[0], q[0]) == (0, 1)
        for k in range(2, golden_cf.depth + 1):
            assert q[k] == a[k - 1] * q[k - 1] + q[k - 2]
            assert p[k] == a[k - 1] * p[k - 1] + p[k - 2]
        for k in range(1, golden_cf.depth + 1):
            assert p[k] * q[k - 1] - p[k - 1] * q[k] == (-1) ** (k - 1)

    def test_best_denominators_match_brute_force(self):
        alpha = Fraction(314159265358979, 10 ** 15)
        cf = expand_cf(alpha, 5000)
        qs = sorted(set(q for q in cf.q if q <= 5000))
        assert qs == brute_best_q(alpha, 5000)

    def test_liouville_quotients_exact(self, liouville_cf):
        assert liouville_cf.partial_quotients[:6] == (1, 20, 1, 2000, 1, 2_000_000)
        assert liouville_cf.q[:7] == [1, 1, 21, 22, 44021, 44043, 88086044021]
        # the expansion of the stored alpha reproduces the quotient prefix
        again = expand_cf(liouville_cf.alpha, 10 ** 11)
        assert again.partial_quotients[:6] == liouville_cf.partial_quotients[:6]

    def test_small_remainders(self, liouville_cf):
        for k in range(1, 7):
            assert abs(signed_frac_mul(liouville_cf.alpha, liouville_cf.q[k])) < 1 / liouville_cf.q[k + 1]


class TestTorusArithmetic:
    @pytest.mark.parametrize("x, expected", [(0.3, 0.3), (0.7, 0.3), (-1.5, 0.5), (2.0, 0.0)])
    def test_torus_norm(self, x, expected):
        assert torus_norm(x) == pytest.approx(expected, abs=1e-15)

    def test_frac_mul_large_multiplier(self, golden):
        m = 10 ** 40 + 7
        with mpmath.workprec(600):
            ref = m * golden
            ref = float(ref - mpmath.floor(ref))
        assert frac_mul(golden, m) == pytest.approx(ref, abs=1e-15)

    def test_signed_frac_mul_keeps_tiny_values(self, liouville_cf):
        q = liouville_cf.q[6]
        v = signed_frac_mul(liouville_cf.alpha, q)
        with mpmath.workprec(1000):
            exact = q * liouville_cf.alpha
            exact = float(exact - mpmath.nint(exact))
        assert v == pytest.approx(exact, rel=1e-12)
        assert abs(v) < 1 / liouville_cf.q[7]

    def test_alpha_json_round_trip(self, golden, liouville_cf):
        for a in (golden, liouville_cf.alpha, 0.25):
            back = alpha_from_json(alpha_to_json(a))
            assert back == a


class TestDiophantineParams:
    def test_derived_constants(self):
        p = DiophantineParams(2.0, 0.4, 0.1)
        assert p.M == pytest.approx(max(4 * 3.0, 2 / (1 - 2 * 0.45)))
        assert p.a == pytest.approx(2 / p.M)
        assert p.b == pytest.approx(p.M / 2)
        assert p.calA == pytest.approx(2 * p.M)

    @pytest.mark.parametrize("args", [(0, 0.4, 0.1), (2, 0.5, 0.1), (2, 0.4, 0)])
    def test_rejects_bad_parameters(self, args):
        with pytest.raises(ValueError):
            DiophantineParams(*args)


class TestRhoCondition:
    def test_zero_rotation_fails_first(self, golden_cf):
        assert check_rho_condition(golden_cf, 0.0, DiophantineParams(2.0, 0.4, 0.1), 5) == (False, 0)

    def test_quarter_fails_at_two(self, golden_cf):
        assert check_rho_condition(golden_cf, 0.25, DiophantineParams(2.0, 0.4, 0.1), 5) == (False, 2)

    def test_oracle(self, golden_cf):
        p = DiophantineParams(2.0, 0.4, 0.01)
        rho = 0.2260362596
        depth = certificate_depth(golden_cf, 10 ** 6)
        q = golden_cf.q
        expected_fail = next((i for i in range(depth + 1)
                              if not torus_norm(2 * q[i] * rho) > p.eps * max(q[i + 1] ** -p.nu, q[i] ** -p.tau)),
                             None)
        ok, fail = check_rho_condition(golden_cf, rho, p, depth)
        assert ok == (expected_fail is None)
        assert fail == expected_fail


class TestSelection:
    def test_insufficient_depth(self):
        cf = ContinuedFraction.from_quotients([2], tail_ones=False)
        with pytest.raises(ArithmeticConditionError, match="insufficient depth"):
            select_Q(cf, DiophantineParams(2.0, 0.4, 0.1))

    def test_liouville_selection_valid(self, liouville_cf):
        seq = select_Q(liouville_cf, 1.5)
        assert seq.Q[0] == 1
        assert check_selection(liouville_cf, seq) == []

    def test_bridge_predicate(self):
        # (q_l, q_n) with q_l^C >= q_n >= q_l^B and no intermediate jump
        cf = ContinuedFraction.from_quotients([1] * 40, tail_ones=False)
        q = cf.q
        assert is_cd_bridge(q, 5, 12, 2.0, 1.0, 8.0) == all(
            q[i + 1] <= q[i] ** 2.0 for i in range(5, 12)) and q[5] ** 8 >= q[12] >= q[5]
