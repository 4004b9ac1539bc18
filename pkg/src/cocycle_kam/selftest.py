"""Fast sanity suite built from closed-form cases (used by ``cocycle-kam selftest``).

Every check is exact or has an elementary closed-form answer; the suite is
meant to catch broken builds, not to measure accuracy.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .analytic import AnalyticFunction, MatrixFunction, birkhoff_sum, norm_strip, shift, verify_denjoy_bounds
from .arithmetic import (ContinuedFraction, DiophantineParams, RationalOrExhausted, check_rho_condition,
                         expand_cf, parse_alpha, select_Q, torus_norm)
from .cocycle import (Cocycle, RotationForm, compose_rotation_forms, iterate, lyapunov, rotation_number,
                      schrodinger, to_rotation_form)
from .errors import CocycleKamError, KamError
from .kam import (I2, KamConfig, ct_commuting, ct_step, elliptic_normalize, reduce_to_rotations)

L, H = 16, 0.5
GOLDEN = parse_alpha("expr:golden")


def _close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def _raises(fn, text: str, exc=Exception):
    try:
        fn()
    except exc as e:
        assert text in str(e), f"wrong error: {e}"
        return
    raise AssertionError(f"expected an error containing {text!r}")


def _const_rotation(theta):
    return MatrixFunction.rotation(AnalyticFunction.constant(theta, L, H))


# ----------------------------------------------------------------------------- arithmetic

def cf_golden():
    cf = expand_cf(GOLDEN, 100)
    assert list(cf.q[:11]) == [1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89]
    assert set(cf.partial_quotients) == {1}


def cf_sqrt2():
    cf = expand_cf(parse_alpha("expr:sqrt2"), 30)
    assert list(cf.q[:5]) == [1, 2, 5, 12, 29]
    assert set(cf.partial_quotients) == {2}


def cf_rational():
    try:
        expand_cf(parse_alpha("0.3333333333333333333333333333333333333333"), 10 ** 6)
    except RationalOrExhausted as e:
        assert e.partial.partial_quotients[0] == 3
        return
    raise AssertionError("expected rational-or-exhausted")


def torus_norm_values():
    _close(torus_norm(0.3), 0.3, 1e-15)
    _close(torus_norm(0.7), 0.3, 1e-15)
    _close(torus_norm(-1.5), 0.5, 1e-15)


def select_shallow():
    cf = ContinuedFraction.from_quotients([2], tail_ones=False)
    _raises(lambda: select_Q(cf, DiophantineParams(2.0, 0.4, 0.1)), "insufficient depth")


def rho_condition_trivial():
    cf = expand_cf(GOLDEN, 1000)
    p = DiophantineParams(2.0, 0.4, 0.1)
    assert check_rho_condition(cf, 0.0, p, 5) == (False, 0)
    assert check_rho_condition(cf, 0.25, p, 5) == (False, 2)


# ----------------------------------------------------------------------------- analytic

def norms_closed_form():
    up, lo = norm_strip(AnalyticFunction.constant(0.7, L, H), 0.2)
    _close(up, 0.7, 1e-14)
    _close(lo, 0.7, 1e-14)
    up, lo = norm_strip(AnalyticFunction.cos(1, 1.0, L, H), 0.2)
    _close(up, math.exp(2 * math.pi * 0.2), 1e-12)
    assert lo >= math.cosh(2 * math.pi * 0.2) - 1e-12


def shift_values():
    f = AnalyticFunction.cos(1, 1.0, L, H)
    assert np.allclose(shift(f, 0.0).coeffs, f.coeffs)
    assert np.allclose(shift(f, 0.5).coeffs, -f.coeffs, atol=1e-15)
    g = AnalyticFunction.from_modes({1: 1.0}, L, H, real_symmetric=False)
    _close(abs(shift(g, 0.25).coeff(1) - 1j), 0.0, 1e-15)


def birkhoff_trivial():
    c = AnalyticFunction.constant(0.4, L, H)
    _close(birkhoff_sum(c, GOLDEN, 7).mean.real, 2.8, 1e-14)
    f = AnalyticFunction.cos(1, 1.0, L, H) + 0.2
    assert np.allclose(birkhoff_sum(f, GOLDEN, 1).coeffs, f.coeffs, atol=1e-15)


def denjoy_constant():
    cf = expand_cf(GOLDEN, 10 ** 6)
    p = DiophantineParams(2.0, 0.4, 0.1)
    rep = verify_denjoy_bounds(AnalyticFunction.constant(1.3, L, H), cf, select_Q(cf, p), p, 0.4, 0.01)
    assert all(r == 0 for r in rep.ratios_Q + rep.ratios_l)


# ----------------------------------------------------------------------------- cocycle

def schrodinger_trivial():
    z = AnalyticFunction.constant(0.0, L, H)
    assert np.allclose(schrodinger(z, 0.0, GOLDEN).A.mean(), [[0, -1], [1, 0]])
    rho0 = 0.3
    A = schrodinger(z, 2 * math.cos(2 * math.pi * rho0), GOLDEN).A.mean().real
    _close(np.trace(A), 2 * math.cos(2 * math.pi * rho0), 1e-14)


def iterate_trivial():
    c = Cocycle(GOLDEN, _const_rotation(0.1))
    assert np.allclose(iterate(c, 1).coeffs, c.A.coeffs)
    assert np.allclose(iterate(c, 7).coeffs, _const_rotation(0.7).coeffs, atol=1e-13)


def compose_trivial():
    phi = AnalyticFunction.cos(1, 0.01, L, H) + 0.2
    zero = MatrixFunction.constant(np.zeros((2, 2)), L, H)
    form, _ = compose_rotation_forms([RotationForm(phi, zero)], H / 2)
    assert np.allclose(form.phi.coeffs, phi.coeffs) and form.xi.norm_upper(H / 2) == 0.0


def rotation_number_trivial():
    est = rotation_number(Cocycle(GOLDEN, _const_rotation(0.3)), 2000)
    _close(est.rho, 0.3, 1e-8)
    z = AnalyticFunction.constant(0.0, L, H)
    est = rotation_number(schrodinger(z, 2 * math.cos(2 * math.pi * 0.3), GOLDEN), 2000)
    _close(torus_norm(est.rho - 0.3), 0.0, 1e-6)


def lyapunov_trivial():
    _close(lyapunov(Cocycle(GOLDEN, _const_rotation(0.3)), 500).value, 0.0, 1e-6)
    D = MatrixFunction.constant(np.diag([2.0, 0.5]), L, H)
    _close(lyapunov(Cocycle(GOLDEN, D), 2000).value, math.log(2), 1e-4)


def rotation_form_trivial():
    phi = AnalyticFunction.cos(1, 0.01, L, H) + 0.2
    assert to_rotation_form(MatrixFunction.rotation(phi), phi).xi.norm_upper(0.3) < 1e-13
    xi = to_rotation_form(_const_rotation(0.25), AnalyticFunction.constant(0.0, L, H)).xi
    _close(xi.norm_upper(0.3), math.sqrt(2), 1e-12)


# ----------------------------------------------------------------------------- kam

def elliptic_trivial():
    theta = AnalyticFunction.constant(0.2, L, H)
    res = elliptic_normalize(_const_rotation(0.2), theta)
    assert res.iterations == 0 and (res.B - I2).norm_upper(0.3) == 0.0
    hyper = MatrixFunction.constant(np.diag([3.0, 1 / 3.0]), L, H)
    _raises(lambda: elliptic_normalize(hyper, AnalyticFunction.constant(0.0, L, H)), "not in elliptic domain")


def ct_trivial():
    cfg = KamConfig(L=L, h=0.4)
    phi = AnalyticFunction.constant(0.3, L, H)
    B, _, _, rep = ct_step(0.01, MatrixFunction.rotation(phi), phi, 0.1, 0.4, cfg)
    assert (B - I2).norm_upper(0.3) == 0.0 and rep["xi_out"] == 0.0
    near0 = AnalyticFunction.constant(1e-9, L, H)
    _raises(lambda: ct_step(0.01, MatrixFunction.rotation(near0), near0, 0.1, 0.4, cfg),
            "CT preconditions violated", KamError)


def commuting_trivial():
    cfg = KamConfig(L=L, h=0.4)
    A = _const_rotation(0.3)
    Ab = iterate(Cocycle(GOLDEN, A), 8)
    phi, _, _ = ct_commuting(MatrixFunction.identity(L, H), GOLDEN, A, AnalyticFunction.constant(0.3, L, H),
                             0.1, 0.4, cfg, bar_alpha=0.01, bar_A=Ab)
    _close(phi.mean.real, 0.3, 1e-12)
    bad = _const_rotation(0.3) + MatrixFunction.constant(np.array([[0.0, 0.01], [0.0, 0.0]]), L, H)
    _raises(lambda: ct_commuting(MatrixFunction.identity(L, H), GOLDEN, A,
                                 AnalyticFunction.constant(0.3, L, H), 0.1, 0.4, cfg,
                                 bar_alpha=0.01, bar_A=bad @ MatrixFunction.constant(np.diag([1.2, 1 / 1.2]), L, H)),
            "not commuting", KamError)


def reduce_constant():
    c = Cocycle(GOLDEN, _const_rotation(0.3))
    r = reduce_to_rotations(c, KamConfig(L=L))
    assert r.status == "converged" and (r.B - I2).norm_upper(0.2) == 0.0
    _close(r.phi.mean.real, 0.3, 1e-12)


# ----------------------------------------------------------------------------- experiments

def rho_free_closed_form():
    z = AnalyticFunction.constant(0.0, L, H)
    for E in (-1.5, 0.0, 1.1):
        rho = rotation_number(schrodinger(z, E, GOLDEN), 1000).rho
        _close(torus_norm(rho - math.acos(E / 2) / (2 * math.pi)), 0.0, 1e-8)


def shuffled_grid():
    from .experiments import check_rho_monotone
    _raises(lambda: check_rho_monotone(AnalyticFunction.constant(0.0, L, H), GOLDEN, [0.1, -0.3, 0.5]),
            "increasing", ValueError)


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("cf golden", cf_golden), ("cf sqrt2", cf_sqrt2), ("cf rational", cf_rational),
    ("torus norm", torus_norm_values), ("selection depth", select_shallow),
    ("rho condition", rho_condition_trivial), ("strip norms", norms_closed_form),
    ("shift", shift_values), ("birkhoff", birkhoff_trivial), ("denjoy constant", denjoy_constant),
    ("schrodinger", schrodinger_trivial), ("iterate", iterate_trivial), ("compose", compose_trivial),
    ("rotation number", rotation_number_trivial), ("lyapunov", lyapunov_trivial),
    ("rotation form", rotation_form_trivial), ("elliptic", elliptic_trivial), ("ct step", ct_trivial),
    ("ct commuting", commuting_trivial), ("reduce constant", reduce_constant),
    ("free rho", rho_free_closed_form), ("shuffled grid", shuffled_grid),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    """Run every check; returns (name, passed, message) triples."""
    out = []
    for name, fn in CHECKS:
        try:
            fn()
        except (AssertionError, CocycleKamError, ValueError, ArithmeticError) as e:
            out.append((name, False, f"{type(e).__name__}: {e}"))
        else:
            out.append((name, True, ""))
    return out
