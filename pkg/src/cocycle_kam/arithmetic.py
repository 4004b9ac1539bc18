"""Continued fractions, best denominators and the arithmetic conditions on (alpha, rho).

Denominators are exact Python integers.  Frequencies are carried as
``mpmath.mpf`` values so that ``q * alpha mod 1`` stays accurate for the
large denominators that Liouville-type quotient lists produce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import mpmath

from .errors import ArithmeticConditionError

DEFAULT_PREC_BITS = 256


class RationalOrExhausted(ArithmeticConditionError):
    """Raised when the Gauss-map iteration stops before ``max_q`` is reached."""

    def __init__(self, message: str, partial: "ContinuedFraction"):
        super().__init__(message)
        self.partial = partial


def torus_norm(x) -> float:
    """Distance from ``x`` to the nearest integer."""
    if isinstance(x, Fraction):
        r = x - math.floor(x)
        return float(min(r, 1 - r))
    if isinstance(x, mpmath.mpf):
        r = x - mpmath.floor(x)
        return float(min(r, 1 - r))
    r = float(x) % 1.0
    return min(r, 1.0 - r)


def mpf_bits(x) -> int:
    """Mantissa length of an mpf (its effective precision)."""
    man = x._mpf_[1]
    return max(53, int(man).bit_length())


def _frac_mul(alpha, m: int, signed: bool) -> float:
    # the reduction is done before rounding to float, so tiny values keep full relative precision
    if isinstance(alpha, mpmath.mpf):
        with mpmath.workprec(mpf_bits(alpha) + int(abs(m)).bit_length() + 64):
            v = m * alpha
            r = v - (mpmath.floor(v + mpmath.mpf(0.5)) if signed else mpmath.floor(v))
            return float(r)
    v = Fraction(alpha) * m
    return float(v - (math.floor(v + Fraction(1, 2)) if signed else math.floor(v)))


def frac_mul(alpha, m: int) -> float:
    """``m * alpha mod 1`` in [0, 1), exact for floats and at mpf precision otherwise."""
    r = _frac_mul(alpha, m, False)
    return 0.0 if r == 1.0 else r


def signed_frac_mul(alpha, m: int) -> float:
    """Representative of ``m * alpha`` modulo 1 in [-1/2, 1/2)."""
    return _frac_mul(alpha, m, True)


def parse_alpha(spec: str, prec_bits: int = DEFAULT_PREC_BITS):
    """Parse a CLI frequency: a decimal literal, ``expr:golden`` or ``expr:sqrt2``.

    Decimal literals keep exactly the precision implied by the number of
    digits given; the ``expr:`` forms are evaluated at ``prec_bits``.
    """
    spec = spec.strip()
    with mpmath.workprec(prec_bits):
        if spec == "expr:golden":
            return (mpmath.sqrt(5) - 1) / 2
        if spec == "expr:sqrt2":
            return mpmath.sqrt(2) - 1
        if spec.startswith("expr:"):
            raise ValueError(f"unknown frequency expression {spec!r}")
        return mpmath.mpf(spec)


def alpha_to_json(alpha) -> dict:
    """Lossless text form of a frequency (decimal digits plus working precision)."""
    if isinstance(alpha, mpmath.mpf):
        bits = mpf_bits(alpha)
        digits = int(math.ceil(bits * math.log10(2))) + 3
        return {"value": mpmath.nstr(alpha, digits, strip_zeros=False), "prec_bits": bits}
    return {"value": repr(float(alpha)), "prec_bits": 53}


def alpha_from_json(d) -> object:
    if isinstance(d, (int, float)):
        return float(d)
    if int(d.get("prec_bits", 53)) <= 53:
        return float(d["value"])
    with mpmath.workprec(int(d["prec_bits"]) + 8):
        return mpmath.mpf(d["value"])


@dataclass(frozen=True)
class ContinuedFraction:
    """Partial quotients a_1..a_K and exact convergents p_k/q_k, k = 0..K, of alpha."""

    alpha: object
    partial_quotients: tuple[int, ...]
    convergents: tuple[tuple[int, int], ...]
    exhausted: bool = False
    exact: bool = False
    note: str = ""

    @property
    def depth(self) -> int:
        return len(self.partial_quotients)

    @property
    def q(self) -> list[int]:
        return [c[1] for c in self.convergents]

    @property
    def p(self) -> list[int]:
        return [c[0] for c in self.convergents]

    def alpha_float(self) -> float:
        return float(self.alpha)

    def gauss_iterate(self, k: int) -> float:
        """alpha_k, rebuilt from the tail of the partial quotients (approximate)."""
        tail = self.partial_quotients[k:]
        with mpmath.workprec(128):
            x = mpmath.mpf(0)
            for a in reversed(tail):
                x = 1 / (a + x)
            return float(x)

    def to_dict(self) -> dict:
        return {
            "alpha": mpmath.nstr(self.alpha, 40) if isinstance(self.alpha, mpmath.mpf) else repr(self.alpha),
            "quotients": list(self.partial_quotients),
            "convergents": [[p, q] for p, q in self.convergents],
            "exhausted": self.exhausted,
            "exact": self.exact,
            "note": self.note,
        }

    @classmethod
    def from_quotients(cls, quotients: Sequence[int], max_q: int | None = None,
                       tail_ones: bool = True) -> "ContinuedFraction":
        """Exact-mode expansion from an explicit quotient list.

        The list is a prefix; when ``tail_ones`` the expansion continues with
        a_k = 1 (a golden-mean tail), which both makes alpha irrational and lets
        the expansion be extended until q_k exceeds ``max_q``.
        """
        quotients = [int(a) for a in quotients]
        if any(a < 1 for a in quotients):
            raise ValueError("partial quotients must be positive integers")
        conv = [(0, 1)]
        pm2, qm2 = 1, 0  # p_{-1}, q_{-1}
        pm1, qm1 = 0, 1
        a_list: list[int] = []

        def push(a: int):
            nonlocal pm2, qm2, pm1, qm1
            p, q = a * pm1 + pm2, a * qm1 + qm2
            pm2, qm2, pm1, qm1 = pm1, qm1, p, q
            a_list.append(a)
            conv.append((p, q))

        for a in quotients:
            push(a)
        if tail_ones and max_q is not None:
            while conv[-1][1] <= max_q:
                push(1)
        q_last = max(conv[-1][1], 2)
        prec = 128 + 4 * q_last.bit_length()
        with mpmath.workprec(prec):
            x = (mpmath.sqrt(5) - 1) / 2 if tail_ones else mpmath.mpf(0)
            for a in reversed(a_list):
                x = 1 / (a + x)
            alpha = +x
        note = "golden tail appended after the given prefix" if tail_ones else "finite quotient list"
        return cls(alpha=alpha, partial_quotients=tuple(a_list), convergents=tuple(conv),
                   exhausted=False, exact=True, note=note)


def _input_precision(alpha) -> int:
    if isinstance(alpha, mpmath.mpf):
        return mpf_bits(alpha)
    if isinstance(alpha, float):
        return 53
    return DEFAULT_PREC_BITS


def expand_cf(alpha, max_q: int, prec_bits: int | None = None,
              input_prec_bits: int | None = None) -> ContinuedFraction:
    """Continued fraction expansion of ``alpha`` in (0, 1), truncated at the first q_k > max_q.

    Every quotient is validated with a propagated error interval: a_k is only
    emitted when floor(1/alpha_{k-1}) is the same at both ends of the
    uncertainty interval of alpha_{k-1}.  Otherwise :class:`RationalOrExhausted`
    is raised carrying the partial expansion.
    """
    if max_q < 1:
        raise ValueError("max_q must be >= 1")
    if isinstance(alpha, Fraction):
        return _expand_fraction(alpha, max_q)
    p_in = input_prec_bits if input_prec_bits is not None else _input_precision(alpha)
    work = prec_bits if prec_bits is not None else max(p_in + 64, 128)
    with mpmath.workprec(work):
        x = mpmath.mpf(alpha)
        if not (0 < x < 1):
            raise ValueError("alpha must lie in (0, 1)")
        err = abs(x) * mpmath.ldexp(1, -p_in)
        conv = [(0, 1)]
        pm2, qm2, pm1, qm1 = 1, 0, 0, 1
        quotients: list[int] = []
        def stop():
            cf = ContinuedFraction(alpha=mpmath.mpf(alpha), partial_quotients=tuple(quotients),
                                   convergents=tuple(conv), exhausted=True)
            raise RationalOrExhausted("rational or precision exhausted", cf)

        while True:
            lo, hi = x - err, x + err
            if lo <= 0:
                stop()
            a = int(mpmath.floor(1 / x))
            a_lo = int(mpmath.floor(1 / hi))
            a_hi = int(mpmath.floor(1 / lo))
            x_new = 1 / x - a
            # |d(1/x)| = dx / x^2
            err_new = err / (lo * lo) + abs(x_new) * mpmath.ldexp(1, -work + 4)
            if a_lo != a_hi:
                # 1/alpha_{k-1} is an integer within precision: the expansion
                # terminates (rational) with the rounded quotient
                if min(x_new, 1 - x_new) <= err_new and a_lo >= 1:
                    a = int(mpmath.nint(1 / x))
                    p, q = a * pm1 + pm2, a * qm1 + qm2
                    if q <= max_q:
                        quotients.append(a)
                        conv.append((p, q))
                stop()
            p, q = a * pm1 + pm2, a * qm1 + qm2
            if q > max_q:
                break
            pm2, qm2, pm1, qm1 = pm1, qm1, p, q
            quotients.append(a)
            conv.append((p, q))
            x, err = x_new, err_new
            if x <= 0:
                stop()
        return ContinuedFraction(alpha=mpmath.mpf(alpha), partial_quotients=tuple(quotients),
                                 convergents=tuple(conv))


def _expand_fraction(alpha: Fraction, max_q: int) -> ContinuedFraction:
    """Exact Gauss map for a rational alpha; terminates with RationalOrExhausted."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    x = alpha
    pm2, qm2, pm1, qm1 = 1, 0, 0, 1
    quotients: list[int] = []
    conv = [(0, 1)]
    while x != 0:
        a = math.floor(1 / x)
        p, q = a * pm1 + pm2, a * qm1 + qm2
        if q > max_q:
            return ContinuedFraction(alpha=alpha, partial_quotients=tuple(quotients), convergents=tuple(conv))
        pm2, qm2, pm1, qm1 = pm1, qm1, p, q
        quotients.append(a)
        conv.append((p, q))
        x = 1 / x - a
    cf = ContinuedFraction(alpha=alpha, partial_quotients=tuple(quotients), convergents=tuple(conv),
                           exhausted=True, exact=True)
    raise RationalOrExhausted("rational or precision exhausted", cf)


@dataclass(frozen=True)
class DiophantineParams:
    """(tau, nu, eps) and the quantities derived from them."""

    tau: float
    nu: float
    eps: float
    M_override: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.nu < 0.5:
            raise ValueError("nu must lie in (0, 1/2)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def tau_bar(self) -> float:
        return self.tau + 1.0

    @property
    def nu_bar(self) -> float:
        return (self.nu + 0.5) / 2.0

    @property
    def M(self) -> float:
        if self.M_override is not None:
            return float(self.M_override)
        return max(4.0 * self.tau_bar, 2.0 / (1.0 - 2.0 * self.nu_bar))

    @property
    def a(self) -> float:
        return 2.0 / self.M

    @property
    def b(self) -> float:
        return self.M / 2.0

    @property
    def calA(self) -> float:
        return 2.0 * self.M


@dataclass(frozen=True)
class SelectedSubsequence:
    """Special denominators Q_k = q_{n_k} and Qbar_k = q_{n_k + 1}."""

    indices: tuple[int, ...]
    Q: tuple[int, ...]
    Qbar: tuple[int, ...]
    calA: float
    M: float
    truncated: bool = False

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "Q": [str(x) if x > 2**53 else x for x in self.Q],
                "Qbar": [str(x) if x > 2**53 else x for x in self.Qbar],
                "calA": self.calA, "M": self.M, "truncated": self.truncated}


def _log(q: int) -> float:
    return math.log(q) if q > 0 else float("-inf")


def pow_le(x: int, e: float, y: int) -> bool:
    """x**e <= y for positive integers x, y and real e >= 0, exact where affordable."""
    if x == 1:
        return y >= 1
    if float(e).is_integer() and e * x.bit_length() < 200_000:
        return x ** int(e) <= y
    lhs, rhs = e * _log(x), _log(y)
    return lhs <= rhs * (1 + 1e-15) + 1e-12


def pow_ge(x: int, e: float, y: int) -> bool:
    """x**e >= y."""
    if x == 1:
        return y <= 1
    if float(e).is_integer() and e * x.bit_length() < 200_000:
        return x ** int(e) >= y
    lhs, rhs = e * _log(x), _log(y)
    return lhs >= rhs * (1 - 1e-15) - 1e-12


def is_cd_bridge(q: Sequence[int], l: int, n: int, A: float, B: float, C: float) -> bool:
    """(q_l, q_n) is a CD(A, B, C) bridge."""
    if n < l:
        return False
    for i in range(l, n):
        if not pow_ge(q[i], A, q[i + 1]):
            return False
    return pow_ge(q[l], C, q[n]) and pow_le(q[l], B, q[n])


def select_Q(cf: ContinuedFraction, params: DiophantineParams | float) -> SelectedSubsequence:
    """Constructive selection of the special denominators with calA = 2M.

    From Q_k, take the smallest q_n > Q_k followed by a jump q_{n+1} > q_n^calA.
    If q_n <= Qbar_k^(calA^4) it becomes Q_{k+1}; otherwise a chain of CD(calA,
    calA, calA^3) bridges is inserted from Qbar_k up to q_n, choosing greedily
    the largest admissible denominator at each link.  When no jump exists
    within the available depth the chain runs to the end of the expansion and
    the result is flagged ``truncated``.
    """
    M = params.M if isinstance(params, DiophantineParams) else float(params)
    A = 2.0 * M
    A3, A4 = A ** 3, A ** 4
    q = cf.q
    K = cf.depth
    if K < 2:
        raise ArithmeticConditionError("insufficient depth")
    # jumps[i]: q_{i+1} > q_i^A
    jumps = [not pow_ge(q[i], A, q[i + 1]) for i in range(K)]
    prefix = [0]
    for j in jumps:
        prefix.append(prefix[-1] + j)

    def link_ok(c: int, d: int) -> bool:
        # growth part of both bridges: no jump in [c, d-1]
        if d <= c + 1 or prefix[d] - prefix[c] != 0:
            return False
        return (pow_ge(q[c], A3, q[d]) and pow_le(q[c], A, q[d])
                and pow_ge(q[c + 1], A3, q[d]) and pow_le(q[c + 1], A, q[d]))

    idx = [0]
    truncated = False
    while idx[-1] + 1 <= K - 1:
        nk = idx[-1]
        Qk, Qbar = q[nk], q[nk + 1]
        if Qbar == 1:
            # a_1 = 1: no bridge can leave q = 1, so q_1 itself is taken; its
            # Qbar = q_2 >= 1 = q_1^calA satisfies the first alternative.
            idx.append(nk + 1)
            continue
        target = next((n for n in range(nk + 1, K) if q[n] > Qk and jumps[n]), None)
        if target is not None and pow_ge(Qbar, A4, q[target]):
            idx.append(target)
            continue
        c = nk + 1
        chain: list[int] = []
        while True:
            if target is not None and link_ok(c, target):
                chain.append(target)
                break
            limit = (target - 1) if target is not None else (K - 1)
            best = None
            for d in range(c + 2, limit + 1):
                if not pow_ge(q[c], A3, q[d]):
                    break
                if link_ok(c, d) and (target is None or pow_le(q[d], A, q[target])):
                    best = d
            if best is None:
                break
            chain.append(best)
            c = best
        idx.extend(chain)
        if target is None or not chain or chain[-1] != target:
            truncated = True
            break
    return SelectedSubsequence(indices=tuple(idx), Q=tuple(q[i] for i in idx),
                               Qbar=tuple(q[i + 1] for i in idx), calA=A, M=M,
                               truncated=truncated)


def check_selection(cf: ContinuedFraction, seq: SelectedSubsequence) -> list[str]:
    """Independent re-validation of a selection; returns the list of violations."""
    q = cf.q
    A = seq.calA
    A3, A4 = A ** 3, A ** 4
    bad: list[str] = []
    if not seq.Q or seq.Q[0] != 1 or seq.indices[0] != 0:
        bad.append("Q_0 != 1")
    for k, n in enumerate(seq.indices):
        if q[n] != seq.Q[k] or q[n + 1] != seq.Qbar[k]:
            bad.append(f"k={k}: Q/Qbar do not match the convergents")
    if any(b <= a for a, b in zip(seq.indices, seq.indices[1:])):
        bad.append("indices not strictly increasing")
    for k in range(len(seq.Q) - 1):
        if not pow_ge(seq.Qbar[k], A4, seq.Q[k + 1]):
            bad.append(f"k={k}: Q_(k+1) > Qbar_k^(calA^4)")
    for k in range(1, len(seq.Q)):
        if pow_le(seq.Q[k], A, seq.Qbar[k]):
            continue
        if k + 1 >= len(seq.Q):
            # the last element's forward bridge lies beyond the computed depth
            if not (seq.truncated and is_cd_bridge(q, seq.indices[k - 1] + 1, seq.indices[k], A, A, A3)):
                bad.append(f"k={k}: dichotomy fails (last element)")
            continue
        left = is_cd_bridge(q, seq.indices[k - 1] + 1, seq.indices[k], A, A, A3)
        right = is_cd_bridge(q, seq.indices[k], seq.indices[k + 1], A, A, A3)
        if not (left and right):
            bad.append(f"k={k}: dichotomy fails")
    return bad


def check_rho_condition(cf: ContinuedFraction, rho, params: DiophantineParams,
                        depth: int) -> tuple[bool, int | None]:
    """Finite-depth certificate ``||2 q_i rho|| > eps max(q_{i+1}^-nu, q_i^-tau)`` for i <= depth."""
    if depth > cf.depth - 1:
        raise ValueError("depth exceeds cf.depth - 1")
    q = cf.q
    r = rho if isinstance(rho, (mpmath.mpf, Fraction)) else Fraction(float(rho))
    for i in range(depth + 1):
        lhs = torus_norm(2 * q[i] * r)
        rhs = params.eps * max(float(q[i + 1]) ** -params.nu, float(q[i]) ** -params.tau)
        if not lhs > rhs:
            return False, i
    return True, None


def certificate_depth(cf: ContinuedFraction, q_max: int) -> int:
    """Largest i <= cf.depth - 1 with q_i <= q_max."""
    q = cf.q
    i = 0
    while i + 1 <= cf.depth - 1 and q[i + 1] <= q_max:
        i += 1
    return i
