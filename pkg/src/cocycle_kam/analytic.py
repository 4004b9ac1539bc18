"""Real-analytic functions on the torus as truncated Fourier series.

Coefficients are the single source of truth.  Nonlinear pointwise maps are
evaluated on a real collocation grid and transformed back (for an analytic
map the resulting coefficients are exact up to aliasing of modes beyond the
grid, which decays like the function's own tail).  Every object carries
``err``: an upper bound for the sup-norm on the strip of width ``h`` of
everything that was discarded by truncation, so that ``norm_upper`` stays a
certified bound of the represented function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import mpmath
import numpy as np

from .arithmetic import (ContinuedFraction, DiophantineParams, SelectedSubsequence,
                         frac_mul, signed_frac_mul)
from .errors import OutsideStrip, ResonantFrequency

TWO_PI = 2.0 * np.pi
DEFAULT_L = 64
DEFAULT_H = 0.5
LOWER_SAMPLES = 512
# roundoff floor, relative to the magnitude of the operands of a computation
CHOP_REL = 1e-14


def _grid_size(L: int, factor: int = 4) -> int:
    n = factor * L
    return max(16, 1 << (n - 1).bit_length())


def _modes(L: int) -> np.ndarray:
    return np.arange(-L, L + 1)


def _weights(L: int, hp: float) -> np.ndarray:
    return np.exp(TWO_PI * np.abs(_modes(L)) * hp)


def _to_grid(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Values at x_j = j/n of sum_l c_l e^{2 pi i l x}; coeffs along the last axis."""
    L = (coeffs.shape[-1] - 1) // 2
    buf = np.zeros(coeffs.shape[:-1] + (n,), dtype=complex)
    if n < 2 * L + 1:  # coarse grid: fold the modes (exact sampling, aliased spectrum)
        for i, l in enumerate(range(-L, L + 1)):
            buf[..., l % n] += coeffs[..., i]
        return np.fft.ifft(buf, axis=-1) * n
    buf[..., :L + 1] = coeffs[..., L:]
    if L:
        buf[..., n - L:] = coeffs[..., :L]
    return np.fft.ifft(buf, axis=-1) * n


def _from_grid(values: np.ndarray, L: int, h: float,
               noise_scale: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients |l| <= L from grid values plus the per-slice tail bound at strip h.

    Coefficients below the roundoff floor ``CHOP_REL * noise_scale`` are
    discarded as evaluation noise before anything is weighted by e^{2 pi |l| h}.
    """
    n = values.shape[-1]
    if n < 2 * L + 1:
        raise ValueError("grid too coarse for the requested degree")
    if noise_scale is None:
        noise_scale = float(np.abs(values).max()) if values.size else 0.0
    c = np.fft.fft(values, axis=-1) / n
    c[np.abs(c) <= CHOP_REL * noise_scale] = 0
    out = np.concatenate([c[..., n - L:], c[..., :L + 1]], axis=-1) if L else c[..., :1]
    half = n // 2
    ks = np.arange(L + 1, half)
    tail = np.zeros(values.shape[:-1])
    if ks.size:
        with np.errstate(over="ignore", invalid="ignore"):
            w = np.exp(TWO_PI * ks * h)
            hi = np.abs(c[..., L + 1:half])
            lo = np.abs(c[..., n - L - 1:n - half:-1])
            tail = np.where(hi > 0, hi * w, 0).sum(axis=-1) + np.where(lo > 0, lo * w, 0).sum(axis=-1)
    return out, tail


def chop(coeffs: np.ndarray, noise_scale: float) -> np.ndarray:
    """Zero the coefficients that sit below the roundoff floor of a computation of size noise_scale."""
    c = np.array(coeffs, dtype=complex)
    c[np.abs(c) <= CHOP_REL * noise_scale] = 0
    return c


@dataclass(frozen=True, eq=False)
class AnalyticFunction:
    """f(z) = sum_{|l| <= L} c_l e^{2 pi i l z}, regarded on the strip |Im z| < h."""

    coeffs: np.ndarray
    h: float = DEFAULT_H
    real_symmetric: bool = True
    err: float = 0.0
    __array_ufunc__ = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 1 or c.size % 2 == 0:
            raise ValueError("coefficient array must have odd length 2L+1")
        object.__setattr__(self, "coeffs", c)

    # construction -----------------------------------------------------------------
    @classmethod
    def constant(cls, c, L: int = DEFAULT_L, h: float = DEFAULT_H) -> "AnalyticFunction":
        coeffs = np.zeros(2 * L + 1, dtype=complex)
        coeffs[L] = c
        return cls(coeffs, h, real_symmetric=bool(np.imag(c) == 0))

    @classmethod
    def from_modes(cls, modes: dict[int, complex], L: int = DEFAULT_L, h: float = DEFAULT_H,
                   real_symmetric: bool = True) -> "AnalyticFunction":
        coeffs = np.zeros(2 * L + 1, dtype=complex)
        for l, c in modes.items():
            coeffs[l + L] += c
        return cls(coeffs, h, real_symmetric)

    @classmethod
    def cos(cls, k: int = 1, amp: float = 1.0, L: int = DEFAULT_L, h: float = DEFAULT_H) -> "AnalyticFunction":
        """amp * cos(2 pi k x)."""
        return cls.from_modes({k: amp / 2, -k: amp / 2}, L, h)

    @classmethod
    def sin(cls, k: int = 1, amp: float = 1.0, L: int = DEFAULT_L, h: float = DEFAULT_H) -> "AnalyticFunction":
        return cls.from_modes({k: amp / 2j, -k: -amp / 2j}, L, h)

    @classmethod
    def from_grid(cls, values: np.ndarray, L: int, h: float, real_symmetric: bool = True,
                  noise_scale: float | None = None) -> "AnalyticFunction":
        """From values at x_j = j/n; noise_scale sets the roundoff floor (default: max |values|)."""
        c, tail = _from_grid(np.asarray(values, dtype=complex), L, h, noise_scale)
        f = cls(c, h, real_symmetric, float(tail))
        return f.symmetrized() if real_symmetric else f

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], L: int = DEFAULT_L,
                      h: float = DEFAULT_H, real_symmetric: bool = True, n_grid: int | None = None) -> "AnalyticFunction":
        n = n_grid or _grid_size(L, 8)
        x = np.arange(n) / n
        return cls.from_grid(fn(x), L, h, real_symmetric)

    # basic properties ---------------------------------------------------------------
    @property
    def L(self) -> int:
        return (self.coeffs.size - 1) // 2

    def coeff(self, l: int) -> complex:
        return complex(self.coeffs[l + self.L]) if abs(l) <= self.L else 0j

    @property
    def mean(self) -> complex:
        return complex(self.coeffs[self.L])

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z)
        ph = np.exp(2j * np.pi * np.multiply.outer(z, _modes(self.L)))
        return ph @ self.coeffs

    def grid_values(self, n: int | None = None) -> np.ndarray:
        return _to_grid(self.coeffs, n or _grid_size(self.L))

    def angle_grid_values(self, n: int | None = None) -> tuple[np.ndarray, int]:
        """Grid values of an angle with the integer part of its mean removed, and that integer.

        Large lifts (Birkhoff sums) lose absolute precision pointwise; subtracting the
        integer in coefficient space is exact and keeps the values accurate modulo 1.
        """
        k = int(np.round(self.coeffs[self.L].real))
        c = self.coeffs.copy()
        c[self.L] -= k
        return _to_grid(c, n or _grid_size(self.L)), k

    def boundary_values(self, hp: float, n: int = LOWER_SAMPLES) -> np.ndarray:
        """Samples on the two circles Im z = +hp and Im z = -hp."""
        n = max(n, 2 * self.L + 1)
        ls = _modes(self.L)
        up = _to_grid(self.coeffs * np.exp(-TWO_PI * ls * hp), n)
        down = _to_grid(self.coeffs * np.exp(TWO_PI * ls * hp), n)
        return np.concatenate([up, down])

    # norms ------------------------------------------------------------------------
    def _check_strip(self, hp: float):
        if hp > self.h * (1 + 1e-12) or hp < 0:
            raise OutsideStrip("outside strip")

    def norm_upper(self, hp: float | None = None) -> float:
        """Certified bound sum |c_l| e^{2 pi |l| hp} (+ truncation budget)."""
        hp = self.h if hp is None else hp
        self._check_strip(hp)
        return float(np.abs(self.coeffs) @ _weights(self.L, hp)) + self.err

    def norm_lower(self, hp: float | None = None, n: int = LOWER_SAMPLES) -> float:
        hp = self.h if hp is None else hp
        self._check_strip(hp)
        return float(np.abs(self.boundary_values(hp, n)).max())

    def norm_strip(self, hp: float | None = None) -> tuple[float, float]:
        return self.norm_upper(hp), self.norm_lower(hp)

    def osc(self) -> "AnalyticFunction":
        """f - mean(f)."""
        c = self.coeffs.copy()
        c[self.L] = 0
        return self._with(c)

    # arithmetic -------------------------------------------------------------------
    def _with(self, coeffs, h=None, real_symmetric=None, err=None) -> "AnalyticFunction":
        return AnalyticFunction(coeffs, self.h if h is None else h,
                                self.real_symmetric if real_symmetric is None else real_symmetric,
                                self.err if err is None else err)

    def with_L(self, L: int) -> "AnalyticFunction":
        if L == self.L:
            return self
        if L > self.L:
            c = np.zeros(2 * L + 1, dtype=complex)
            c[L - self.L:L + self.L + 1] = self.coeffs
            return self._with(c)
        c = self.coeffs[self.L - L:self.L + L + 1]
        dropped = np.concatenate([self.coeffs[:self.L - L], self.coeffs[self.L + L + 1:]])
        w = np.concatenate([_weights(self.L, self.h)[:self.L - L], _weights(self.L, self.h)[self.L + L + 1:]])
        return self._with(c.copy(), err=self.err + float(np.abs(dropped) @ w))

    def with_h(self, h: float) -> "AnalyticFunction":
        """Regard the same coefficients on another strip (the tail budget is rescaled conservatively)."""
        err = self.err if h <= self.h else self.err * math.exp(TWO_PI * (self.L + 1) * (h - self.h))
        return self._with(self.coeffs, h=h, err=err)

    def symmetrized(self) -> "AnalyticFunction":
        c = self.coeffs
        return self._with(0.5 * (c + np.conj(c[::-1])), real_symmetric=True)

    def real_symmetry_defect(self) -> float:
        c = self.coeffs
        return float(np.abs(c - np.conj(c[::-1])).max())

    def _coerce(self, other) -> "AnalyticFunction":
        if isinstance(other, AnalyticFunction):
            if other.L != self.L:
                other = other.with_L(self.L)
            return other
        return AnalyticFunction.constant(other, self.L, self.h)

    def __add__(self, other):
        o = self._coerce(other)
        return AnalyticFunction(self.coeffs + o.coeffs, min(self.h, o.h),
                                self.real_symmetric and o.real_symmetric, self.err + o.err)

    __radd__ = __add__

    def __neg__(self):
        return self._with(-self.coeffs)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, AnalyticFunction):
            return multiply(self, other)
        c = complex(other)
        return AnalyticFunction(self.coeffs * c, self.h, self.real_symmetric and c.imag == 0,
                                self.err * abs(c))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / other)

    def derivative(self) -> "AnalyticFunction":
        """d/dx (tail budget is not propagated; used for diagnostics only)."""
        return self._with(self.coeffs * (2j * np.pi * _modes(self.L)), err=0.0)

    def map(self, fn: Callable[[np.ndarray], np.ndarray], real_symmetric: bool | None = None,
            n_grid: int | None = None) -> "AnalyticFunction":
        """Pointwise analytic map x -> fn(f(x)) via collocation."""
        n = n_grid or _grid_size(self.L, 8)
        rs = self.real_symmetric if real_symmetric is None else real_symmetric
        return AnalyticFunction.from_grid(fn(self.grid_values(n)), self.L, self.h, rs)

    def shift(self, beta) -> "AnalyticFunction":
        return shift(self, beta)

    def birkhoff_sum(self, alpha, n: int) -> "AnalyticFunction":
        return birkhoff_sum(self, alpha, n)

    # serialization ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"h": self.h, "L": self.L, "real_symmetric": self.real_symmetric, "err": self.err,
                "coeffs": [[float(c.real), float(c.imag)] for c in self.coeffs]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticFunction":
        c = np.array([complex(re, im) for re, im in d["coeffs"]])
        if c.size != 2 * int(d["L"]) + 1:
            raise ValueError("coefficient list does not match L")
        return cls(c, float(d["h"]), bool(d["real_symmetric"]), float(d.get("err", 0.0)))


def multiply(f: AnalyticFunction, g: AnalyticFunction) -> AnalyticFunction:
    """Product by exact discrete convolution, re-truncated to degree L with the tail budgeted."""
    g = f._coerce(g)
    L = f.L
    full = np.convolve(f.coeffs, g.coeffs)  # modes -2L..2L
    h = min(f.h, g.h)
    # direct convolution is accurate termwise, so the dropped modes are budgeted unchopped
    kept = chop(full[L:3 * L + 1], float(np.abs(f.coeffs).sum() * np.abs(g.coeffs).sum()))
    dropped = np.concatenate([full[:L], full[3 * L + 1:]])
    w = np.exp(TWO_PI * np.abs(np.concatenate([np.arange(-2 * L, -L), np.arange(L + 1, 2 * L + 1)])) * h)
    nf, ng = f.norm_upper(h) - f.err, g.norm_upper(h) - g.err
    err = float(np.abs(dropped) @ w) + nf * g.err + ng * f.err + f.err * g.err
    return AnalyticFunction(kept, h, f.real_symmetric and g.real_symmetric, err)


def norm_strip(f: AnalyticFunction, h_prime: float) -> tuple[float, float]:
    """(certified upper bound, boundary-sample lower bound) of sup |f| on the strip of width h_prime."""
    return f.norm_strip(h_prime)


def shift(f: AnalyticFunction, beta) -> AnalyticFunction:
    """x -> f(x + beta): c_l -> c_l e^{2 pi i l beta}."""
    L = f.L
    if isinstance(beta, (int, np.integer)) and beta == 0:
        return f
    phases = np.array([frac_mul(beta, l) if l >= 0 else -frac_mul(beta, -l) for l in range(-L, L + 1)]) \
        if not isinstance(beta, float) else np.mod(beta * _modes(L), 1.0)
    return f._with(f.coeffs * np.exp(2j * np.pi * phases))


def _phases(alpha, ls: np.ndarray, n: int = 1) -> np.ndarray:
    """Signed fractional parts of n * l * alpha for each l, accurate for large n and tiny values."""
    return np.array([signed_frac_mul(alpha, int(n) * int(l)) for l in ls])


def _one_minus_e(theta: np.ndarray) -> np.ndarray:
    """1 - exp(2 pi i theta) without cancellation for small theta."""
    return -2j * np.sin(np.pi * theta) * np.exp(1j * np.pi * theta)


def birkhoff_sum(f: AnalyticFunction, alpha, n: int) -> AnalyticFunction:
    """S_n f = sum_{k<n} f(. + k alpha), in closed form on the coefficients."""
    if n < 1:
        raise ValueError("n must be >= 1")
    L = f.L
    if n == 1:
        return f
    pos = np.arange(1, L + 1)
    th1 = _phases(alpha, pos)
    if np.any(th1 == 0.0):
        raise ResonantFrequency("resonant frequency")
    thn = _phases(alpha, pos, n)
    num = _one_minus_e(thn)
    den = _one_minus_e(th1)
    factor_pos = num / den
    mult = np.empty(2 * L + 1, dtype=complex)
    mult[L] = n
    mult[L + 1:] = factor_pos
    mult[:L] = np.conj(factor_pos[::-1])
    return f._with(f.coeffs * mult, err=f.err * n)


def direct_birkhoff_values(f: AnalyticFunction, alpha, n: int, x: np.ndarray) -> np.ndarray:
    """Oracle: sum_{k<n} f(x + k alpha) by explicit summation at the points x."""
    total = np.zeros(np.shape(x), dtype=complex)
    for k in range(n):
        total += f((x + frac_mul(alpha, k)) % 1.0)
    return total


@dataclass
class DenjoyReport:
    ratios_Q: list[float] = field(default_factory=list)
    ratios_l: list[float] = field(default_factory=list)
    ks: list[int] = field(default_factory=list)
    strips: list[float] = field(default_factory=list)
    measured_Q: list[float] = field(default_factory=list)
    measured_l: list[float] = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        vals = [r for r in self.ratios_Q + self.ratios_l if np.isfinite(r)]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {"k": self.ks, "h_k": self.strips, "ratio_Q": self.ratios_Q, "ratio_l": self.ratios_l,
                "measured_Q": self.measured_Q, "measured_l": self.measured_l, "C_empirical": self.max_ratio}


def _pow(x: int, e: float) -> float:
    if x <= 0:
        return 0.0
    v = e * math.log(x)
    return 0.0 if v < -745 else (math.inf if v > 709 else math.exp(v))


def _l_samples(cf: ContinuedFraction, upto: int, count: int = 48) -> list[int]:
    s = set(range(1, min(upto, 16) + 1))
    s.update(q for q in cf.q if 1 <= q <= upto)
    if upto > 16:
        # log-spaced samples; upto may be far beyond float range
        for t in np.linspace(math.log(16), math.log(upto), count):
            s.add(int(mpmath.nint(mpmath.exp(mpmath.mpf(float(t))))) if t > 700 else int(round(math.exp(t))))
    s.add(upto)
    return sorted(x for x in s if 1 <= x <= upto)


def verify_denjoy_bounds(f: AnalyticFunction, cf: ContinuedFraction, seq: SelectedSubsequence,
                         params: DiophantineParams, h: float, eta: float) -> DenjoyReport:
    """Empirical constants in the Birkhoff-sum growth bounds along the special denominators.

    For each k >= 1, at h_k = h (1 - eta/k^2): the ratio of the measured
    ``||S_{Q_k} f - Q_k f^(0)||`` to ``||f - f^(0)||_h (Q_k^-M + Qbar_k^(-1+1/M))``,
    and the maximum over sampled l <= Q_{k+1} of ``||S_l f - l f^(0)||`` against
    ``||f - f^(0)||_h (Qbar_k Q_k^-M + Qbar_k^(1/M))``.
    """
    M = params.M
    report = DenjoyReport()
    base = f.osc()
    scale = base.norm_upper(h)
    alpha = cf.alpha
    for k in range(1, len(seq.Q)):
        Qk, Qbk = seq.Q[k], seq.Qbar[k]
        hk = h * (1 - eta / k ** 2)
        report.ks.append(k)
        report.strips.append(hk)
        meas = birkhoff_sum(base, alpha, Qk).norm_upper(hk) if Qk > 1 else base.norm_upper(hk)
        theory = scale * (_pow(Qk, -M) + _pow(Qbk, -1 + 1 / M))
        report.measured_Q.append(meas)
        report.ratios_Q.append(meas / theory if theory > 0 else (0.0 if meas == 0 else math.inf))
        if k + 1 < len(seq.Q):
            best = 0.0
            for l in _l_samples(cf, seq.Q[k + 1]):
                best = max(best, birkhoff_sum(base, alpha, l).norm_upper(hk))
            theory_l = scale * (Qbk * _pow(Qk, -M) + _pow(Qbk, 1 / M))
            report.measured_l.append(best)
            report.ratios_l.append(best / theory_l if theory_l > 0 else (0.0 if best == 0 else math.inf))
    return report


def _opnorms(mats: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack (..., 2, 2) of complex matrices."""
    if mats.size == 0:
        return np.zeros(mats.shape[:-2])
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


@dataclass(frozen=True, eq=False)
class MatrixFunction:
    """2x2 matrix of trigonometric polynomials sharing the degree L and strip h.

    ``coeffs`` has shape (2, 2, 2L+1).  The certified norm is
    sum_l ||M_l||_op e^{2 pi |l| h'} (coefficient matrices in operator norm),
    which dominates the sup over the strip of the pointwise operator norm and
    is exact for constant matrices.
    """

    coeffs: np.ndarray
    h: float = DEFAULT_H
    real_symmetric: bool = True
    err: float = 0.0
    __array_ufunc__ = None  # let numpy arrays defer to our operators

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 3 or c.shape[:2] != (2, 2) or c.shape[2] % 2 == 0:
            raise ValueError("matrix coefficients must have shape (2, 2, 2L+1)")
        object.__setattr__(self, "coeffs", c)

    # construction -----------------------------------------------------------------
    @classmethod
    def from_entries(cls, a, b, c, d, L: int | None = None, h: float | None = None) -> "MatrixFunction":
        ents = [a, b, c, d]
        funcs = [e for e in ents if isinstance(e, AnalyticFunction)]
        L = L if L is not None else (max(f.L for f in funcs) if funcs else DEFAULT_L)
        h = h if h is not None else (min(f.h for f in funcs) if funcs else DEFAULT_H)
        fs = [(e.with_L(L) if isinstance(e, AnalyticFunction) else AnalyticFunction.constant(e, L, h)) for e in ents]
        coeffs = np.stack([f.coeffs for f in fs]).reshape(2, 2, 2 * L + 1)
        err = math.sqrt(sum(f.err ** 2 for f in fs))
        return cls(coeffs, h, all(f.real_symmetric for f in fs), err)

    @classmethod
    def constant(cls, M, L: int = DEFAULT_L, h: float = DEFAULT_H) -> "MatrixFunction":
        M = np.asarray(M, dtype=complex)
        coeffs = np.zeros((2, 2, 2 * L + 1), dtype=complex)
        coeffs[:, :, L] = M
        return cls(coeffs, h, bool(np.all(M.imag == 0)))

    @classmethod
    def identity(cls, L: int = DEFAULT_L, h: float = DEFAULT_H) -> "MatrixFunction":
        return cls.constant(np.eye(2), L, h)

    @classmethod
    def from_grid(cls, values: np.ndarray, L: int, h: float, real_symmetric: bool = True,
                  noise_scale: float | None = None) -> "MatrixFunction":
        """From pointwise values of shape (n, 2, 2) at x_j = j/n."""
        v = np.moveaxis(np.asarray(values, dtype=complex), 0, -1)
        c, tail = _from_grid(v, L, h, noise_scale)
        m = cls(c, h, real_symmetric, _l2(tail))
        return m.symmetrized() if real_symmetric else m

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], L: int = DEFAULT_L, h: float = DEFAULT_H,
                      real_symmetric: bool = True, n_grid: int | None = None) -> "MatrixFunction":
        n = n_grid or _grid_size(L, 8)
        return cls.from_grid(fn(np.arange(n) / n), L, h, real_symmetric)

    @classmethod
    def rotation(cls, theta: AnalyticFunction, n_grid: int | None = None) -> "MatrixFunction":
        """x -> R_{theta(x)}, rotation by the angle 2 pi theta(x) (theta in turns)."""
        n = n_grid or _grid_size(theta.L, 8)
        t, _ = theta.angle_grid_values(n)
        return cls.from_grid(rotation_matrices(t), theta.L, theta.h, theta.real_symmetric)

    # basic properties ---------------------------------------------------------------
    @property
    def L(self) -> int:
        return (self.coeffs.shape[2] - 1) // 2

    def entry(self, i: int, j: int) -> AnalyticFunction:
        return AnalyticFunction(self.coeffs[i, j].copy(), self.h, self.real_symmetric, self.err)

    def mean(self) -> np.ndarray:
        return self.coeffs[:, :, self.L].copy()

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z)
        ph = np.exp(2j * np.pi * np.multiply.outer(z, _modes(self.L)))
        return np.einsum("...l,ijl->...ij", ph, self.coeffs)

    def grid_values(self, n: int | None = None) -> np.ndarray:
        """Values at x_j = j/n, shape (n, 2, 2)."""
        return np.moveaxis(_to_grid(self.coeffs, n or _grid_size(self.L)), -1, 0)

    def boundary_values(self, hp: float, n: int = LOWER_SAMPLES) -> np.ndarray:
        n = max(n, 2 * self.L + 1)
        ls = _modes(self.L)
        up = _to_grid(self.coeffs * np.exp(-TWO_PI * ls * hp), n)
        down = _to_grid(self.coeffs * np.exp(TWO_PI * ls * hp), n)
        return np.moveaxis(np.concatenate([up, down], axis=-1), -1, 0)

    def strip_values(self, hp: float, n: int | None = None, levels: int = 5) -> np.ndarray:
        """Samples on several horizontal lines Im z in [-hp, hp]; shape (levels*n, 2, 2)."""
        n = n or max(LOWER_SAMPLES, 2 * self.L + 1)
        ls = _modes(self.L)
        out = [np.moveaxis(_to_grid(self.coeffs * np.exp(-TWO_PI * ls * y), n), -1, 0)
               for y in np.linspace(-hp, hp, levels)]
        return np.concatenate(out)

    # norms ------------------------------------------------------------------------
    def _check_strip(self, hp: float):
        if hp > self.h * (1 + 1e-12) or hp < 0:
            raise OutsideStrip("outside strip")

    def norm_upper(self, hp: float | None = None) -> float:
        hp = self.h if hp is None else hp
        self._check_strip(hp)
        return float(_opnorms(np.moveaxis(self.coeffs, -1, 0)) @ _weights(self.L, hp)) + self.err

    def norm_lower(self, hp: float | None = None, n: int = LOWER_SAMPLES) -> float:
        hp = self.h if hp is None else hp
        self._check_strip(hp)
        return float(_opnorms(self.boundary_values(hp, n)).max())

    def norm_strip(self, hp: float | None = None) -> tuple[float, float]:
        return self.norm_upper(hp), self.norm_lower(hp)

    def grid_sup(self, n: int = 256) -> float:
        """Max pointwise operator norm on the real grid (diagnostic)."""
        return float(_opnorms(self.grid_values(n)).max())

    # arithmetic -------------------------------------------------------------------
    def _with(self, coeffs, h=None, real_symmetric=None, err=None) -> "MatrixFunction":
        return MatrixFunction(coeffs, self.h if h is None else h,
                              self.real_symmetric if real_symmetric is None else real_symmetric,
                              self.err if err is None else err)

    def with_L(self, L: int) -> "MatrixFunction":
        if L == self.L:
            return self
        if L > self.L:
            c = np.zeros((2, 2, 2 * L + 1), dtype=complex)
            c[:, :, L - self.L:L + self.L + 1] = self.coeffs
            return self._with(c)
        keep = slice(self.L - L, self.L + L + 1)
        mask = np.ones(2 * self.L + 1, dtype=bool)
        mask[keep] = False
        dropped = _opnorms(np.moveaxis(self.coeffs[:, :, mask], -1, 0)) @ _weights(self.L, self.h)[mask]
        return self._with(self.coeffs[:, :, keep].copy(), err=self.err + float(dropped))

    def with_h(self, h: float) -> "MatrixFunction":
        err = self.err if h <= self.h else self.err * math.exp(TWO_PI * (self.L + 1) * (h - self.h))
        return self._with(self.coeffs, h=h, err=err)

    def symmetrized(self) -> "MatrixFunction":
        c = self.coeffs
        return self._with(0.5 * (c + np.conj(c[:, :, ::-1])), real_symmetric=True)

    def real_symmetry_defect(self) -> float:
        c = self.coeffs
        return float(np.abs(c - np.conj(c[:, :, ::-1])).max())

    def _coerce(self, other) -> "MatrixFunction":
        if isinstance(other, MatrixFunction):
            return other.with_L(self.L) if other.L != self.L else other
        other = np.asarray(other)
        if other.shape == ():
            other = other * np.eye(2)
        return MatrixFunction.constant(other, self.L, self.h)

    def __add__(self, other):
        o = self._coerce(other)
        return MatrixFunction(self.coeffs + o.coeffs, min(self.h, o.h),
                              self.real_symmetric and o.real_symmetric, self.err + o.err)

    __radd__ = __add__

    def __neg__(self):
        return self._with(-self.coeffs)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, AnalyticFunction):
            return self.map_grid2(other, lambda m, s: m * s[:, None, None])
        c = complex(other)
        return MatrixFunction(self.coeffs * c, self.h, self.real_symmetric and c.imag == 0, self.err * abs(c))

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, MatrixFunction):
            return matmul(self, other)
        M = np.asarray(other, dtype=complex)
        c = np.einsum("ijl,jk->ikl", self.coeffs, M)
        return MatrixFunction(c, self.h, self.real_symmetric and bool(np.all(M.imag == 0)),
                              self.err * float(np.linalg.norm(M, 2)))

    def __rmatmul__(self, other):
        M = np.asarray(other, dtype=complex)
        c = np.einsum("ij,jkl->ikl", M, self.coeffs)
        return MatrixFunction(c, self.h, self.real_symmetric and bool(np.all(M.imag == 0)),
                              self.err * float(np.linalg.norm(M, 2)))

    def adjugate(self) -> "MatrixFunction":
        """[[d, -b], [-c, a]]: the inverse whenever det = 1."""
        c = self.coeffs
        adj = np.empty_like(c)
        adj[0, 0], adj[0, 1], adj[1, 0], adj[1, 1] = c[1, 1], -c[0, 1], -c[1, 0], c[0, 0]
        return self._with(adj)

    inv_sl2 = adjugate

    def transpose(self) -> "MatrixFunction":
        return self._with(np.transpose(self.coeffs, (1, 0, 2)).copy())

    def trace(self) -> AnalyticFunction:
        return AnalyticFunction(self.coeffs[0, 0] + self.coeffs[1, 1], self.h, self.real_symmetric, 2 * self.err)

    def det(self) -> AnalyticFunction:
        n = _grid_size(self.L, 4)
        g = self.grid_values(n)
        d = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        return _det_with_budget(self, d, self.norm_upper())

    def shift(self, beta) -> "MatrixFunction":
        if isinstance(beta, (int, np.integer)) and beta == 0:
            return self
        L = self.L
        if isinstance(beta, float):
            phases = np.mod(beta * _modes(L), 1.0)
        else:
            phases = np.array([frac_mul(beta, l) if l >= 0 else -frac_mul(beta, -l) for l in range(-L, L + 1)])
        return self._with(self.coeffs * np.exp(2j * np.pi * phases))

    def map_grid(self, fn: Callable[[np.ndarray], np.ndarray], n_grid: int | None = None,
                 real_symmetric: bool | None = None) -> "MatrixFunction":
        """Pointwise map of the values (n, 2, 2) -> (n, 2, 2) by collocation."""
        n = n_grid or _grid_size(self.L, 8)
        rs = self.real_symmetric if real_symmetric is None else real_symmetric
        return MatrixFunction.from_grid(fn(self.grid_values(n)), self.L, self.h, rs)

    def map_grid2(self, f: AnalyticFunction, fn, n_grid: int | None = None) -> "MatrixFunction":
        n = n_grid or _grid_size(self.L, 8)
        out = MatrixFunction.from_grid(fn(self.grid_values(n), f.with_L(self.L).grid_values(n)), self.L,
                                       min(self.h, f.h), self.real_symmetric and f.real_symmetric)
        return out._with(out.coeffs, err=out.err + self.err * f.norm_upper(out.h) + f.err * self.norm_upper(out.h))

    # serialization ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {"h": self.h, "L": self.L, "real_symmetric": self.real_symmetric, "err": self.err,
                "entries": [[AnalyticFunction(self.coeffs[i, j], self.h, self.real_symmetric).to_dict()
                             for j in range(2)] for i in range(2)]}

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixFunction":
        ents = [[AnalyticFunction.from_dict(d["entries"][i][j]) for j in range(2)] for i in range(2)]
        coeffs = np.array([[e.coeffs for e in row] for row in ents])
        return cls(coeffs, float(d["h"]), bool(d["real_symmetric"]), float(d.get("err", 0.0)))


def _det_with_budget(m: MatrixFunction, d: np.ndarray, nrm: float) -> AnalyticFunction:
    f = AnalyticFunction.from_grid(d, m.L, m.h, m.real_symmetric)
    return f._with(f.coeffs, err=f.err + 2 * nrm * m.err + m.err ** 2)


def _l2(v: np.ndarray) -> float:
    """Overflow-safe Euclidean norm of a (possibly inf-weighted) array."""
    v = np.abs(np.asarray(v)).ravel()
    if v.size == 0:
        return 0.0
    m = float(v.max())
    if m == 0.0 or not math.isfinite(m):
        return m
    return m * float(np.sqrt(((v / m) ** 2).sum()))


def rotation_matrices(theta: np.ndarray) -> np.ndarray:
    """Stack of R_theta = [[cos 2 pi t, -sin 2 pi t], [sin 2 pi t, cos 2 pi t]] for each t."""
    theta = np.asarray(theta)
    # integer turns are exact symmetries; removing them keeps cos/sin accurate for large lifts
    theta = theta - np.round(theta.real)
    c, s = np.cos(TWO_PI * theta), np.sin(TWO_PI * theta)
    out = np.empty(theta.shape + (2, 2), dtype=np.result_type(c, float))
    out[..., 0, 0], out[..., 0, 1], out[..., 1, 0], out[..., 1, 1] = c, -s, s, c
    return out


def matmul(A: MatrixFunction, B: MatrixFunction, noise_factor: float = 1.0) -> MatrixFunction:
    """Product of matrix functions: exact convolution via a grid of size >= 3L+1, re-truncated to L.

    ``noise_factor`` scales the roundoff floor below which coefficients are dropped; long
    products (many accumulated factors) carry proportionally more roundoff.
    """
    B = A._coerce(B)
    L = A.L
    n = _grid_size(L, 4)
    ga = A.grid_values(n)
    gb = B.grid_values(n)
    prod = np.moveaxis(ga @ gb, 0, -1)
    h = min(A.h, B.h)
    scale = float(_opnorms(ga).max() * _opnorms(gb).max()) * noise_factor
    c, tail = _from_grid(prod, L, h, scale)
    # all modes up to 2L are resolved exactly on this grid, so 'tail' is the true truncation loss
    na, nb = A.norm_upper(h) - A.err, B.norm_upper(h) - B.err
    err = _l2(tail) + na * B.err + nb * A.err + A.err * B.err
    return MatrixFunction(c, h, A.real_symmetric and B.real_symmetric, err)
