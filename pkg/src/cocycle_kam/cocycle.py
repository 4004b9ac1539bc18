"""Analytic SL(2,R) cocycles over an irrational rotation.

Angles are measured in turns throughout: ``R_t`` rotates by 2*pi*t, so the
quarter-turn matrix ((0,-1),(1,0)) is R_{1/4} and has rotation number 1/4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analytic import (AnalyticFunction, MatrixFunction, TWO_PI, _grid_size, birkhoff_sum,
                       matmul, rotation_matrices)
from .arithmetic import (ContinuedFraction, alpha_from_json, alpha_to_json, frac_mul)
from .errors import GrowthOverflow, RotationFormLost, RotationNumberNotResolved

TOL_DET = 1e-8
MAX_ITERATE = 10 ** 6
OVERFLOW_NORM = 1e150


def wrap(t):
    """Representative of t modulo 1 in [-1/2, 1/2)."""
    return (np.asarray(t) + 0.5) % 1.0 - 0.5


def angle(v: np.ndarray) -> np.ndarray:
    """Angle in turns of the vectors v[..., 0:2]."""
    return np.arctan2(v[..., 1], v[..., 0]) / TWO_PI


def homotopy_degree(A: MatrixFunction, n: int = 4096) -> int:
    """Degree of x -> A(x) in pi_1(SL(2,R)) = Z, via the winding of A(x) e_1."""
    g = A.grid_values(n).real
    t = np.unwrap(angle(g[:, :, 0]) * TWO_PI) / TWO_PI
    t_end = t[-1] + wrap(angle(g[:1, :, 0])[0] - t[-1])
    return int(round(t_end - t[0]))


@dataclass(frozen=True, eq=False)
class Cocycle:
    """The skew product (x, w) -> (x + alpha, A(x) w)."""

    alpha: object
    A: MatrixFunction
    homotopy_class: int | None = None
    det_defect: float = field(default=float("nan"))

    def __post_init__(self):
        if not np.isfinite(self.det_defect):
            d = (self.A.det() - 1.0).norm_upper(0.0)
            if d > TOL_DET:
                raise ValueError(f"determinant deviates from 1 by {d:.3g}")
            object.__setattr__(self, "det_defect", d)
        if self.homotopy_class is None:
            object.__setattr__(self, "homotopy_class", homotopy_degree(self.A))

    @property
    def alpha_float(self) -> float:
        return float(self.alpha)

    def conjugate(self, B: MatrixFunction) -> "Cocycle":
        """(alpha, B(. + alpha) A B^{-1})."""
        A2 = B.shift(self.alpha) @ self.A @ B.inv_sl2()
        return Cocycle(self.alpha, A2)

    def to_dict(self) -> dict:
        return {"alpha": alpha_to_json(self.alpha), "A": self.A.to_dict(),
                "homotopy_class": self.homotopy_class, "det_defect": self.det_defect}

    @classmethod
    def from_dict(cls, d: dict) -> "Cocycle":
        return cls(alpha_from_json(d["alpha"]), MatrixFunction.from_dict(d["A"]),
                   d.get("homotopy_class"), float(d.get("det_defect", float("nan"))))


@dataclass(frozen=True, eq=False)
class RotationMatrixFn:
    """x -> R_{theta(x)}."""

    theta: AnalyticFunction

    def matrix(self) -> MatrixFunction:
        return MatrixFunction.rotation(self.theta)

    def __call__(self, x) -> np.ndarray:
        return rotation_matrices(self.theta(x))


@dataclass(frozen=True, eq=False)
class RotationForm:
    """A = R_phi (id + xi)."""

    phi: AnalyticFunction
    xi: MatrixFunction

    def matrix(self) -> MatrixFunction:
        return MatrixFunction.rotation(self.phi) @ (self.xi + np.eye(2))

    def xi_norm(self, hp: float | None = None) -> float:
        return self.xi.norm_upper(hp)

    def reconstruction_residual(self, A: MatrixFunction, hp: float | None = None) -> float:
        return (self.matrix() - A).norm_upper(hp)

    def to_dict(self) -> dict:
        return {"phi": self.phi.to_dict(), "xi": self.xi.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RotationForm":
        return cls(AnalyticFunction.from_dict(d["phi"]), MatrixFunction.from_dict(d["xi"]))


def schrodinger(v: AnalyticFunction, E: float, alpha) -> Cocycle:
    """S_{v,E}(x) = ((E - v(x), -1), (1, 0))."""
    if not v.real_symmetric:
        raise ValueError("potential must be real-symmetric")
    A = MatrixFunction.from_entries(-v + E, -1.0, 1.0, 0.0)
    return Cocycle(alpha, A, homotopy_class=0, det_defect=0.0)


def almost_mathieu_potential(lam: float, L: int = 64, h: float = 0.5) -> AnalyticFunction:
    """v(x) = 2 lambda cos(2 pi x)."""
    return AnalyticFunction.cos(1, 2 * lam, L, h)


def _check_growth(M: MatrixFunction):
    if not np.isfinite(M.coeffs).all() or M.grid_sup(64) > OVERFLOW_NORM:
        raise GrowthOverflow("growth overflow")


def iterate(c: Cocycle, n: int, max_n: int = MAX_ITERATE) -> MatrixFunction:
    """Fibered product A^(n)(x) = A(x + (n-1) alpha) ... A(x), by binary splitting.

    Uses A^(m+k)(x) = A^(k)(x + m alpha) A^(m)(x); negative n via
    A^(-n)(x) = A^(n)(x - n alpha)^{-1}.
    """
    if abs(n) > max_n:
        raise ValueError(f"|n| exceeds the configured maximum {max_n}")
    A = c.A
    if n == 0:
        return MatrixFunction.identity(A.L, A.h)
    if n < 0:
        P = iterate(c, -n, max_n)
        return P.shift(frac_mul(c.alpha, n)).inv_sl2()
    result = None
    done = 0
    power = A  # A^(2^j)
    span = 1
    m = n
    while True:
        if m & 1:
            if result is None:
                result = power
            else:
                result = matmul(power.shift(frac_mul(c.alpha, done)), result,
                                noise_factor=math.sqrt(done + span))
            done += span
            _check_growth(result)
        m >>= 1
        if not m:
            break
        power = matmul(power.shift(frac_mul(c.alpha, span)), power, noise_factor=math.sqrt(2 * span))
        span *= 2
        _check_growth(power)
    return result


def _trimmed(M: MatrixFunction) -> np.ndarray:
    """Coefficients restricted to the modes that are actually present."""
    nz = np.nonzero(np.abs(M.coeffs).max(axis=(0, 1)))[0]
    L = M.L
    k = int(max(abs(nz[0] - L), abs(nz[-1] - L))) if nz.size else 0
    return M.coeffs[:, :, L - k:L + k + 1]


def evaluate_points(M: MatrixFunction, x: np.ndarray) -> np.ndarray:
    """Real values of M at real points x (any shape), shape x.shape + (2, 2)."""
    c = _trimmed(M)
    k = (c.shape[2] - 1) // 2
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    out = np.empty((flat.size, 2, 2))
    chunk = 1 << 15
    for s in range(0, flat.size, chunk):
        ph = np.exp(2j * np.pi * np.multiply.outer(flat[s:s + chunk], np.arange(-k, k + 1)))
        out[s:s + chunk] = np.einsum("pl,ijl->pij", ph, c).real
    return out.reshape(x.shape + (2, 2))


def orbit_points(alpha, x0: np.ndarray, n: int) -> np.ndarray:
    """x0[j] + k alpha mod 1 for k < n, shape (n, len(x0))."""
    a = float(alpha)
    k = np.arange(n, dtype=float)
    return np.mod(x0[None, :] + np.mod(k * a, 1.0)[:, None], 1.0)


def compose_rotation_forms(forms: list[RotationForm], hp: float | None = None) -> tuple[RotationForm, float]:
    """Product F_{l-1} ... F_0 of F_k = R_{phi_k}(id + xi_k) as R_{sum phi_k}(id + xi^(l)).

    Returns the explicit rotation form of the product together with the
    a-priori bound exp(sum_k ||M^(k)||^2 ||xi_k||) - 1, M^(k) = R_{phi_k + ... + phi_0}.
    """
    if not forms:
        raise ValueError("empty product")
    if len(forms) == 1:
        f = forms[0]
        hp = f.phi.h if hp is None else hp
        mk = math.exp(TWO_PI * f.phi.osc().norm_upper(hp))
        return f, math.expm1(mk ** 2 * f.xi_norm(hp))
    hp = min(f.phi.h for f in forms) if hp is None else hp
    psi = forms[0].phi
    P = forms[0].matrix()
    exponent = math.exp(TWO_PI * psi.osc().norm_upper(hp)) ** 2 * forms[0].xi_norm(hp)
    for f in forms[1:]:
        psi = psi + f.phi
        P = f.matrix() @ P
        exponent += math.exp(TWO_PI * psi.osc().norm_upper(hp)) ** 2 * f.xi_norm(hp)
    bound = math.expm1(exponent)
    if bound > 1:
        raise RotationFormLost("rotation form lost")
    return to_rotation_form_matrix(P, psi), bound


def to_rotation_form_matrix(A: MatrixFunction, phi: AnalyticFunction) -> RotationForm:
    """xi = R_{-phi} A - id, evaluated by collocation."""
    n = _grid_size(max(A.L, phi.L), 8)
    ga = A.grid_values(n)
    gp, _ = phi.with_L(A.L).angle_grid_values(n)
    vals = rotation_matrices(-gp) @ ga - np.eye(2)
    scale = float(np.abs(ga).max()) * float(np.exp(TWO_PI * np.abs(gp.imag).max()))
    xi = MatrixFunction.from_grid(vals, A.L, min(A.h, phi.h), A.real_symmetric and phi.real_symmetric,
                                  noise_scale=scale)
    xi = xi._with(xi.coeffs, err=xi.err + A.err * math.exp(TWO_PI * phi.osc().norm_upper(xi.h)))
    return RotationForm(phi.with_L(A.L), xi)


def to_rotation_form(c: Cocycle | MatrixFunction, phi: AnalyticFunction) -> RotationForm:
    A = c.A if isinstance(c, Cocycle) else c
    if not phi.real_symmetric:
        raise ValueError("phi must be real-symmetric")
    return to_rotation_form_matrix(A, phi)


# --------------------------------------------------------------------------- rotation number

@dataclass
class RotationEstimate:
    rho: float
    spread: float
    n_iter: int
    n_fibers: int
    coarse: float | None = None
    accel_q: int | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _smooth_weights(n: int) -> np.ndarray:
    t = (np.arange(n) + 0.5) / n
    w = np.exp(-1.0 / (t * (1.0 - t)))
    return w / w.sum()


class _ReferenceLift:
    """A continuous lift x -> t(x) of the angle of A(x) e_1."""

    def __init__(self, A: MatrixFunction, n: int = 2048):
        g = A.grid_values(n).real
        t = np.unwrap(angle(g[:, :, 0]) * TWO_PI) / TWO_PI
        self.n = n
        self.t = np.append(t, t[0] + round(t[-1] - t[0] + wrap(t[0] - t[-1])))
        if abs(self.t[-1] - self.t[0]) > 0.5:
            raise ValueError("cocycle is not homotopic to a constant")
        self.t[-1] = self.t[0]

    def __call__(self, x: np.ndarray, raw: np.ndarray) -> np.ndarray:
        """Branch of ``raw`` (angles mod 1) nearest to the interpolated lift at x."""
        approx = np.interp(x * self.n, np.arange(self.n + 1), self.t)
        return approx + wrap(raw - approx)


def _increments(A: MatrixFunction, alpha, x0: np.ndarray, n: int, lift: _ReferenceLift,
                w0: np.ndarray | None = None) -> np.ndarray:
    """Lifted projective angle increments along n steps of the orbits starting at (x0, w0)."""
    xs = orbit_points(alpha, x0, n)
    mats = evaluate_points(A, xs)
    ref = lift(xs, angle(mats[..., :, 0]))
    w = np.tile([1.0, 0.0], (x0.size, 1)) if w0 is None else w0.copy()
    inc = np.empty((n, x0.size))
    a0 = angle(w)
    for k in range(n):
        w = np.einsum("pij,pj->pi", mats[k], w)
        a1 = angle(w)
        inc[k] = ref[k] + wrap(a1 - a0 - ref[k])
        w /= np.hypot(w[:, 0], w[:, 1])[:, None]
        a0 = a1
    return inc


def rotation_number_raw(A: MatrixFunction, alpha, n_iter: int = 4000, n_fibers: int = 8,
                        seed_offset: float = 0.0) -> tuple[float, float]:
    """Smoothly weighted Birkhoff average of the lifted increments; (rho mod 1, fiber spread)."""
    lift = _ReferenceLift(A)
    x0 = (np.arange(n_fibers) + seed_offset) / n_fibers
    inc = _increments(A, alpha, x0, n_iter, lift)
    per_fiber = _smooth_weights(n_iter) @ inc
    centre = per_fiber[0]
    per_fiber = centre + wrap(per_fiber - centre)
    rho = float(np.mean(per_fiber))
    spread = float(per_fiber.max() - per_fiber.min())
    return rho % 1.0, spread


def rotation_number(c: Cocycle, n_iter: int = 4000, accel: ContinuedFraction | None = None,
                    n_fibers: int = 8, tol: float | None = None, accel_max_q: int = 64) -> RotationEstimate:
    """Fibered rotation number in turns, with a fiber-spread error indicator.

    When ``accel`` is given the estimate is refined using rho(q alpha, A^(q)) = q rho
    for the largest convergent denominator q <= accel_max_q.
    """
    if c.homotopy_class != 0:
        raise ValueError("rotation number needs a cocycle homotopic to a constant")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    rho, spread = rotation_number_raw(c.A, c.alpha, n_iter, n_fibers)
    est = RotationEstimate(rho, spread, n_iter, n_fibers)
    if accel is not None:
        qs = [q for q in accel.q if 2 <= q <= accel_max_q]
        if qs:
            q = qs[-1]
            Aq = iterate(c, q)
            rq, sq = rotation_number_raw(Aq, frac_mul(c.alpha, q), n_iter, n_fibers)
            m = round(q * rho - rq)
            refined = ((rq + m) / q) % 1.0
            if sq / q <= spread and abs(wrap(refined - rho)) <= max(spread, 1e-12) + 1.0 / (2 * q):
                est = RotationEstimate(refined, sq / q, n_iter, n_fibers, coarse=rho, accel_q=q)
    if tol is not None and est.spread > tol:
        raise RotationNumberNotResolved(f"rotation number not resolved (spread {est.spread:.3g})")
    return est


# --------------------------------------------------------------------------- Lyapunov exponent

@dataclass
class LyapunovEstimate:
    value: float
    value_half: float
    n_iter: int
    n_theta: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lyapunov(c: Cocycle, n_iter: int = 5000, n_theta: int = 32) -> LyapunovEstimate:
    """(1/n) * mean over fibers of log ||A^(n)(x)||, by renormalized pointwise products."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    x0 = np.arange(n_theta) / n_theta
    xs = orbit_points(c.alpha, x0, n_iter)
    mats = evaluate_points(c.A, xs)
    P = np.tile(np.eye(2), (n_theta, 1, 1))
    logs = np.zeros(n_theta)
    half = max(1, n_iter // 2)
    at_half = None
    for k in range(n_iter):
        P = mats[k] @ P
        s = np.sqrt((P ** 2).sum(axis=(1, 2)))
        logs += np.log(s)
        P /= s[:, None, None]
        if k + 1 == half:
            at_half = (logs + np.log(np.linalg.norm(P, 2, axis=(1, 2)))).mean() / half
    final = (logs + np.log(np.linalg.norm(P, 2, axis=(1, 2)))).mean() / n_iter
    return LyapunovEstimate(max(0.0, float(final)), max(0.0, float(at_half)), n_iter, n_theta)


def birkhoff_rotation(phi: AnalyticFunction, alpha, n: int) -> AnalyticFunction:
    """Rotation part S_n phi of the n-th iterate of a cocycle of rotations R_phi."""
    return birkhoff_sum(phi, alpha, n)
