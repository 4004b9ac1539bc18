"""Reduction of near-rotation cocycles to cocycles of rotations.

The scheme alternates two moves.  Iterating the cocycle along a good
denominator q gives (abar, Abar) = (q alpha, A^(q)) whose base shift abar is
tiny; a cocycle with a tiny shift is pointwise almost a constant, so
normalizing each Abar(x) to a rotation and re-conjugating contracts the
non-rotation part geometrically (``ct_step``).  Since (alpha, A) commutes with
(abar, Abar), the same conjugacy brings (alpha, A) close to rotations as well,
and its exact rotation part is read off by a symmetrization (``ct_commuting``).

Every conjugacy is applied as an honest product of matrix functions, so the
defining identities B(x + a) A(x) B(x)^{-1} = A'(x) hold up to truncation and
are re-checked on a grid after each move.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .analytic import (AnalyticFunction, MatrixFunction, TWO_PI, _grid_size, _to_grid, birkhoff_sum,
                       rotation_matrices)
from .arithmetic import (ContinuedFraction, DiophantineParams, RationalOrExhausted,
                         SelectedSubsequence, alpha_from_json, alpha_to_json, check_rho_condition,
                         expand_cf, frac_mul, select_Q, signed_frac_mul, torus_norm)
from .cocycle import (Cocycle, RotationForm, angle, iterate, rotation_number,
                      to_rotation_form_matrix, wrap)
from .errors import CocycleKamError, KamError

J = np.array([[0.0, -1.0], [1.0, 0.0]])
I2 = np.eye(2)
CHECK_GRID = 256


# --------------------------------------------------------------------------- configuration

@dataclass
class KamConfig:
    """Parameters of a reduction run.

    The constants of the scheme (C0..C3, eps0, T) exist only asymptotically;
    here they are explicit numbers.  With ``adaptive`` the inner-loop
    lengths and the choice of denominators are driven by measured
    contraction, and ``admit_eps`` replaces eps0 as the closeness threshold.
    """

    h: float = 0.25
    h_star: float = 0.05
    eps: float = 0.01
    tau: float = 2.0
    nu: float = 0.4
    M_override: float | None = None
    L: int = 64
    tol_residual: float = 1e-9
    max_outer: int = 8
    c0: float = 1.0
    c1: float = 1.6e5
    c2: float = 16.0
    c3: float = 1.0
    eps0: float = 1e-4
    T_threshold: int = 1000
    D: float = 2.0
    adaptive: bool = True
    admit_eps: float = 0.25
    elliptic_eps: float = 0.25
    max_inner: int = 40
    target_ratio: float = 0.1
    max_q: int = 10 ** 6
    cert_q_max: int = 10 ** 6
    n_rot: int = 4000
    delta: float | None = None
    min_gap: float = 1e-3

    def __post_init__(self):
        if self.c2 <= 10:
            raise ValueError("c2 must exceed 10")
        if not 0 < self.h_star < self.h:
            raise ValueError("need 0 < h_star < h")

    @property
    def params(self) -> DiophantineParams:
        return DiophantineParams(self.tau, self.nu, self.eps, self.M_override)

    @property
    def M(self) -> float:
        return self.params.M

    @property
    def a(self) -> float:
        return self.params.a

    @property
    def b(self) -> float:
        return self.params.b

    @property
    def eta(self) -> float:
        """eta = eps/10: the strip budget is tied to the closeness target."""
        return self.eps / 10

    def eta_k(self, k: int) -> float:
        return self.eta / max(k, 1) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KamConfig":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------- small helpers

def sym_part(M: MatrixFunction) -> MatrixFunction:
    """Q(M) = (M + J M J)/2, the symmetric traceless part; M - Q(M) commutes with rotations."""
    c = M.coeffs
    out = np.empty_like(c)
    out[0, 0] = (c[0, 0] - c[1, 1]) / 2
    out[1, 1] = -out[0, 0]
    out[0, 1] = out[1, 0] = (c[0, 1] + c[1, 0]) / 2
    return M._with(out)


def sym_part_values(m: np.ndarray) -> np.ndarray:
    out = np.empty_like(m)
    out[..., 0, 0] = (m[..., 0, 0] - m[..., 1, 1]) / 2
    out[..., 1, 1] = -out[..., 0, 0]
    out[..., 0, 1] = out[..., 1, 0] = (m[..., 0, 1] + m[..., 1, 0]) / 2
    return out


def inverse_rotation_gap(psi: AnalyticFunction, hp: float, levels: int = 9) -> float:
    """Upper bound of sup over |Im z| <= hp of ||(R_{psi(z)} - id)^{-1}||.

    R_psi - id is normal with eigenvalues e^{+-2 pi i psi} - 1, so the
    pointwise norm is 1/min|e^{+-2 pi i psi} - 1|.  It is sampled on
    ``levels`` horizontal lines and the minimum is lowered by a Lipschitz
    margin so that the bound covers the whole strip.
    """
    n = max(512, 4 * psi.L)
    ls = np.arange(-psi.L, psi.L + 1)
    ys = np.linspace(-hp, hp, levels)
    vals = []
    for y in ys:
        vals.append(_to_grid(psi.coeffs * np.exp(-TWO_PI * ls * y), n))
    v = np.concatenate(vals)
    e = np.exp(2j * np.pi * v)
    g = np.minimum(np.abs(e - 1), np.abs(1 / e - 1))
    dpsi = psi.derivative().norm_upper(hp)
    imag = psi.osc().norm_upper(hp)
    lip = TWO_PI * dpsi * math.exp(TWO_PI * imag)
    dy = (2 * hp / (levels - 1)) if levels > 1 else 0.0
    margin = lip * math.hypot(0.5 / n, 0.5 * dy)
    low = float(g.min()) - margin
    return math.inf if low <= 0 else 1.0 / low


def rotation_inverse_norm(phi: AnalyticFunction, hp: float) -> float:
    """||(R_{2 phi} - id)^{-1}||_hp  (the rho^{-1} of the conjugation step)."""
    return inverse_rotation_gap(2 * phi, hp)


def _rot_angle_values(m: np.ndarray) -> np.ndarray:
    """Angle (turns) of the rotation-commuting part of each matrix m (n, 2, 2)."""
    p = (m[:, 0, 0] + m[:, 1, 1]) / 2
    r = (m[:, 1, 0] - m[:, 0, 1]) / 2
    return np.arctan2(r, p) / TWO_PI


def rotation_part(A: MatrixFunction, ref: float | None = None) -> AnalyticFunction:
    """phi with R_phi = (A - Q(A)) / det(A - Q(A))^{1/2}, as a continuous periodic function.

    The integer branch is chosen with mean closest to ``ref`` (default: mean in [0, 1)).
    """
    n = _grid_size(A.L, 8)
    g = A.grid_values(n).real
    t = np.unwrap(_rot_angle_values(g) * TWO_PI) / TWO_PI
    if abs(t[-1] + wrap(t[0] - t[-1]) - t[0]) > 1e-9:
        raise KamError("degenerate symmetrization: rotation part is not homotopic to a constant")
    mean = float(t.mean())
    target = (mean % 1.0) if ref is None else ref
    base = math.floor(mean)
    shift = (round(target - mean) if ref is not None else -base) + base
    # the integer branch is added in coefficient space so the grid values stay O(1)
    return AnalyticFunction.from_grid(t - base, A.L, A.h, True) + float(shift)


def _grid_check(lhs: MatrixFunction, rhs: MatrixFunction, n: int = CHECK_GRID) -> float:
    """Relative grid discrepancy between two matrix functions."""
    x = np.arange(n) / n
    a, b = lhs(x), rhs(x)
    scale = max(1.0, float(np.abs(b).max()))
    return float(np.abs(a - b).max()) / scale


# --------------------------------------------------------------------------- elliptic normalization

def _log_near_id(M: np.ndarray) -> np.ndarray:
    """Traceless v with e^v = M, for M in SL(2) near the identity (closed form)."""
    c = (M[:, 0, 0] + M[:, 1, 1]) / 2
    f = np.empty_like(c)
    near = np.abs(c - 1) < 1e-6
    ell = ~near & (c < 1)
    hyp = ~near & (c > 1)
    sig = np.arccos(np.clip(c[ell], -1.0, 1.0))
    f[ell] = sig / np.sin(sig)
    s = np.arccosh(c[hyp])
    f[hyp] = s / np.sinh(s)
    u = 1 - c[near]
    f[near] = 1 + u / 3 + 2 * u * u / 15
    return f[:, None, None] * (M - c[:, None, None] * I2)


def _exp_sym(x: np.ndarray, y: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """exp(sign * [[x, y], [y, -x]])."""
    s = np.hypot(x, y)
    ch = np.cosh(s)
    sh = np.where(s < 1e-8, 1 + s * s / 6, np.sinh(s) / np.where(s == 0, 1, s)) * sign
    out = np.empty(x.shape + (2, 2))
    out[:, 0, 0] = ch + sh * x
    out[:, 1, 1] = ch - sh * x
    out[:, 0, 1] = out[:, 1, 0] = sh * y
    return out


def elliptic_normalize_points(A: np.ndarray, theta: np.ndarray, max_iter: int = 30,
                              tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Pointwise normalization of matrices A (n, 2, 2) close to R_theta.

    Returns (B, theta', iterations, residual) with B A B^{-1} = R_{theta'}
    up to ``residual`` (max over points).
    """
    A = np.array(A, dtype=float)
    th = np.array(theta, dtype=float)
    B = np.tile(I2, (A.shape[0], 1, 1))
    prev = math.inf
    grow = 0
    it = 0
    res = float(np.abs(A - rotation_matrices(th)).max())
    # below this level the residual is roundoff: stagnation there counts as convergence
    floor = 256 * np.finfo(float).eps * max(1.0, float(np.abs(A).max()))
    while res >= tol and it < max_iter:
        if res <= floor and res > 0.5 * prev:
            break
        if res > prev and res > floor:
            grow += 1
            if grow >= 2:
                raise KamError("normalization diverged", {"residual": res, "iteration": it})
        else:
            grow = 0
        prev = res
        v = _log_near_id(A @ rotation_matrices(-th))
        x = (v[:, 0, 0] - v[:, 1, 1]) / 2
        y = (v[:, 0, 1] + v[:, 1, 0]) / 2
        z = (v[:, 1, 0] - v[:, 0, 1]) / 2 / TWO_PI
        a = 2 * TWO_PI * th
        p, q = np.cos(a) - 1, np.sin(a)
        den = p * p + q * q
        xt = (p * x + q * y) / den
        yt = (-q * x + p * y) / den
        Ep, Em = _exp_sym(xt, yt, 1.0), _exp_sym(xt, yt, -1.0)
        A = Ep @ A @ Em
        th = th + z
        B = Ep @ B
        it += 1
        res = float(np.abs(A - rotation_matrices(th)).max())
    return B, th, it, res


@dataclass
class EllipticResult:
    B: MatrixFunction
    theta: AnalyticFunction
    iterations: int
    residual: float
    conjugacy_residual: float
    bound_ratio: float

    def __iter__(self):
        return iter((self.B, self.theta))


def elliptic_normalize(A: MatrixFunction, theta: AnalyticFunction, max_iter: int = 30,
                       cfg: KamConfig | None = None, check_domain: bool = True) -> EllipticResult:
    """B with B A B^{-1} = R_{theta'} for a matrix function A close to R_theta.

    The iteration is carried out pointwise on a collocation grid (it is a
    holomorphic function of (A(x), theta(x))), and B, theta' are recovered
    as Fourier series.
    """
    cfg = cfg or KamConfig()
    h = min(A.h, theta.h)
    theta = theta.with_L(A.L)
    dist = to_rotation_form_matrix(A, theta).xi_norm(h)
    if dist == 0.0:
        return EllipticResult(MatrixFunction.identity(A.L, h), theta, 0, 0.0, 0.0, 0.0)
    if check_domain:
        gap_inv = rotation_inverse_norm(theta, h)
        gap = 0.0 if not math.isfinite(gap_inv) else 1.0 / gap_inv
        if A.norm_upper(h) >= 2 * cfg.D or dist >= cfg.elliptic_eps * min(1.0, gap ** 2):
            raise KamError("not in elliptic domain",
                           {"distance": dist, "gap": gap, "norm": A.norm_upper(h)})
    n = _grid_size(A.L, 8)
    tg, k_int = theta.angle_grid_values(n)
    Bv, tv, its, res = elliptic_normalize_points(A.grid_values(n).real, tg.real, max_iter)
    B = MatrixFunction.from_grid(Bv, A.L, h, True, noise_scale=1.0)
    th2 = AnalyticFunction.from_grid(tv, A.L, h, True, noise_scale=max(1.0, float(np.abs(tv).max())))
    th2 = th2 + float(k_int)
    conj = _grid_check(B @ A @ B.inv_sl2(), MatrixFunction.rotation(th2))
    gap_inv = rotation_inverse_norm(theta, h)
    ratio = (B - I2).norm_upper(h) / (dist * gap_inv ** 2) if math.isfinite(gap_inv) else math.nan
    return EllipticResult(B, th2, its, res, conj, ratio)


# --------------------------------------------------------------------------- the conjugation step

def _xi(A: MatrixFunction, phi: AnalyticFunction) -> MatrixFunction:
    return to_rotation_form_matrix(A, phi).xi


def ct_step(bar_alpha, bar_A: MatrixFunction, bar_phi: AnalyticFunction, delta: float, h: float,
            cfg: KamConfig):
    """Conjugate (abar, Abar) close to rotations by repeated pointwise normalization.

    Returns (B, phi_tilde, A_tilde, report) with
    A_tilde(x) = B(x + abar) Abar(x) B(x)^{-1} = R_{phi_tilde}(id + xi_N).
    """
    abar = float(bar_alpha)
    ab = abs(abar)
    osc = bar_phi.osc().norm_upper(h)
    rho_inv = rotation_inverse_norm(bar_phi, h)
    xi0 = _xi(bar_A, bar_phi).norm_upper(h)
    report = {"abar": abar, "osc_phi": osc, "rho_inv": rho_inv, "xi_in": xi0, "xi": [xi0],
              "strips": [h], "ratios": [], "mode": "adaptive" if cfg.adaptive else "formula"}
    I = MatrixFunction.identity(bar_A.L, bar_A.h)
    eps0 = cfg.admit_eps if cfg.adaptive else cfg.eps0
    fails = []
    if osc > cfg.D:
        fails.append("oscillation of phi exceeds D")
    if not math.isfinite(rho_inv):
        fails.append("R_{2 phi} - id is singular on the strip")
    elif not cfg.adaptive and not rho_inv < eps0 ** -0.25:
        fails.append("rho^-1 >= eps0^-1/4")
    elif cfg.adaptive and not rho_inv < 1.0 / cfg.min_gap:
        fails.append("rho^-1 >= 1/min_gap")
    if xi0 >= eps0:
        fails.append("||R_{-phi} A - id|| >= eps0")
    if fails:
        raise KamError("CT preconditions violated", {"failed": fails, **report})
    if xi0 == 0.0:
        report.update(N=0, xi_out=0.0, conjugacy_check=0.0)
        return I, bar_phi, bar_A, report
    rho = 1.0 / rho_inv
    if cfg.adaptive:
        N = cfg.max_inner
    else:
        N = int(delta * h * rho ** 2 / (cfg.c1 * ab)) if ab > 0 else cfg.max_inner
    report["N_formula"] = int(delta * h * rho ** 2 / (cfg.c1 * ab)) if ab > 0 else None
    A_i, phi_i, B = bar_A, bar_phi, I
    xi_i = xi0
    steps = 0
    for i in range(N):
        h_next = math.exp(-delta * (i + 1) / (3 * N)) * h
        try:
            Bi, phi_next = elliptic_normalize(A_i, phi_i, cfg=cfg, check_domain=not cfg.adaptive)
        except KamError:
            if cfg.adaptive and steps > 0:
                break
            raise
        A_next = Bi.shift(abar) @ A_i @ Bi.inv_sl2()
        xi_next = _xi(A_next, phi_next).norm_upper(h_next)
        ratio = xi_next / xi_i if xi_i > 0 else 0.0
        if cfg.adaptive and ratio > cfg.target_ratio:
            # the loop only runs while every step contracts by the target factor
            report["stop"] = f"contraction above target at inner step {i}"
            report["rejected_ratio"] = ratio
            break
        report["ratios"].append(ratio)
        report["xi"].append(xi_next)
        report["strips"].append(h_next)
        if not cfg.adaptive and ratio > 1 / cfg.c2:
            raise KamError(f"contraction lost at step {i}", report)
        A_i, phi_i, B, xi_i = A_next, phi_next, Bi @ B, xi_next
        steps += 1
        if cfg.adaptive and xi_i <= 1e-3 * cfg.tol_residual:
            report["stop"] = "residual floor"
            break
    report["N"] = steps
    report["xi_out"] = xi_i
    report["B_minus_id"] = (B - I2).norm_upper(min(B.h, h))
    report["conjugacy_check"] = _grid_check(B.shift(abar) @ bar_A @ B.inv_sl2(), A_i)
    if report["conjugacy_check"] > 1e-10:
        raise KamError("conjugacy identity violated in ct_step", report)
    return B, phi_i, A_i, report


def ct_commuting(B: MatrixFunction, alpha, A: MatrixFunction, phi: AnalyticFunction, delta: float,
                 h: float, cfg: KamConfig, *, bar_alpha=None, bar_A: MatrixFunction | None = None,
                 phi_ref: float | None = None):
    """Apply the conjugacy B of ``ct_step`` to the commuting cocycle (alpha, A).

    ``phi`` is the rotation function produced by ``ct_step``.  Returns
    (phi_tilde, A_tilde, report) where A_tilde(x) = B(x + alpha) A(x) B(x)^{-1} and
    R_{phi_tilde} = (A_tilde - L)/det(A_tilde - L)^{1/2}, L = Q(A_tilde).
    """
    report: dict = {}
    if bar_A is not None and bar_alpha is not None:
        lhs = A.shift(bar_alpha) @ bar_A
        rhs = bar_A.shift(alpha) @ A
        comm = _grid_check(lhs, rhs)
        report["commutation_defect"] = comm
        if comm > 1e-10:
            raise KamError("not commuting", report)
    if A.norm_upper(h) > cfg.D:
        raise KamError("CT preconditions violated", {"failed": ["||A|| > D"], **report})
    A_t = B.shift(alpha) @ A @ B.inv_sl2()
    L = sym_part(A_t)
    n = _grid_size(A.L, 8)
    g = (A_t - L).grid_values(n).real
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    if det.min() <= 0.25:
        raise KamError("degenerate symmetrization", {"min_det": float(det.min()), **report})
    phi_t = rotation_part(A_t, ref=phi_ref)
    h2 = math.exp(-delta) * h
    xi = _xi(A_t, phi_t)
    report["L_norm"] = L.norm_upper(min(L.h, h2))
    if bar_alpha is not None:
        report["L1_norm"] = (L.shift(bar_alpha) - L).norm_upper(min(L.h, h2))
    Rphi = MatrixFunction.rotation(phi.with_L(A.L))
    L2 = sym_part(A_t @ Rphi - Rphi.shift(alpha) @ A_t)
    report["L2_norm"] = L2.norm_upper(min(L2.h, h2))
    h_sum = math.exp(-2 * delta / 3) * h
    rot_sum = inverse_rotation_gap(phi.shift(alpha) + phi, min(h_sum, phi.h))
    rho_inv = rotation_inverse_norm(phi, min(h, phi.h))
    report["rotated_sum_inv"] = rot_sum
    report["rotated_sum_ok"] = bool(rot_sum < 3 * rho_inv)
    report["xi_out"] = xi.norm_upper(min(xi.h, h2))
    report["strip"] = h2
    if not cfg.adaptive and not report["rotated_sum_ok"]:
        raise KamError("rotated-sum condition fails", report)
    return phi_t, A_t, report


# --------------------------------------------------------------------------- iteration along Q_{k+1}

def U_k(Q: int, Qbar: int, cfg: KamConfig) -> float:
    """U_k = exp(-Qbar Q^-b - Qbar^a)."""
    v = -float(Qbar) * math.exp(-cfg.b * math.log(Q)) - math.exp(cfg.a * math.log(Qbar))
    return math.exp(v) if v > -745 else 0.0


def rho_k_bound(Q1: int, Qbar1: int, cfg: KamConfig) -> float:
    """Admissible size of ||(R_{2 phi^(Q)} - id)^{-1}||, 4 / (eps (Q^-tau + Qbar^-nu))."""
    return 4.0 / (cfg.eps * (Q1 ** -cfg.tau + Qbar1 ** -cfg.nu))


def _product_exponent(phi: AnalyticFunction, xi_norm: float, alpha, q: int, hp: float) -> float:
    """sum_{k<q} ||R_{S_{k+1} phi}||^2 ||xi|| with ||R_psi||_hp <= exp(2 pi ||psi - mean||_hp)."""
    L = phi.L
    ls = np.arange(1, L + 1)
    c = phi.coeffs[L + 1:]
    if not np.any(c):
        return q * xi_norm
    e1 = np.exp(2j * np.pi * np.array([frac_mul(alpha, int(l)) for l in ls]))
    w = np.exp(TWO_PI * ls * hp)
    total = 0.0
    a = float(alpha)
    for start in range(1, q + 1, 4096):
        ks = np.arange(start, min(q, start + 4095) + 1)
        ek = np.exp(2j * np.pi * np.mod(np.outer(ks, ls) * a, 1.0))
        S = c[None, :] * (1 - ek) / (1 - e1)[None, :]
        osc = 2 * (np.abs(S) @ w)  # positive and negative modes
        total += float(np.exp(2 * TWO_PI * osc).sum())
    return total * xi_norm


def aq_iterate(form: RotationForm, alpha, seq: SelectedSubsequence | None, k: int, h: float,
               cfg: KamConfig, *, q: int | None = None, qbar: int | None = None,
               A: MatrixFunction | None = None, Qk: int | None = None, Qbar_k: int | None = None,
               return_matrix: bool = False):
    """A^(Q) = R_{S_Q phi}(id + xi^(Q)) for Q = Q_{k+1} (or an explicit q), with its checks.

    Returns (form_Q, rho_k_bound, report), plus A^(Q) itself when ``return_matrix``.
    """
    if q is None:
        if seq is None or k + 1 >= len(seq.Q):
            raise KamError("Aq contract violated (no Q_{k+1} available)")
        q, qbar = seq.Q[k + 1], seq.Qbar[k + 1]
        Qk, Qbar_k = seq.Q[k], seq.Qbar[k]
    A = form.matrix() if A is None else A
    hq = h * (1 - cfg.eta_k(k + 1))
    xi_in = form.xi_norm(min(h, form.xi.h))
    report = {"q": q, "strip": hq, "xi_in": xi_in}
    if Qk is not None and Qbar_k is not None and not cfg.adaptive:
        Uk = U_k(Qk, Qbar_k, cfg)
        report["U_k"] = Uk
        if xi_in > Uk:
            raise KamError("Aq contract violated (input ||xi|| > U_k)", report)
    Aq = iterate(Cocycle(alpha, A, homotopy_class=0, det_defect=0.0), q)
    phi_q = birkhoff_sum(form.phi, alpha, q)
    form_q = to_rotation_form_matrix(Aq, phi_q)
    hq = min(hq, form_q.xi.h)
    osc = phi_q.osc().norm_upper(hq)
    gap = rotation_inverse_norm(phi_q, hq)
    xi_q = form_q.xi_norm(hq)
    bound = math.expm1(_product_exponent(form.phi, xi_in, alpha, q, hq)) if xi_in > 0 else 0.0
    rk = rho_k_bound(q, qbar or q, cfg)
    report.update(osc=osc, rho_inv=gap, rho_k=rk, xi_q=xi_q, product_bound=bound)
    if osc > cfg.D:
        raise KamError("Aq contract violated (1: oscillation exceeds D)", report)
    if not gap < rk:
        raise KamError("Aq contract violated (2: rotation gap)", report)
    if xi_q > bound * (1 + 1e-9) + 1e-15:
        raise KamError("Aq contract violated (product bound exceeded)", report)
    if not cfg.adaptive and "U_k" in report and xi_q > math.sqrt(report["U_k"]):
        raise KamError("Aq contract violated (3: ||xi^(Q)|| > U_k^1/2)", report)
    return (form_q, rk, report, Aq) if return_matrix else (form_q, rk, report)


# --------------------------------------------------------------------------- inductive step and driver

@dataclass
class KamState:
    k: int
    h_k: float
    form: RotationForm
    A: MatrixFunction
    U_k: float
    eta_k: float
    B_accum: MatrixFunction
    residual_history: list = field(default_factory=list)
    q_used: list = field(default_factory=list)


def _step(state: KamState, alpha, q: int, qbar: int, cfg: KamConfig, seq=None, k_seq=None):
    """One outer step: iterate along q, contract, transfer to (alpha, A_k)."""
    k = state.k
    delta = cfg.delta if cfg.delta is not None else cfg.eta_k(k + 1)
    h = state.h_k
    if seq is not None:
        form_q, rk, aq_rep, bar_A = aq_iterate(state.form, alpha, seq, k_seq, h, cfg, A=state.A,
                                               return_matrix=True)
    else:
        form_q, rk, aq_rep, bar_A = aq_iterate(state.form, alpha, None, k, h, cfg, q=q, qbar=qbar,
                                               A=state.A, return_matrix=True)
    abar = signed_frac_mul(alpha, q)
    h_ct = aq_rep["strip"]
    B, phi_bar_t, A_bar_t, ct_rep = ct_step(abar, bar_A, form_q.phi, delta, h_ct, cfg)
    phi_ref = float(state.form.phi.mean.real)
    phi_t, A_t, com_rep = ct_commuting(B, alpha, state.A, phi_bar_t, delta, h_ct, cfg,
                                       bar_alpha=abar, bar_A=bar_A, phi_ref=phi_ref)
    h_next = h * (1 - cfg.eta_k(k + 1)) ** 2
    form = to_rotation_form_matrix(A_t, phi_t)
    xi_next = form.xi_norm(min(h_next, form.xi.h))
    check = _grid_check(B.shift(alpha) @ state.A @ B.inv_sl2(), A_t)
    B_norm = (B - I2).norm_upper(min(B.h, h_next))
    rec = {"k": k + 1, "q": q, "abar": abar, "h_k": h_next, "xi": xi_next, "B_minus_id": B_norm,
           "N": ct_rep["N"], "ct_ratios": ct_rep["ratios"], "ct_xi_out": ct_rep["xi_out"],
           "aq": aq_rep, "commuting": com_rep, "conjugacy_check": check}
    if check > 1e-10:
        raise KamError("inductive contract violated (conjugacy identity)", rec)
    new = KamState(k + 1, h_next, form, A_t, state.U_k, cfg.eta_k(k + 1), B @ state.B_accum,
                   state.residual_history + [xi_next], state.q_used + [q])
    return new, rec, B_norm


def inductive_step(state: KamState, cocycle: Cocycle, seq: SelectedSubsequence, cfg: KamConfig) -> KamState:
    """The inductive step along the selected denominators: A_k -> A_{k+1} = B_k(. + alpha) A_k B_k^{-1}."""
    k = state.k
    if k + 1 >= len(seq.Q):
        raise KamError("inductive contract violated (selection exhausted)")
    if seq.Qbar[k] < cfg.T_threshold:
        raise KamError("inductive contract violated (Qbar_k below T_threshold)",
                       {"Qbar_k": seq.Qbar[k], "T": cfg.T_threshold})
    Uk = U_k(seq.Q[k], seq.Qbar[k], cfg)
    Uk1 = U_k(seq.Q[k + 1], seq.Qbar[k + 1], cfg)
    xi_k = state.form.xi_norm(min(state.h_k, state.form.xi.h))
    if xi_k == 0.0:
        h_next = state.h_k * (1 - cfg.eta_k(k + 1)) ** 2
        return KamState(k + 1, h_next, state.form, state.A, Uk1, cfg.eta_k(k + 1), state.B_accum,
                        state.residual_history + [0.0], state.q_used + [seq.Q[k + 1]])
    state = KamState(**{**state.__dict__, "U_k": Uk})
    new, rec, B_norm = _step(state, cocycle.alpha, seq.Q[k + 1], seq.Qbar[k + 1], cfg, seq=seq, k_seq=k)
    fails = []
    if B_norm > Uk ** 0.25:
        fails.append("||B_k - id|| > U_k^1/4")
    if new.residual_history[-1] > Uk1:
        fails.append("||xi_{k+1}|| > U_{k+1}")
    if new.form.phi.osc().norm_upper(min(new.h_k, new.form.phi.h)) > cfg.D - cfg.eta_k(k + 1):
        fails.append("oscillation of phi_{k+1} > D - eta_{k+1}")
    if fails:
        raise KamError("inductive contract violated", {"failed": fails, **rec})
    new.U_k = Uk1
    return new


def constant_frame(A0: np.ndarray) -> tuple[np.ndarray, float]:
    """P in SL(2,R) and theta with P A0 P^{-1} = R_theta, for an elliptic constant A0."""
    A0 = np.asarray(A0, dtype=float)
    tr = A0[0, 0] + A0[1, 1]
    if abs(tr) >= 2 or A0[1, 0] == 0:
        raise KamError("constant part is not elliptic", {"trace": float(tr)})
    c = tr / 2
    s = math.copysign(math.sqrt(1 - c * c), A0[1, 0])
    K = (A0 - c * I2) / s
    sc = 1 / math.sqrt(K[1, 0])
    Pinv = np.array([[sc, sc * K[0, 0]], [0.0, sc * K[1, 0]]])
    P = np.array([[Pinv[1, 1], -Pinv[0, 1]], [-Pinv[1, 0], Pinv[0, 0]]])
    theta = math.atan2(s, c) / TWO_PI
    return P, theta % 1.0


@dataclass
class KamResult:
    status: str
    B: MatrixFunction
    phi: AnalyticFunction
    final_residual: float
    history: list
    frame: np.ndarray = field(default_factory=lambda: np.eye(2))
    message: str = ""
    details: dict = field(default_factory=dict)
    rho: float | None = None
    h_final: float | None = None

    def conjugacy(self) -> MatrixFunction:
        """The full conjugacy B P acting on the input cocycle."""
        return self.B @ self.frame

    def conjugated(self, cocycle: Cocycle) -> MatrixFunction:
        Bt = self.conjugacy()
        return Bt.shift(cocycle.alpha) @ cocycle.A @ Bt.inv_sl2()

    def to_dict(self) -> dict:
        return {"status": self.status, "B": self.B.to_dict(), "phi": self.phi.to_dict(),
                "final_residual": self.final_residual, "history": _jsonable(self.history),
                "frame": np.asarray(self.frame).tolist(), "message": self.message,
                "details": _jsonable(self.details), "rho": self.rho, "h_final": self.h_final}

    @classmethod
    def from_dict(cls, d: dict) -> "KamResult":
        return cls(d["status"], MatrixFunction.from_dict(d["B"]), AnalyticFunction.from_dict(d["phi"]),
                   float(d["final_residual"]), d.get("history", []), np.array(d["frame"], dtype=float),
                   d.get("message", ""), d.get("details", {}), d.get("rho"), d.get("h_final"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, int) and abs(obj) > 2 ** 53:
        return str(obj)
    return obj


def conjugacy_residual(result: KamResult, cocycle: Cocycle, hp: float | None = None) -> tuple[float, float]:
    """(certified strip residual, 256-grid residual) of B(x+alpha) A(x) B(x)^{-1} - R_phi(x)."""
    D = result.conjugated(cocycle) - MatrixFunction.rotation(result.phi.with_L(cocycle.A.L))
    hp = min(D.h, result.h_final or D.h) if hp is None else hp
    x = np.arange(CHECK_GRID) / CHECK_GRID
    return D.norm_upper(hp), float(np.abs(D(x)).max())


def _pick_denominator(cf: ContinuedFraction, rho: float, start: int, cfg: KamConfig, alpha):
    """Smallest convergent index n > start with a good predicted contraction 2 pi |abar| rho^-1 * 2."""
    best = None
    for n in range(max(start + 1, 1), len(cf.q)):
        q = cf.q[n]
        if q > cfg.max_q:
            break
        if q < 2:
            continue
        gap = 2 * abs(math.sin(TWO_PI * q * rho))
        if gap < cfg.min_gap:
            continue
        abar = abs(signed_frac_mul(alpha, q))
        pred = 2 * TWO_PI * abar / gap
        qbar = cf.q[n + 1] if n + 1 < len(cf.q) else None
        cand = (pred, n, q, qbar)
        if pred <= cfg.target_ratio:
            return cand
        if best is None or pred < best[0]:
            best = cand
    return best


def _failed(status, msg, details, history, L, h, phi=None, frame=None, rho=None):
    return KamResult(status, MatrixFunction.identity(L, h), phi if phi is not None else AnalyticFunction.constant(0.0, L, h),
                     math.inf, history, np.eye(2) if frame is None else frame, msg, details, rho, h)


def reduce_to_rotations(cocycle: Cocycle, cfg: KamConfig | None = None, cf: ContinuedFraction | None = None,
                        rho: float | None = None) -> KamResult:
    """Drive a cocycle close to constant rotations to a cocycle of rotations.

    A constant frame P first conjugates the mean of A to a rotation (for
    Schrodinger cocycles this is what makes the cocycle close to rotations).
    Then outer steps are run until the certified residual ||xi|| drops below
    ``cfg.tol_residual``.  Returns a KamResult whose B excludes the frame;
    ``result.conjugacy()`` is the full conjugacy.
    """
    cfg = cfg or KamConfig()
    t0 = time.perf_counter()
    alpha = cocycle.alpha
    A_in = cocycle.A.with_L(cfg.L)
    h = min(cfg.h, A_in.h)
    A_in = A_in._with(A_in.coeffs, h=h)
    L = cfg.L
    history: list = []
    if cf is None:
        try:
            cf = expand_cf(alpha, cfg.max_q * 10)
        except RationalOrExhausted as e:
            cf = e.partial
    # frame
    try:
        P, theta0 = constant_frame(A_in.mean().real)
    except KamError as e:
        return _failed("precondition_failed", str(e), e.details, history, L, h)
    Pinv = np.array([[P[1, 1], -P[0, 1]], [-P[1, 0], P[0, 0]]])
    A0 = P @ A_in @ Pinv
    try:
        phi0 = rotation_part(A0, ref=theta0)
    except KamError as e:
        return _failed("precondition_failed", str(e), e.details, history, L, h, frame=P)
    form0 = to_rotation_form_matrix(A0, phi0)
    xi0 = form0.xi_norm(h)
    admit = cfg.admit_eps if cfg.adaptive else cfg.eps0
    details = {"xi0": xi0, "admission_threshold": admit, "theta0": theta0}
    # rotation number and arithmetic certificate
    if rho is None:
        rho = rotation_number(cocycle, cfg.n_rot).rho
    depth = max(0, min(len(cf.q) - 2, sum(1 for q in cf.q if q <= cfg.cert_q_max) - 1))
    ok, fail_i = check_rho_condition(cf, rho, cfg.params, depth)
    details.update(rho=rho, certificate_depth=depth, certificate_pass=ok, certificate_fail_index=fail_i)
    # the certificate is a hypothesis of the iteration; a cocycle that already is a
    # cocycle of rotations (after the frame) needs no iteration at all
    if not ok and xi0 > cfg.tol_residual:
        return _failed("precondition_failed", f"rho-condition fails at i = {fail_i}", details, history,
                       L, h, phi0, P, rho)
    if xi0 >= admit and xi0 > cfg.tol_residual:
        return _failed("precondition_failed", "cocycle not close enough to rotations", details, history,
                       L, h, phi0, P, rho)
    state = KamState(0, h, form0, A0, math.nan, cfg.eta, MatrixFunction.identity(L, h), [xi0], [])
    history.append({"k": 0, "h_k": h, "xi": xi0, "B_minus_id": 0.0, "N": 0, "q": 1})
    status, message = "stalled", "max_outer reached"
    if cfg.adaptive:
        n_prev = 0
        stall = 0
        while True:
            xi_k = state.residual_history[-1]
            if xi_k <= cfg.tol_residual:
                status, message = "converged", ""
                break
            if state.k >= cfg.max_outer:
                break
            cand = _pick_denominator(cf, rho, n_prev, cfg, alpha)
            if cand is None:
                status, message = "stalled", "no usable denominator within max_q"
                break
            _, n, q, qbar = cand
            try:
                state, rec, _ = _step(state, alpha, q, qbar or q, cfg)
            except CocycleKamError as e:
                status, message = "stalled", str(e)
                details["error_details"] = getattr(e, "details", {})
                break
            history.append(rec)
            n_prev = n
            if state.residual_history[-1] > state.residual_history[-2] / 10:
                stall += 1
                if stall >= 2:
                    status, message = "stalled", "two outer steps without a tenfold reduction"
                    break
            else:
                stall = 0
    else:
        status, message, state = _formula_driver(cocycle, cf, rho, state, cfg, history, details)
    h_final = state.h_k
    res = KamResult(status, state.B_accum, state.form.phi, state.residual_history[-1], history, P,
                    message, details, rho, h_final)
    if status == "converged":
        cert, grid = conjugacy_residual(res, Cocycle(alpha, A_in, 0, 0.0), min(h_final, state.B_accum.h))
        res.final_residual = max(cert, state.residual_history[-1]) if cert > cfg.tol_residual else cert
        details.update(conjugacy_residual_certified=cert, conjugacy_residual_grid=grid)
        if cert > cfg.tol_residual:
            res.status, res.message = "stalled", "final conjugacy residual above tolerance"
    details["wall_time"] = time.perf_counter() - t0
    return res


def _formula_driver(cocycle, cf, rho, state, cfg, history, details):
    """The schedule with selected denominators, U_k targets and formula inner-loop lengths."""
    try:
        seq = select_Q(cf, cfg.params)
    except CocycleKamError as e:
        return "precondition_failed", str(e), state
    details["selection"] = seq.to_dict()
    T = cfg.T_threshold
    A = cfg.params.calA
    n0 = None
    for k in range(len(seq.Q)):
        if seq.Qbar[k] >= T and math.log(max(seq.Q[k], 2)) <= A ** 4 * math.log(T):
            n0 = k
            break
    if n0 is None:
        return "precondition_failed", "no n0 with Qbar_n0 >= T within depth", state
    Q0 = seq.Q[n0]
    eps1 = min(cfg.eps0, (cfg.eps / 4 * Q0 ** -cfg.tau) ** 4)
    details.update(n0=n0, eps1=eps1)
    Aq = iterate(Cocycle(cocycle.alpha, state.A, 0, 0.0), Q0)
    xi0 = (MatrixFunction.rotation(AnalyticFunction.constant(-Q0 * rho, state.A.L, state.h_k)) @ Aq
           - I2).norm_upper(state.h_k)
    gap = 2 / max(torus_norm(2 * Q0 * rho), 1e-300)
    details.update(bootstrap_xi=xi0, bootstrap_gap=gap)
    if not xi0 < eps1:
        return "precondition_failed", "bootstrap: ||xi_0|| >= eps_1", state
    if not gap <= xi0 ** -0.25 / 2:
        return "precondition_failed", "bootstrap: rotation gap too small for ||xi_0||", state
    state.k = n0
    for _ in range(cfg.max_outer):
        if state.residual_history[-1] <= cfg.tol_residual:
            return "converged", "", state
        try:
            state = inductive_step(state, cocycle, seq, cfg)
        except CocycleKamError as e:
            details["error_details"] = getattr(e, "details", {})
            return "stalled", str(e), state
        history.append({"k": state.k, "h_k": state.h_k, "xi": state.residual_history[-1]})
    return "stalled", "max_outer reached", state
