"""Energy scans over Schrodinger cocycles and checks of their by-products.

The scan walks an energy grid, estimates the rotation number, runs the
arithmetic certificate, attempts the reduction for admitted energies and
records everything (rejections included).  Auxiliary checks cover the
monotonicity of E -> rho(E), the identity

    d rho / dE = -(1 / 8 pi) * integral over the torus of ||B||_HS^2,

where B is the full conjugacy to rotations, and re-verification of a
converged run from its serialized form alone.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .analytic import AnalyticFunction, MatrixFunction
from .arithmetic import (ContinuedFraction, RationalOrExhausted, check_rho_condition, expand_cf,
                         torus_norm)
from .cocycle import Cocycle, lyapunov, rotation_number, schrodinger
from .errors import CocycleKamError
from .kam import KamConfig, KamResult, conjugacy_residual, reduce_to_rotations

STATUSES = ("converged", "stalled", "precondition_failed", "not_attempted")
CSV_HEADER = "E,rho,rho_spread,cert_pass,kam_status,final_residual,lyap,wall_time"
SERIAL_VERSION = 1


@dataclass
class ScanRecord:
    """One energy of a scan."""
    E: float
    rho: float
    rho_spread: float
    cert_pass: bool
    kam_status: str
    final_residual: float
    lyap: float
    wall_time: float
    message: str = ""

    def __post_init__(self):
        if self.kam_status not in STATUSES:
            raise ValueError(f"unknown status {self.kam_status!r}")
        if not self.cert_pass and self.kam_status not in ("precondition_failed", "not_attempted"):
            raise ValueError("a record failing the certificate cannot carry a reduction outcome")

    def csv_row(self) -> str:
        return ",".join([repr(float(self.E)), repr(float(self.rho)), repr(float(self.rho_spread)),
                         "true" if self.cert_pass else "false", self.kam_status,
                         repr(float(self.final_residual)), repr(float(self.lyap)),
                         f"{self.wall_time:.6f}"])

    @classmethod
    def from_csv_row(cls, row: str) -> "ScanRecord":
        f = row.strip().split(",")
        return cls(float(f[0]), float(f[1]), float(f[2]), f[3] == "true", f[4], float(f[5]),
                   float(f[6]), float(f[7]))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("final_residual", "rho_spread", "lyap"):
            if not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanRecord":
        return cls(**{k: (float(v) if k in ("final_residual", "rho_spread", "lyap") else v)
                      for k, v in d.items()})


@dataclass
class ScanSummary:
    n_points: int
    n_admitted: int
    n_converged: int
    converged_fraction: float
    converged_fraction_admitted: float
    measure: float
    cell: float
    interval: tuple

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScanResult:
    records: list
    summary: ScanSummary
    results: dict = field(default_factory=dict)  # index -> serialized KamResult of converged records

    def csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv_row() for r in self.records]) + "\n"


def grid_cell(E_grid) -> float:
    """Width of one cell of an equispaced grid (each point owns one cell)."""
    E = np.asarray(E_grid, dtype=float)
    if E.size < 2:
        return 0.0
    return float((E.max() - E.min()) / (E.size - 1))


def measure_estimate(E_grid, flags) -> float:
    """Lebesgue measure of the flagged set by interval counting: one cell per flagged point."""
    return grid_cell(E_grid) * int(np.count_nonzero(flags))


def summarize(records: list, E_grid=None) -> ScanSummary:
    E = np.array([r.E for r in records]) if E_grid is None else np.asarray(E_grid, dtype=float)
    conv = np.array([r.kam_status == "converged" for r in records])
    admitted = [r for r in records if r.cert_pass and r.kam_status != "not_attempted"
                and r.message != "cocycle not close enough to rotations"]
    n_adm = len(admitted)
    n_conv = int(conv.sum())
    return ScanSummary(len(records), n_adm, n_conv, n_conv / max(len(records), 1),
                       n_conv / n_adm if n_adm else 0.0, measure_estimate(E, conv), grid_cell(E),
                       (float(E.min()), float(E.max())) if E.size else (math.nan, math.nan))


def _cf_for(alpha, cf: ContinuedFraction | None, cfg: KamConfig) -> ContinuedFraction:
    if cf is not None:
        return cf
    try:
        return expand_cf(alpha, cfg.max_q * 10)
    except RationalOrExhausted as e:
        return e.partial


def _certificate(cf: ContinuedFraction, rho: float, cfg: KamConfig) -> bool:
    depth = max(0, min(len(cf.q) - 2, sum(1 for q in cf.q if q <= cfg.cert_q_max) - 1))
    return check_rho_condition(cf, rho, cfg.params, depth)[0]


def scan_point(v: AnalyticFunction, alpha, E: float, cfg: KamConfig, cf: ContinuedFraction,
               n_lyap: int = 2000, keep_result: bool = False):
    """Single-energy worker: (ScanRecord, serialized KamResult or None)."""
    t0 = time.perf_counter()
    c = schrodinger(v, E, alpha)
    est = rotation_number(c, cfg.n_rot)
    rho = est.rho
    cert = _certificate(cf, rho, cfg)
    lyap = lyapunov(c, n_lyap).value if n_lyap else math.nan
    payload = None
    if not cert:
        status, resid, msg = "precondition_failed", math.inf, "rho-condition certificate failed"
    else:
        try:
            res = reduce_to_rotations(c, cfg, cf=cf, rho=rho)
        except CocycleKamError as e:  # the driver reports failures itself; this is a safety net
            status, resid, msg = "stalled", math.inf, str(e)
        else:
            status, resid, msg = res.status, res.final_residual, res.message
            if keep_result and status == "converged":
                payload = serialize_run(c, res, cfg)
    rec = ScanRecord(float(E), float(rho), float(est.spread), bool(cert), status, float(resid),
                     float(lyap), time.perf_counter() - t0, msg)
    return rec, payload


def _scan_worker(args):
    return scan_point(*args)


def scan_energies(v: AnalyticFunction, alpha, E_grid, cfg: KamConfig | None = None,
                  cf: ContinuedFraction | None = None, jobs: int = 1, n_lyap: int = 2000,
                  keep_results: bool = False) -> ScanResult:
    """Scan the Schrodinger cocycles (alpha, S_{v,E}) over an energy grid.

    Records come back in grid order whatever ``jobs`` is, so the output is
    deterministic; the summary only depends on the multiset of records.
    """
    cfg = cfg or KamConfig()
    if not v.real_symmetric:
        raise ValueError("potential must be real-symmetric")
    E = [float(e) for e in E_grid]
    if not all(math.isfinite(e) for e in E):
        raise ValueError("energy grid must be finite")
    cf = _cf_for(alpha, cf, cfg)
    tasks = [(v, alpha, e, cfg, cf, n_lyap, keep_results) for e in E]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_scan_worker, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        out = [_scan_worker(t) for t in tasks]
    records = [r for r, _ in out]
    results = {i: p for i, (_, p) in enumerate(out) if p is not None}
    return ScanResult(records, summarize(records, E), results)


# --------------------------------------------------------------------------- rotation number checks

@dataclass
class MonotoneReport:
    ok: bool
    tol_mono: float
    violations: list  # (E_i, E_{i+1}, rho_i, rho_{i+1})
    rho_first: float
    rho_last: float
    endpoints_ok: bool
    rho: list
    spread: list

    def to_dict(self) -> dict:
        return asdict(self)


def check_rho_monotone(v: AnalyticFunction, alpha, E_grid, n_iter: int = 4000) -> MonotoneReport:
    """E -> rho(E) is non-increasing, starts near 1/2 and ends near 0 on a covering grid."""
    E = np.asarray(E_grid, dtype=float)
    if E.ndim != 1 or E.size < 2 or not np.all(np.diff(E) > 0):
        raise ValueError("energy grid must be strictly increasing")
    rhos, spreads = [], []
    for e in E:
        est = rotation_number(schrodinger(v, float(e), alpha), n_iter)
        # rho lives on the circle; beyond the top of the spectrum it is 0, which may come back as 1 - tiny
        rhos.append(est.rho - 1.0 if est.rho > 0.75 else est.rho)
        spreads.append(est.spread)
    tol = 2 * max(spreads)
    viol = [(float(E[i]), float(E[i + 1]), rhos[i], rhos[i + 1]) for i in range(len(E) - 1)
            if rhos[i] < rhos[i + 1] - tol]
    ends = rhos[0] >= 0.5 - 1e-2 and rhos[-1] <= 1e-2
    return MonotoneReport(not viol and ends, tol, viol, rhos[0], rhos[-1], ends, rhos, spreads)


# --------------------------------------------------------------------------- the d rho / dE identity

@dataclass
class DrhoReport:
    applicable: bool
    E0: float
    dE: float
    finite_difference: float
    formula: float
    relative_discrepancy: float
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def hs_integral(B: MatrixFunction) -> float:
    """Integral over the torus of ||B(x)||_HS^2: the mean coefficient of the sum of squared entries."""
    n = 4 * B.L + 4
    g = B.grid_values(n)
    return float((np.abs(g) ** 2).sum(axis=(1, 2)).mean())


def drho_formula(result: KamResult) -> float:
    """-(1 / 8 pi) * integral ||B||_HS^2 for the full conjugacy of a converged run."""
    return -hs_integral(result.conjugacy()) / (8 * math.pi)


def check_drho_dE(v: AnalyticFunction, alpha, E0: float, cfg: KamConfig | None = None,
                  dE: float | None = None, cf: ContinuedFraction | None = None,
                  n_rot: int = 20000) -> DrhoReport:
    """Compare a centered difference of rho(E) with the Hilbert-Schmidt formula at E0."""
    cfg = cfg or KamConfig()
    scale = max(1.0, abs(E0))
    dE = 1e-6 * scale if dE is None else dE
    cf = _cf_for(alpha, cf, cfg)
    rho, res = {}, {}
    for s in (-1, 0, 1):
        c = schrodinger(v, E0 + s * dE, alpha)
        rho[s] = rotation_number(c, n_rot).rho
        res[s] = reduce_to_rotations(c, cfg, cf=cf, rho=rho[s])
    if any(r.status != "converged" for r in res.values()):
        bad = [E0 + s * dE for s, r in res.items() if r.status != "converged"]
        return DrhoReport(False, E0, dE, math.nan, math.nan, math.nan,
                          f"not applicable at E0 (no convergence at {bad})")
    # rho is continuous; take the branch of rho(E0 +- dE) nearest to rho(E0)
    rp = rho[0] + ((rho[1] - rho[0] + 0.5) % 1.0 - 0.5)
    rm = rho[0] + ((rho[-1] - rho[0] + 0.5) % 1.0 - 0.5)
    fd = (rp - rm) / (2 * dE)
    formula = drho_formula(res[0])
    rel = abs(fd - formula) / abs(formula)
    return DrhoReport(True, E0, dE, fd, formula, rel)


# --------------------------------------------------------------------------- serialized re-verification

def serialize_run(cocycle: Cocycle, result: KamResult, cfg: KamConfig) -> dict:
    """Everything needed to re-check a converged run without in-memory state."""
    return {"format_version": SERIAL_VERSION, "cocycle": cocycle.to_dict(),
            "result": result.to_dict(), "config": cfg.to_dict()}


@dataclass
class VerificationReport:
    ok: bool
    grid_residual: float
    rho: float
    phi_mean: float
    rho_discrepancy: float
    lyap: float
    checks: dict

    def to_dict(self) -> dict:
        return asdict(self)


def verify_serialized(payload: dict, n_lyap: int = 5000, lyap_tol: float = 1e-3) -> VerificationReport:
    """Re-check a serialized converged run: conjugacy residual, rho vs mean(phi), Lyapunov exponent."""
    if payload.get("format_version") != SERIAL_VERSION:
        raise ValueError("unsupported serialization format")
    cocycle = Cocycle.from_dict(payload["cocycle"])
    result = KamResult.from_dict(payload["result"])
    cfg = KamConfig.from_dict(payload["config"])
    _, grid = conjugacy_residual(result, cocycle)
    rho = rotation_number(cocycle, cfg.n_rot).rho
    mean = float(result.phi.mean.real)
    disc = torus_norm(rho - mean)
    ly = lyapunov(cocycle, n_lyap).value
    checks = {"status": result.status == "converged", "grid_residual": grid <= cfg.tol_residual,
              "rho": disc <= 1e-4, "lyap": ly <= lyap_tol}
    return VerificationReport(all(checks.values()), grid, rho, mean, disc, ly, checks)
