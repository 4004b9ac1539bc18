"""Command-line interface: ``cocycle-kam <subcommand> [options]``.

Every JSON artifact is wrapped as ``{"format_version", "run_config", "result"}``
so that it fully documents how it was produced and can be parsed back by the
library.  Scan CSVs start with a ``# run_config: {...}`` comment line
followed by the documented header.

Exit codes: 0 success / converged, 1 a check failed, 2 precondition failure
(domain error), 3 stalled reduction, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import AnalyticFunction, verify_denjoy_bounds
from .arithmetic import (ContinuedFraction, RationalOrExhausted, alpha_to_json, expand_cf, parse_alpha,
                         select_Q)
from .cocycle import almost_mathieu_potential, lyapunov, rotation_number, schrodinger
from .errors import CocycleKamError
from .experiments import (CSV_HEADER, check_drho_dE, check_rho_monotone, scan_energies, serialize_run,
                          verify_serialized)
from .kam import KamConfig, _jsonable, reduce_to_rotations

FORMAT_VERSION = 1
EXIT_OK, EXIT_CHECK_FAILED, EXIT_PRECONDITION, EXIT_STALLED, EXIT_USAGE = 0, 1, 2, 3, 64
STATUS_EXIT = {"converged": EXIT_OK, "precondition_failed": EXIT_PRECONDITION, "stalled": EXIT_STALLED}
COMMANDS = ("cf", "rotnum", "lyap", "kam-reduce", "scan", "check-rho", "check-drho", "verify-denjoy",
            "selftest", "verify")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything that determines a run; embedded in every output artifact."""
    command: str
    alpha: str | None = None
    quotients: list | None = None
    max_q: int = 10 ** 6
    potential: str = "cos"
    lam: float = 1e-3
    energy: float | None = None
    iters: int = 4000
    kam: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    out: str | None = None
    seed: int = 0
    version: str = __version__

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def kam_config(self) -> KamConfig:
        return KamConfig.from_dict(self.kam) if self.kam else KamConfig()


def envelope(rc: RunConfig, result) -> dict:
    return {"format_version": FORMAT_VERSION, "run_config": rc.to_dict(), "result": _jsonable(result)}


# --------------------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_alpha(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha", help="decimal literal, expr:golden or expr:sqrt2 (default expr:golden)")
    g.add_argument("--quotients", help="comma-separated partial quotients (exact mode)")
    p.add_argument("--max-q", type=int, default=10 ** 6, help="expand until q_k exceeds this")


def _add_potential(p, energy=True):
    p.add_argument("--potential", default="cos",
                   help="cos | lambda*cos (v = 2 lambda cos 2 pi x), zero, or file:<json AnalyticFunction>")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    if energy:
        p.add_argument("--energy", type=float, required=True)


def _add_kam(p):
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--h-star", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--nu", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--L", type=int, default=None, help="Fourier truncation degree")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--adaptive", dest="adaptive", action="store_true", default=None,
                      help="measured-contraction mode (default)")
    mode.add_argument("--formula", dest="adaptive", action="store_false",
                      help="formula-driven schedule (selected denominators, U_k targets)")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-outer", type=int, default=None)
    p.add_argument("--config", help="JSON file with KamConfig fields (flags override it)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cocycle-kam", description="Reduction of quasiperiodic SL(2,R) cocycles to rotations.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("cf", help="continued fraction and selected denominators")
    _add_alpha(c)
    c.add_argument("--select-q", action="store_true")
    c.add_argument("--tau", type=float, default=2.0)
    c.add_argument("--nu", type=float, default=0.4)
    c.add_argument("--eps", type=float, default=0.01)

    for name in ("rotnum", "lyap"):
        r = sub.add_parser(name, help=f"{'rotation number' if name == 'rotnum' else 'Lyapunov exponent'} "
                                      "of a Schrodinger cocycle")
        _add_alpha(r)
        _add_potential(r)
        r.add_argument("--iters", type=int, default=4000 if name == "rotnum" else 5000)

    k = sub.add_parser("kam-reduce", help="reduce a Schrodinger cocycle to rotations")
    _add_alpha(k)
    _add_potential(k)
    _add_kam(k)
    k.add_argument("--dump-state", help="write the serialized run (cocycle + result + config) here")

    s = sub.add_parser("scan", help="energy scan")
    _add_alpha(s)
    _add_potential(s, energy=False)
    _add_kam(s)
    s.add_argument("--e-min", type=float, default=-2.2)
    s.add_argument("--e-max", type=float, default=2.2)
    s.add_argument("--e-steps", type=int, default=200)
    s.add_argument("--lambda-list", help="comma-separated couplings (overrides --lambda)")
    s.add_argument("--csv", help="CSV path; with several couplings '_lam<lambda>' is appended to the stem")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default $COCYCLE_KAM_THREADS or 1)")
    s.add_argument("--lyap-iters", type=int, default=2000)
    s.add_argument("--keep-results", action="store_true", help="embed serialized converged runs")

    m = sub.add_parser("check-rho", help="monotonicity and range of E -> rho(E)")
    _add_alpha(m)
    _add_potential(m, energy=False)
    m.add_argument("--e-min", type=float, default=None)
    m.add_argument("--e-max", type=float, default=None)
    m.add_argument("--e-steps", type=int, default=100)
    m.add_argument("--iters", type=int, default=4000)

    d = sub.add_parser("check-drho", help="d rho/dE against the Hilbert-Schmidt formula")
    _add_alpha(d)
    _add_potential(d)
    _add_kam(d)
    d.add_argument("--dE", type=float, default=None)

    v = sub.add_parser("verify-denjoy", help="empirical constants of the Birkhoff-sum bounds")
    _add_alpha(v)
    v.add_argument("--tau", type=float, default=2.0)
    v.add_argument("--nu", type=float, default=0.4)
    v.add_argument("--eps", type=float, default=0.01)
    v.add_argument("--h", type=float, default=0.5)
    v.add_argument("--eta", type=float, default=0.01)
    v.add_argument("--f", default="cos+0.3cos2", help="cos+0.3cos2 (default) or file:<json AnalyticFunction>")

    sub.add_parser("selftest", help="closed-form sanity suite")

    w = sub.add_parser("verify", help="re-verify a dumped converged run from its file alone")
    w.add_argument("input")

    for sp in sub.choices.values():
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomized fixtures (recorded)")
    return p


# --------------------------------------------------------------------------- helpers

def _alpha_and_cf(args):
    if getattr(args, "quotients", None):
        try:
            qs = [int(x) for x in args.quotients.split(",") if x.strip()]
        except ValueError as e:
            raise UsageError(f"bad --quotients: {e}") from None
        if not qs or min(qs) < 1:
            raise UsageError("--quotients needs positive integers")
        cf = ContinuedFraction.from_quotients(qs, max_q=args.max_q)
        return cf.alpha, cf
    try:
        alpha = parse_alpha(args.alpha or "expr:golden")
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad --alpha: {e}") from None
    if not 0 < alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    try:
        cf = expand_cf(alpha, args.max_q)
    except RationalOrExhausted as e:
        cf = e.partial
    return alpha, cf


def _potential(spec: str, lam: float, L: int = 64) -> AnalyticFunction:
    spec = spec.strip()
    if spec in ("cos", "lambda*cos", "2*lambda*cos"):
        return almost_mathieu_potential(lam, L, 0.5)
    if spec == "zero":
        return AnalyticFunction.constant(0.0, L, 0.5)
    if spec.startswith("file:"):
        return AnalyticFunction.from_dict(json.loads(Path(spec[5:]).read_text()))
    raise UsageError(f"unknown potential {spec!r}")


def _kam_config(args) -> KamConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    cfg = KamConfig.from_dict(base) if base else KamConfig()
    d = cfg.to_dict()
    for flag, key in (("h", "h"), ("h_star", "h_star"), ("tau", "tau"), ("nu", "nu"), ("eps", "eps"),
                      ("L", "L"), ("adaptive", "adaptive"), ("tol", "tol_residual"), ("max_outer", "max_outer")):
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    if d["h_star"] >= d["h"]:
        d["h_star"] = d["h"] / 5
    try:
        return KamConfig.from_dict(d)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _run_config(args, cfg: KamConfig | None = None, **experiment) -> RunConfig:
    return RunConfig(command=args.command, alpha=getattr(args, "alpha", None) or
                     (None if getattr(args, "quotients", None) else "expr:golden"),
                     quotients=[int(x) for x in args.quotients.split(",")] if getattr(args, "quotients", None) else None,
                     max_q=getattr(args, "max_q", 10 ** 6), potential=getattr(args, "potential", "cos"),
                     lam=getattr(args, "lam", 1e-3), energy=getattr(args, "energy", None),
                     iters=getattr(args, "iters", 0) or 0, kam=cfg.to_dict() if cfg else {},
                     experiment=experiment, out=args.out, seed=args.seed)


def _emit(args, payload: dict):
    text = json.dumps(payload, indent=2, allow_nan=False, default=str)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# --------------------------------------------------------------------------- subcommands

def cmd_cf(args) -> int:
    alpha, cf = _alpha_and_cf(args)
    res = {"alpha": alpha_to_json(alpha), "quotients": list(cf.partial_quotients),
           "convergents": [[str(p) if p > 2 ** 53 else p, str(q) if q > 2 ** 53 else q] for p, q in cf.convergents],
           "q": [str(q) if q > 2 ** 53 else q for q in cf.q], "exhausted": cf.exhausted}
    cfg = None
    if args.select_q:
        cfg = KamConfig(tau=args.tau, nu=args.nu, eps=args.eps)
        seq = select_Q(cf, cfg.params)
        res["selected"] = seq.to_dict()
    _emit(args, envelope(_run_config(args, cfg), res))
    return EXIT_OK


def cmd_rotnum(args) -> int:
    alpha, cf = _alpha_and_cf(args)
    c = schrodinger(_potential(args.potential, args.lam), args.energy, alpha)
    est = rotation_number(c, args.iters)
    _emit(args, envelope(_run_config(args), est.to_dict()))
    return EXIT_OK


def cmd_lyap(args) -> int:
    alpha, _ = _alpha_and_cf(args)
    c = schrodinger(_potential(args.potential, args.lam), args.energy, alpha)
    est = lyapunov(c, args.iters)
    _emit(args, envelope(_run_config(args), est.to_dict()))
    return EXIT_OK


def cmd_kam_reduce(args) -> int:
    alpha, cf = _alpha_and_cf(args)
    cfg = _kam_config(args)
    c = schrodinger(_potential(args.potential, args.lam, cfg.L), args.energy, alpha)
    res = reduce_to_rotations(c, cfg, cf=cf)
    rc = _run_config(args, cfg)
    if args.dump_state:
        Path(args.dump_state).write_text(json.dumps(
            {**serialize_run(c, res, cfg), "run_config": rc.to_dict()}, allow_nan=False, default=str))
    _emit(args, envelope(rc, res.to_dict()))
    return STATUS_EXIT[res.status]


def _csv_path(base: str, lam: float, many: bool) -> Path:
    p = Path(base)
    return p.with_name(f"{p.stem}_lam{lam:g}{p.suffix}") if many else p


def cmd_scan(args) -> int:
    alpha, cf = _alpha_and_cf(args)
    cfg = _kam_config(args)
    if args.e_steps < 2 or not args.e_min < args.e_max:
        raise UsageError("need e-min < e-max and e-steps >= 2")
    try:
        lams = [float(x) for x in args.lambda_list.split(",")] if args.lambda_list else [args.lam]
    except ValueError as e:
        raise UsageError(f"bad --lambda-list: {e}") from None
    jobs = args.jobs if args.jobs is not None else int(os.environ.get("COCYCLE_KAM_THREADS", "1") or 1)
    if jobs < 1:
        raise UsageError("--jobs must be positive")
    E = np.linspace(args.e_min, args.e_max, args.e_steps)
    rc = _run_config(args, cfg, e_min=args.e_min, e_max=args.e_max, e_steps=args.e_steps, lambda_list=lams,
                     jobs=jobs, lyap_iters=args.lyap_iters, csv=args.csv, keep_results=args.keep_results)
    out = []
    for lam in lams:
        res = scan_energies(_potential(args.potential, lam, cfg.L), alpha, E, cfg, cf=cf, jobs=jobs,
                            n_lyap=args.lyap_iters, keep_results=args.keep_results)
        entry = {"lambda": lam, "summary": res.summary.to_dict(), "records": [r.to_dict() for r in res.records]}
        if args.keep_results:
            entry["converged_runs"] = {str(i): p for i, p in res.results.items()}
        out.append(entry)
        if args.csv:
            _csv_path(args.csv, lam, len(lams) > 1).write_text(
                "# run_config: " + json.dumps({**rc.to_dict(), "lam": lam}, default=str) + "\n" + res.csv())
    _emit(args, envelope(rc, {"scans": out}))
    return EXIT_OK


def cmd_check_rho(args) -> int:
    alpha, _ = _alpha_and_cf(args)
    v = _potential(args.potential, args.lam)
    vmax = float(np.abs(v.grid_values()).max())
    lo = args.e_min if args.e_min is not None else -2 - 2 * vmax - 0.05
    hi = args.e_max if args.e_max is not None else 2 + 2 * vmax + 0.05
    rep = check_rho_monotone(v, alpha, np.linspace(lo, hi, args.e_steps), args.iters)
    _emit(args, envelope(_run_config(args, e_min=lo, e_max=hi, e_steps=args.e_steps), rep.to_dict()))
    return EXIT_OK if rep.ok else EXIT_CHECK_FAILED


def cmd_check_drho(args) -> int:
    alpha, cf = _alpha_and_cf(args)
    cfg = _kam_config(args)
    rep = check_drho_dE(_potential(args.potential, args.lam, cfg.L), alpha, args.energy, cfg, args.dE, cf)
    _emit(args, envelope(_run_config(args, cfg, dE=rep.dE), rep.to_dict()))
    if not rep.applicable:
        return EXIT_PRECONDITION
    return EXIT_OK if rep.relative_discrepancy <= 0.05 else EXIT_CHECK_FAILED


def cmd_verify_denjoy(args) -> int:
    _, cf = _alpha_and_cf(args)
    cfg = KamConfig(tau=args.tau, nu=args.nu, eps=args.eps)
    if args.f == "cos+0.3cos2":
        f = AnalyticFunction.cos(1, 1.0) + AnalyticFunction.cos(2, 0.3)
    elif args.f.startswith("file:"):
        f = AnalyticFunction.from_dict(json.loads(Path(args.f[5:]).read_text()))
    else:
        raise UsageError(f"unknown test function {args.f!r}")
    seq = select_Q(cf, cfg.params)
    rep = verify_denjoy_bounds(f, cf, seq, cfg.params, args.h, args.eta)
    _emit(args, envelope(_run_config(args, cfg, h=args.h, eta=args.eta, f=args.f),
                         {"selected": seq.to_dict(), "report": rep.to_dict()}))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    results = run_selftest()
    for name, ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({msg})" if msg else ""), file=sys.stderr)
    failed = [n for n, ok, _ in results if not ok]
    _emit(args, envelope(_run_config(args), {"passed": len(results) - len(failed), "failed": failed}))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_verify(args) -> int:
    payload = json.loads(Path(args.input).read_text())
    rep = verify_serialized(payload)
    _emit(args, envelope(_run_config(args, input=args.input), rep.to_dict()))
    return EXIT_OK if rep.ok else EXIT_CHECK_FAILED


HANDLERS = {"cf": cmd_cf, "rotnum": cmd_rotnum, "lyap": cmd_lyap, "kam-reduce": cmd_kam_reduce,
            "scan": cmd_scan, "check-rho": cmd_check_rho, "check-drho": cmd_check_drho,
            "verify-denjoy": cmd_verify_denjoy, "selftest": cmd_selftest, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return HANDLERS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CocycleKamError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())
