import copy
import json
import math

import numpy as np
import pytest

from cocycle_kam.analytic import AnalyticFunction, MatrixFunction
from cocycle_kam.cocycle import almost_mathieu_potential, schrodinger
from cocycle_kam.experiments import (CSV_HEADER, ScanRecord, check_drho_dE, check_rho_monotone, grid_cell,
                                     hs_integral, measure_estimate, scan_energies, serialize_run, summarize,
                                     verify_serialized)
from cocycle_kam.kam import KamConfig, reduce_to_rotations

H = 0.5


def record(E, status="converged", cert=True, **kw):
    base = dict(E=E, rho=0.2, rho_spread=1e-9, cert_pass=cert, kam_status=status, final_residual=1e-10,
                lyap=1e-5, wall_time=0.1)
    base.update(kw)
    return ScanRecord(**base)


class TestRecords:
    def test_csv_round_trip(self):
        r = record(0.25, final_residual=math.inf)
        line = r.csv_row()
        assert len(line.split(",")) == len(CSV_HEADER.split(","))
        back = ScanRecord.from_csv_row(line)
        assert back.E == r.E and back.kam_status == r.kam_status and math.isinf(back.final_residual)

    def test_dict_round_trip(self):
        r = record(-1.0, status="precondition_failed", cert=False, final_residual=math.inf, message="x")
        assert ScanRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r

    def test_invariants(self):
        with pytest.raises(ValueError):
            record(0.0, status="bogus")
        with pytest.raises(ValueError):
            record(0.0, status="converged", cert=False)


class TestSummary:
    def test_interval_counting(self):
        E = np.linspace(-2, 2, 11)
        assert grid_cell(E) == pytest.approx(0.4)
        assert measure_estimate(E, [True] * 3 + [False] * 8) == pytest.approx(1.2)
        assert grid_cell([1.0]) == 0.0

    def test_counts(self):
        recs = [record(-1.0), record(0.0, status="stalled"),
                record(1.0, status="precondition_failed", cert=False, final_residual=math.inf)]
        s = summarize(recs)
        assert (s.n_points, s.n_admitted, s.n_converged) == (3, 2, 1)
        assert s.converged_fraction == pytest.approx(1 / 3)
        assert s.converged_fraction_admitted == pytest.approx(0.5)
        assert s.measure == pytest.approx(1.0) and s.interval == (-1.0, 1.0)


class TestScan:
    def test_small_scan(self, golden, golden_cf):
        v = almost_mathieu_potential(1e-3, 64, H)
        E = [-1.2, 0.3, 2.5]
        res = scan_energies(v, golden, E, KamConfig(), golden_cf, n_lyap=500, keep_results=True)
        st = [r.kam_status for r in res.records]
        assert st[0] == st[1] == "converged"
        assert st[2] == "precondition_failed"  # outside the spectrum: hyperbolic
        assert res.records[2].lyap > 0.5
        assert set(res.results) == {0, 1}
        assert res.csv().splitlines()[0] == CSV_HEADER

    def test_parallel_matches_serial(self, golden, golden_cf):
        v = almost_mathieu_potential(1e-3, 64, H)
        E = [-0.9, 0.3]
        a = scan_energies(v, golden, E, KamConfig(), golden_cf, jobs=1, n_lyap=200)
        b = scan_energies(v, golden, E, KamConfig(), golden_cf, jobs=2, n_lyap=200)
        strip = lambda rs: [(r.E, r.rho, r.kam_status, r.final_residual, r.lyap) for r in rs]
        assert strip(a.records) == strip(b.records)

    def test_rejects_bad_input(self, golden):
        with pytest.raises(ValueError):
            scan_energies(almost_mathieu_potential(1e-3, 16, H), golden, [0.0, math.nan])
        v = AnalyticFunction.from_modes({1: 1.0}, 16, H, real_symmetric=False)
        with pytest.raises(ValueError):
            scan_energies(v, golden, [0.0])


class TestRotationChecks:
    def test_monotone(self, golden):
        rep = check_rho_monotone(almost_mathieu_potential(0.1, 32, H), golden, np.linspace(-2.5, 2.5, 21),
                                 n_iter=2000)
        assert rep.ok and rep.endpoints_ok and not rep.violations

    def test_grid_must_increase(self, golden):
        with pytest.raises(ValueError, match="strictly increasing"):
            check_rho_monotone(AnalyticFunction.constant(0.0, 16, H), golden, [0.0, 0.0, 1.0])

    def test_drho_free_closed_form(self, golden, golden_cf):
        rep = check_drho_dE(AnalyticFunction.constant(0.0, 64, H), golden, 0.0, KamConfig(), cf=golden_cf)
        assert rep.applicable
        assert rep.formula == pytest.approx(-1 / (4 * math.pi), rel=1e-6)
        assert rep.finite_difference == pytest.approx(-1 / (4 * math.pi), rel=0.05)

    def test_drho_not_applicable_outside_spectrum(self, golden, golden_cf):
        rep = check_drho_dE(almost_mathieu_potential(1e-3, 64, H), golden, 2.5, KamConfig(), cf=golden_cf,
                            n_rot=2000)
        assert not rep.applicable and "not applicable" in rep.message

    def test_hs_integral_of_constant(self):
        M = np.array([[2.0, 1.0], [0.0, 0.5]])
        assert hs_integral(MatrixFunction.constant(M, 8, H)) == pytest.approx((M ** 2).sum())


@pytest.fixture(scope="module")
def payload(golden, golden_cf):
    c = schrodinger(almost_mathieu_potential(1e-3, 64, H), 0.3, golden)
    cfg = KamConfig()
    res = reduce_to_rotations(c, cfg, golden_cf)
    assert res.status == "converged"
    return json.loads(json.dumps(serialize_run(c, res, cfg)))


class TestSerialized:
    def test_verifies(self, payload):
        rep = verify_serialized(payload, n_lyap=2000)
        assert rep.ok, rep.checks
        assert rep.grid_residual <= 1e-8 and rep.lyap <= 1e-3

    def test_detects_tampering(self, payload):
        bad = copy.deepcopy(payload)
        phi = bad["result"]["phi"]
        mid = len(phi["coeffs"]) // 2
        phi["coeffs"][mid][0] += 0.01
        rep = verify_serialized(bad, n_lyap=200)
        assert not rep.ok and not rep.checks["grid_residual"] and not rep.checks["rho"]

    def test_format_version(self, payload):
        with pytest.raises(ValueError):
            verify_serialized({**payload, "format_version": 99})
