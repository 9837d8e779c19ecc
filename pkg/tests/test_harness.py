import csv
import math

import numpy as np
import pytest

from masense.crb import bound_b_value
from masense.errors import InvalidInputError
from masense.harness import (
    PRESETS, SweepSpec, apply_sweep_value, dense_upa, diagnostics_report, evaluate_trial, run_sweep,
    single_target_ma_baseline, sparse_upa, sweep_degraded,
)
from masense.model import ScenarioConfig, validate_geometry
from masense.swarm import SwarmParams

LAMBDA = 0.05
FAST = SwarmParams(num_agents=3, max_outer=1, max_inner=2)


def test_dense_upa_16():
    g = dense_upa(16, LAMBDA)
    assert g.num_antennas == 16
    np.testing.assert_allclose(g.positions.mean(axis=0), 0, atol=1e-15)
    np.testing.assert_allclose(np.unique(g.x), np.array([-1.5, -0.5, 0.5, 1.5]) * 0.025)


def test_dense_upa_small_cases():
    np.testing.assert_array_equal(dense_upa(1, LAMBDA).positions, [[0.0, 0.0]])
    g = dense_upa(5, LAMBDA)
    h = LAMBDA / 2
    np.testing.assert_allclose(g.positions, [[-h, -h], [0, -h], [h, -h], [-h, 0], [0, 0]])


def test_sparse_upa():
    g = sparse_upa(16, 12 * LAMBDA)
    np.testing.assert_allclose(np.diff(np.unique(g.x)), 4 * LAMBDA)
    np.testing.assert_allclose(np.abs(g.positions).max(axis=0), [6 * LAMBDA, 6 * LAMBDA])
    np.testing.assert_allclose(np.diff(np.unique(sparse_upa(9, 6 * LAMBDA).y)), 3 * LAMBDA)
    with pytest.raises(InvalidInputError):
        sparse_upa(1, 0.3)


def test_apply_sweep_value():
    sc = ScenarioConfig()
    assert apply_sweep_value(sc, "region_size_over_lambda", 10).region_size == pytest.approx(0.5)
    a = apply_sweep_value(sc, "angle_range", 0.4)
    assert a.u_max == a.v_max == 0.4
    assert apply_sweep_value(sc, "num_snapshots", 32.0).num_snapshots == 32


def test_sweep_spec_validation():
    with pytest.raises(InvalidInputError):
        SweepSpec("snr_db", [])
    with pytest.raises(InvalidInputError):
        SweepSpec("snr_db", [10, 0])
    with pytest.raises(InvalidInputError):
        SweepSpec("bogus", [1])
    with pytest.raises(InvalidInputError):
        SweepSpec("snr_db", [1], schemes=("mystery",))


def test_degenerate_sweep_equals_direct_evaluation():
    sc = PRESETS["desk"].scenario
    spec = SweepSpec("snr_db", [10.0], trials_per_point=1, schemes=("dense_upa",), music_resolution=101)
    (pt,) = run_sweep(spec, sc, seed=4)
    crb, mse = evaluate_trial(dense_upa(8, LAMBDA, 0.3, 0.025), sc, 4, 0, 0, True, 101)
    assert (pt.crb_trace_mean, pt.mse_mean, pt.trials) == (crb, mse, 1)


def test_lower_bound_scheme_default_value():
    (pt,) = run_sweep(SweepSpec("snr_db", [10.0], 1, ("lower_bound",)), ScenarioConfig())
    assert pt.crb_trace_mean == pytest.approx(3.44e-7, rel=2e-3)
    assert pt.crb_trace_mean == bound_b_value(ScenarioConfig())


def test_crb_decreases_with_snr():
    spec = SweepSpec("snr_db", [0, 10, 20, 30], 5, ("sparse_upa",), compute_mse=False)
    pts = run_sweep(spec, PRESETS["desk"].scenario)
    crbs = [p.crb_trace_mean for p in pts]
    assert all(b < a for a, b in zip(crbs, crbs[1:]))
    assert all(math.isnan(p.mse_mean) for p in pts)


def _spec():
    return SweepSpec("snr_db", [0.0, 10.0], 2, ("proposed_ma", "dense_upa", "lower_bound"), num_samples=4,
                     music_resolution=61)


def test_sweep_resumes_byte_identical(tmp_path):
    sc = PRESETS["desk"].scenario
    full = tmp_path / "full"
    run_sweep(_spec(), sc, FAST, out_dir=full)
    text = (full / "curves.csv").read_text()
    part = tmp_path / "part"
    part.mkdir()
    lines = text.splitlines(keepends=True)
    (part / "curves.csv").write_text("".join(lines[:3]) + lines[3][:7])  # torn row
    pts = run_sweep(_spec(), sc, FAST, out_dir=part)
    assert (part / "curves.csv").read_text() == text
    assert len(pts) == 6


def test_sweep_independent_of_workers(tmp_path):
    sc = PRESETS["desk"].scenario
    run_sweep(_spec(), sc, FAST, out_dir=tmp_path / "a", workers=1)
    run_sweep(_spec(), sc, FAST, out_dir=tmp_path / "b", workers=2)
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()


def test_failed_trials_counted_and_flagged(tmp_path):
    sc = PRESETS["desk"].scenario.with_(u_max=0.0, v_max=0.0)
    (pt,) = run_sweep(SweepSpec("snr_db", [10.0], 3, ("dense_upa",), compute_mse=False), sc, out_dir=tmp_path)
    assert pt.failures == 3 and pt.trials == 0 and pt.flagged
    assert sweep_degraded([pt])
    rows = list(csv.reader(open(tmp_path / "curves.csv")))
    assert rows[0] == ["scheme", "x", "crb", "mse", "trials", "failures", "flagged"]
    assert rows[1][-1] == "1"


def test_single_target_baseline_feasible():
    sc = PRESETS["desk"].scenario
    g = single_target_ma_baseline(sc, FAST, num_samples=4)
    assert validate_geometry(g) == []


def test_diagnostics_report_files(tmp_path):
    sc = PRESETS["desk"].scenario
    geoms = {"dense_upa": dense_upa(8, LAMBDA), "sparse_upa": sparse_upa(8, 0.3)}
    rep = diagnostics_report(geoms, sc, (0.0, 0.0), tmp_path, grid_resolution=25, num_draws=3,
                             music_resolution=61)
    for name in ("diagnostics.csv", "correlation_grid.csv", "spectrum_grid.csv"):
        assert (tmp_path / name).exists()
    gu, gv = rep["grid"]
    assert rep["dense_upa"]["correlation"][12, 12] == pytest.approx(1.0)
    rows = list(csv.reader(open(tmp_path / "correlation_grid.csv")))
    assert rows[0] == ["scheme", "u", "v", "value"] and len(rows) == 1 + 2 * 25 * 25
    assert 0 <= rep["sparse_upa"]["rho_mean"] <= 1
