import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from masense.errors import InvalidInputError
from masense.harness import dense_upa
from masense.model import SnapshotBundle, SpatialAngle, TargetSet, sample_covariance, steering_vector, synthesize_snapshots
from masense.music import (
    MusicSpectrum, estimate_aoas, evaluate_mse, match_estimates, music_spectrum, noise_subspace, trial_rows,
)

from conftest import LAMBDA


def noiseless_cov(g, t, T=50, seed=0):
    rng = np.random.default_rng(seed)
    S = (rng.standard_normal((len(t), T)) + 1j * rng.standard_normal((len(t), T))) / np.sqrt(2)
    A = steering_vector(g, t, LAMBDA)
    return sample_covariance(A @ S)


def test_noise_subspace_orthogonal_to_steering():
    g = dense_upa(9, LAMBDA)
    t = TargetSet([0.1, -0.4], [0.3, 0.0])
    Uz, eig, tie = noise_subspace(noiseless_cov(g, t), 2)
    assert Uz.shape == (9, 7) and not tie
    np.testing.assert_allclose(Uz.conj().T @ steering_vector(g, t, LAMBDA), 0, atol=1e-10)
    assert np.all(np.diff(eig) <= 0)


def test_noise_subspace_rejects_bad_k():
    with pytest.raises(InvalidInputError):
        noise_subspace(np.eye(4), 4)


def test_tie_warning():
    with pytest.warns(RuntimeWarning):
        spec = music_spectrum(np.diag([3.0, 2.0, 1.0, 1.0]).astype(complex), dense_upa(4, LAMBDA), 3, LAMBDA,
                              grid_resolution=11)
    assert spec.tie_warning


def test_on_grid_targets_recovered_exactly():
    g = dense_upa(16, LAMBDA)
    t = TargetSet([0.15, -0.3], [0.45, -0.06])  # on the 0.003-step grid
    spec = music_spectrum(noiseless_cov(g, t), g, 2, LAMBDA, grid_resolution=401)
    picks = estimate_aoas(spec, 2, refine=False)
    got = sorted((round(a.u, 9), round(a.v, 9)) for a in picks.angles)
    assert got == sorted([(0.15, 0.45), (-0.3, -0.06)])


def test_refinement_beats_grid_quantization():
    g = dense_upa(16, LAMBDA)
    t = TargetSet([0.1234], [-0.2871])
    spec = music_spectrum(noiseless_cov(g, t), g, 1, LAMBDA, grid_resolution=101)  # step 0.012
    coarse = match_estimates(t, estimate_aoas(spec, 1, refine=False).angles).total_mse_contribution
    fine = match_estimates(t, estimate_aoas(spec, 1, refine=True).angles).total_mse_contribution
    assert fine < coarse / 10
    assert fine < (0.012 / 10) ** 2


def test_padding_when_too_few_peaks():
    grid = np.linspace(-1, 1, 5)
    vals = np.zeros((5, 5))
    vals[2, 2] = 1.0
    vals[0, 0] = 0.5  # two strict maxima in total, four requested
    spec = MusicSpectrum(grid, grid, vals, 1, denominators=1 / (vals + 1e-3))
    picks = estimate_aoas(spec, 4)
    assert picks.padded and len(picks.angles) == 4
    assert (picks.angles[0].u, picks.angles[0].v) == (0.0, 0.0)


def test_peak_ordering_ties_lexicographic():
    grid = np.linspace(-0.6, 0.6, 7)
    vals = np.zeros((7, 7))
    vals[1, 5] = vals[5, 1] = vals[1, 1] = 2.0
    spec = MusicSpectrum(grid, grid, vals, 3, denominators=1 / (vals + 1e-3))
    picks = estimate_aoas(spec, 3, refine=False)
    assert [(round(a.u, 3), round(a.v, 3)) for a in picks.angles] == [(-0.4, -0.4), (-0.4, 0.4), (0.4, -0.4)]
    assert not picks.padded


@given(st.permutations(range(5)))
def test_assignment_permutation_invariant(perm):
    rng = np.random.default_rng(0)
    truth = TargetSet(rng.uniform(-0.5, 0.5, 5), rng.uniform(-0.5, 0.5, 5))
    est = truth.as_array() + rng.normal(0, 0.01, (5, 2))
    base = match_estimates(truth, est).total_mse_contribution
    assert match_estimates(truth, est[list(perm)]).total_mse_contribution == pytest.approx(base, rel=1e-12)


def test_hungarian_matches_brute_force_above_exhaustive_limit():
    rng = np.random.default_rng(7)
    t = rng.uniform(-0.5, 0.5, (8, 2))
    e = rng.uniform(-0.5, 0.5, (8, 2))
    cost = np.sum((t[:, None] - e[None]) ** 2, axis=2)
    brute = min(cost[np.arange(8), p].sum() for p in itertools.permutations(range(8)))
    res = match_estimates(TargetSet(t[:, 0], t[:, 1]), e)
    assert res.total_mse_contribution == pytest.approx(brute, rel=1e-12)


def test_match_k_mismatch():
    with pytest.raises(InvalidInputError):
        match_estimates(TargetSet([0.0, 0.1], [0.0, 0.1]), [(0.0, 0.0)])


def test_evaluate_mse_shared_and_per_trial():
    truth = TargetSet([0.0], [0.0])
    est = [[SpatialAngle(0.1, 0.0)], [SpatialAngle(0.0, 0.2)]]
    assert evaluate_mse(truth, est) == pytest.approx((0.01 + 0.04) / 2)
    truths = [TargetSet([0.1], [0.0]), TargetSet([0.0], [0.0])]
    assert evaluate_mse(truths, est) == pytest.approx(0.02)
    with pytest.raises(InvalidInputError):
        evaluate_mse(truths[:1], est)


def test_trial_rows_format():
    res = match_estimates(TargetSet([0.1, 0.2], [0.0, 0.0]), [(0.2, 0.0), (0.1, 0.01)])
    rows = trial_rows(3, res)
    assert rows[0][:2] == [3, 0] and float(rows[0][-1]) == pytest.approx(1e-4)


def test_noisy_high_snr_estimate_close():
    g = dense_upa(16, LAMBDA)
    t = TargetSet([0.2, -0.35], [0.1, 0.4])
    rng = np.random.default_rng(11)
    S = np.exp(2j * np.pi * rng.random((2, 64)))
    out = synthesize_snapshots(g, t, SnapshotBundle(S, 1e-3), LAMBDA, rng)
    spec = music_spectrum(sample_covariance(out.received), g, 2, LAMBDA)
    err = match_estimates(t, estimate_aoas(spec, 2).angles).total_mse_contribution
    assert err < 1e-5


def test_target_near_box_edge_refined_off_grid():
    g = dense_upa(16, LAMBDA)
    t = TargetSet([0.5952], [-0.0008])
    spec = music_spectrum(noiseless_cov(g, t), g, 1, LAMBDA, grid_resolution=101)  # step 0.012
    est = estimate_aoas(spec, 1).angles[0]
    assert abs(est.u - 0.5952) < 1e-9 and abs(est.v + 0.0008) < 1e-9


def test_mse_insensitive_to_grid_resolution():
    from masense.harness import evaluate_trial
    from masense.model import ScenarioConfig
    sc = ScenarioConfig(num_targets=1, snr_db=30.0, num_snapshots=64)
    g = dense_upa(16, LAMBDA)
    coarse = np.mean([evaluate_trial(g, sc, 6, 0, k, True, 101)[1] for k in range(60)])
    fine = np.mean([evaluate_trial(g, sc, 6, 0, k, True, 401)[1] for k in range(60)])
    assert coarse == pytest.approx(fine, rel=1e-6)
