import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from masense.crb import crb_matrix
from masense.errors import GradientEvaluationError, InvalidInputError, SingularFimError
from masense.model import ArrayGeometry, ScenarioConfig, full_aperture_upa, stream_rng, validate_geometry
from masense.swarm import (
    AntennaObjective, SwarmParams, SwarmState, backtracking_step, crb_traces, draw_sample_set,
    expected_crb_trace, numeric_gradient, optimize_positions, project_to_region, swarm_descent, update_masses,
    write_trace_csv,
)

from conftest import LAMBDA


@pytest.fixture(scope="module")
def small():
    sc = ScenarioConfig(num_antennas=6, num_targets=2, region_size=0.2, num_snapshots=8)
    return sc, draw_sample_set(sc, 10, stream_rng(0, 2))


# ---------------------------------------------------------------- sample sets

def test_degenerate_box_puts_targets_at_origin():
    sc = ScenarioConfig(num_antennas=4, num_targets=1, u_max=0.0, v_max=0.0)
    s = draw_sample_set(sc, 1)
    assert s.u.tolist() == [[0.0]] and s.v.tolist() == [[0.0]]


def test_sample_set_deterministic_and_frozen():
    sc = ScenarioConfig()
    a = draw_sample_set(sc, 5, stream_rng(3, 2))
    b = draw_sample_set(sc, 5, stream_rng(3, 2))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.sources, b.sources)
    with pytest.raises(ValueError):
        a.u[0, 0] = 1.0


def test_sample_mean_clt():
    sc = ScenarioConfig(num_antennas=2, num_targets=1, num_snapshots=1)
    M = 10_000
    s = draw_sample_set(sc, M, stream_rng(9, 2))
    assert abs(s.u.mean()) < 3 * (0.6 / math.sqrt(3)) / math.sqrt(M)


# ---------------------------------------------------------------- objective

def test_single_sample_equals_crb(small):
    sc, s = small
    g = full_aperture_upa(6, sc.region_size)
    one = s.subset(1)
    ref = crb_matrix(g, one.targets(0), one.sources[0], sc.noise_power, LAMBDA).trace
    assert expected_crb_trace(g, one, sc.noise_power, LAMBDA) == pytest.approx(ref, rel=1e-9)


def test_duplicated_set_same_value(small):
    sc, s = small
    g = full_aperture_upa(6, sc.region_size)
    a = expected_crb_trace(g, s, sc.noise_power, LAMBDA)
    assert expected_crb_trace(g, s.duplicated(), sc.noise_power, LAMBDA) == pytest.approx(a, rel=1e-14)


def test_monte_carlo_convergence():
    sc = ScenarioConfig(num_antennas=9, num_targets=2, region_size=0.3, num_snapshots=8)
    g = full_aperture_upa(9, sc.region_size)
    big = crb_traces(g, draw_sample_set(sc, 5000, stream_rng(1, 2)), sc.noise_power, LAMBDA)
    small_mean = expected_crb_trace(g, draw_sample_set(sc, 50, stream_rng(2, 2)), sc.noise_power, LAMBDA)
    se = big.std(ddof=1) / math.sqrt(len(big))
    se_small = big.std(ddof=1) / math.sqrt(50)
    assert abs(small_mean - big.mean()) < 3 * math.hypot(se, se_small)


def test_singular_sample_reported_with_index():
    sc = ScenarioConfig(num_antennas=4, num_targets=2, u_max=0.0, v_max=0.0)
    s = draw_sample_set(sc, 2)
    with pytest.raises(SingularFimError) as exc:
        expected_crb_trace(full_aperture_upa(4, 0.3), s, 0.1, LAMBDA)
    assert exc.value.sample == 0


def test_antenna_objective_matches_full_evaluation(small):
    sc, s = small
    g = full_aperture_upa(6, sc.region_size)
    obj = AntennaObjective(g, 2, s, sc.noise_power, LAMBDA)
    p = np.array([0.013, -0.04])
    assert obj(p) == pytest.approx(expected_crb_trace(g.moved(2, p), s, sc.noise_power, LAMBDA), rel=1e-9)


# ---------------------------------------------------------------- gradient / projection

def test_gradient_quadratic():
    p = np.array([0.3, -0.2])
    g = numeric_gradient(lambda q: float(q @ q), p, 1e-5)
    np.testing.assert_allclose(g, 2 * p, atol=1e-8)


def test_gradient_constant_is_zero():
    assert np.all(numeric_gradient(lambda q: 4.0, [0.1, 0.2], 1e-4, 1.0) == 0)


def test_gradient_one_sided_on_boundary():
    g = numeric_gradient(lambda q: 3 * q[0] + q[1] ** 2, [0.5, 0.0], 1e-4, 1.0)
    assert g[0] == pytest.approx(3.0, rel=1e-9)


def test_gradient_failure_raises():
    def bad(q):
        if q[0] > 0:
            raise SingularFimError("boom")
        return 0.0

    with pytest.raises(GradientEvaluationError):
        numeric_gradient(bad, [0.0, 0.0], 1e-4)


def test_gradient_richardson_consistency(small):
    sc, s = small
    g = full_aperture_upa(6, sc.region_size)
    obj = AntennaObjective(g, 4, s, sc.noise_power, LAMBDA)
    p = np.array([0.021, 0.017])
    d = 1e-4 * LAMBDA
    g1 = numeric_gradient(obj, p, d, sc.region_size)
    g2 = numeric_gradient(obj, p, d / 2, sc.region_size)
    assert np.linalg.norm(g1 - g2) <= 1e-3 * np.linalg.norm(g2)


def test_projection_examples():
    A = 0.6
    np.testing.assert_array_equal(project_to_region([0.1, -0.2], A), [0.1, -0.2])
    np.testing.assert_array_equal(project_to_region([A, -A], A), [A / 2, -A / 2])
    np.testing.assert_array_equal(project_to_region([-A / 2, 0], A), [-A / 2, 0])


# ---------------------------------------------------------------- masses

def _state(values, masses=None):
    st_ = SwarmState.start(np.zeros((len(values), 2)), values)
    if masses is not None:
        st_ = SwarmState(st_.positions, np.array(masses, float), st_.relative_masses, st_.values)
    return st_


def test_mass_transfer_examples():
    out = update_masses(_state([1.0, 3.0, 2.0]), 2.0)
    g0 = 1 / 3
    assert out.masses[1] == 0.0  # worst agent gives everything
    assert out.masses[2] == pytest.approx(g0 * (1 - 0.25))
    assert out.masses[0] == pytest.approx(g0 + g0 + g0 * 0.25)
    assert out.relative_masses[0] == 1.0


def test_mass_guard_for_flat_swarm():
    out = update_masses(_state([2.0, 2.0, 2.0 * (1 + 1e-17)]), 2.0)
    np.testing.assert_array_equal(out.masses, np.full(3, 1 / 3))


@given(st.lists(st.floats(1e-9, 1e3), min_size=1, max_size=30), st.floats(0.1, 4.0))
def test_mass_conservation(values, p):
    rng = np.random.default_rng(len(values))
    m = rng.dirichlet(np.ones(len(values)))
    out = update_masses(_state(values, m), p)
    assert abs(out.masses.sum() - 1.0) < 1e-12
    assert np.all(out.masses >= 0) and np.all(out.relative_masses <= 1)
    i0 = int(np.argmin(values))
    assert out.masses[i0] >= m[i0]


# ---------------------------------------------------------------- backtracking

PARAMS = SwarmParams(max_step=1.0, gradient_step=1e-6)


def test_zero_gradient_stays_put():
    out = backtracking_step(lambda q: 1.0, [0.1, 0.1], 1.0, [0.0, 0.0], 1.0, PARAMS)
    np.testing.assert_array_equal(out.position, [0.1, 0.1])
    assert out.step == 1.0 and out.value == 1.0


def test_convex_quadratic_descends():
    f = lambda q: float((q[0] - 0.2) ** 2 + 3 * (q[1] + 0.1) ** 2)
    p = np.array([0.5, 0.4])
    out = backtracking_step(f, p, f(p), numeric_gradient(f, p, 1e-6), 1.0, PARAMS)
    assert out.value < f(p) and out.step > 0


def test_spacing_forces_shrink():
    grad = np.array([1.0, 0.0])
    dmin = 0.6
    neighbor = np.array([-(dmin + 0.5 * PARAMS.max_step), 0.0])
    feasible = lambda q: np.hypot(*(q - neighbor)) >= dmin
    out = backtracking_step(lambda q: float(q[0]), [0.0, 0.0], 0.0, grad, 1.0, PARAMS, feasible=feasible)
    assert out.step == 0.5
    assert np.hypot(*(out.position - neighbor)) >= dmin


def test_stall_returns_old_position():
    out = backtracking_step(lambda q: 1.0 + q[0] ** 2 * 0, [0.0, 0.0], 1.0, [1.0, 0.0], 1.0,
                            SwarmParams(max_step=1.0, max_backtracks=5))
    assert out.step == 0.0 and out.position.tolist() == [0.0, 0.0]


# ---------------------------------------------------------------- single agent = projected GD

def _reference_pgd(f, p, params, A, iters):
    """Straightforward projected gradient descent with Armijo backtracking."""
    values = []
    val = f(p)
    prev = val
    for _ in range(iters):
        g = np.zeros(2)
        for ax in range(2):
            e = np.zeros(2)
            e[ax] = params.gradient_step
            hi, lo = np.clip(p + e, -A / 2, A / 2), np.clip(p - e, -A / 2, A / 2)
            g[ax] = (f(hi) - f(lo)) / (hi[ax] - lo[ax])
        tau = params.max_step
        for _b in range(params.max_backtracks + 1):
            c = np.clip(p - tau * g, -A / 2, A / 2)
            fc = f(c)
            if fc <= val - params.armijo * tau * (g @ g):
                p, val = c, fc
                break
            tau *= params.shrink_factor
        values.append(val)
        if prev - val <= params.tolerance * abs(prev):
            break
        prev = val
    return p, values


def test_single_agent_matches_projected_gd():
    f = lambda q: float((q[0] - 0.8) ** 2 + 2 * (q[1] + 0.1) ** 2 + 0.1 * np.sin(5 * q[0]) + 1.0)
    params = SwarmParams(num_agents=1, max_step=0.3, gradient_step=1e-6, max_inner=40, tolerance=1e-12)
    p0 = np.array([-0.3, 0.4])
    ref_p, ref_vals = _reference_pgd(f, p0.copy(), params, 1.0, 40)
    out = swarm_descent(f, SwarmState.start([p0], [f(p0)]), params, 1.0)
    assert len(out.history) == len(ref_vals)
    np.testing.assert_allclose(out.history, ref_vals, atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.position, ref_p, atol=1e-10)
    assert out.position[0] == 0.5  # minimum lies outside the region


# ---------------------------------------------------------------- full optimizer

def test_zero_outer_iterations_returns_initial(small):
    sc, s = small
    res = optimize_positions(sc, SwarmParams(max_outer=0), s)
    init = full_aperture_upa(6, sc.region_size)
    np.testing.assert_array_equal(res.geometry.positions, init.positions)
    assert res.objective == res.initial_objective == pytest.approx(expected_crb_trace(init, s, sc.noise_power, LAMBDA))


def _tiny_run(seed):
    sc = ScenarioConfig(num_antennas=4, num_targets=1, region_size=0.1, u_max=0.3, v_max=0.3, num_snapshots=8,
                        seed=seed)
    s = draw_sample_set(sc, 5)
    return optimize_positions(sc, SwarmParams(num_agents=4, max_inner=5, max_outer=5), s)


def test_tiny_run_improves_monotonically():
    res = _tiny_run(3)
    assert res.objective <= res.initial_objective
    assert np.all(np.diff(res.history) <= 0)
    assert validate_geometry(res.geometry) == []


def test_optimizer_deterministic():
    a, b = _tiny_run(5), _tiny_run(5)
    assert a.geometry.positions.tobytes() == b.geometry.positions.tobytes()
    assert a.trace == b.trace


def test_infeasible_initial_geometry_rejected(small):
    sc, s = small
    bad = ArrayGeometry(np.zeros((6, 2)))
    with pytest.raises(InvalidInputError):
        optimize_positions(sc, SwarmParams(max_outer=1), s, bad)


def test_agent_initialization_failure_flagged():
    sc = ScenarioConfig(num_antennas=4, num_targets=1, region_size=0.05, min_spacing=0.05, num_snapshots=4)
    s = draw_sample_set(sc, 3)
    res = optimize_positions(sc, SwarmParams(num_agents=3, max_outer=1, max_inner=2), s)
    assert res.flags["agent_init_failures"] == 4 * 2
    assert validate_geometry(res.geometry) == []


def test_trace_csv(tmp_path):
    res = _tiny_run(1)
    write_trace_csv(tmp_path / "trace.csv", res.trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "outer,antenna,inner,best_objective"
    assert len(lines) == len(res.trace) + 1


def test_params_validation_and_defaults():
    p = SwarmParams().resolved(0.05)
    assert p.max_step == pytest.approx(0.0125) and p.gradient_step == pytest.approx(5e-6)
    assert (p.num_agents, p.mass_exponent, p.step_exponent, p.armijo, p.max_outer, p.max_inner) == (25, 2, 0.5, 0.6, 50, 50)
    with pytest.raises(InvalidInputError):
        SwarmParams(shrink_factor=1.0)


def test_geometry_stable_across_sample_counts():
    # Optimizing on 20 or 100 Monte Carlo draws gives geometries of similar quality out of sample.
    from masense.harness import sparse_upa
    sc = ScenarioConfig(num_antennas=8, num_targets=3, region_size=6 * LAMBDA, num_snapshots=16, snr_db=10.0)
    params = SwarmParams(num_agents=8, max_outer=10, max_inner=10)
    fresh = draw_sample_set(sc, 2000, stream_rng(0, 0, 999))
    values = [expected_crb_trace(optimize_positions(sc, params, draw_sample_set(sc, M)).geometry, fresh,
                                 sc.noise_power, LAMBDA) for M in (20, 100)]
    sparse = expected_crb_trace(sparse_upa(8, sc.region_size), fresh, sc.noise_power, LAMBDA)
    assert max(values) / min(values) < 1.5
    assert max(values) < sparse / 3
