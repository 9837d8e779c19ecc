"""Swarm-based projected gradient descent over antenna positions.

The objective is the Monte-Carlo average of ``tr(CRB)`` over a frozen set of
target/source realizations (common random numbers).  Antennas are optimized
one at a time (alternating optimization); for each antenna a small swarm of
candidate positions descends the objective with mass-weighted backtracking.

Moving one antenna only changes its own rank-one term of the per-sample Gram
matrix (see ``masense._kernels_py``), so each candidate evaluation costs
``O(M K^3)`` instead of ``O(M N K^2)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .errors import GradientEvaluationError, InvalidInputError, SingularFimError
from .model import (
    STREAM_AGENTS, STREAM_TARGETS, ArrayGeometry, ScenarioConfig, TargetSet, draw_realization,
    full_aperture_upa, stream_rng, validate_geometry,
)

DEFAULT_SAMPLES = 100
AGENT_INIT_ATTEMPTS = 1000
KAPPA_GUARD = 1e-15


@dataclass(frozen=True)
class SwarmParams:
    """Algorithm settings. ``max_step`` and ``gradient_step`` are in meters;
    ``None`` means ``0.25 * wavelength`` and ``1e-4 * wavelength``."""

    num_agents: int = 25
    mass_exponent: float = 2.0
    step_exponent: float = 0.5
    max_step: float | None = None
    shrink_factor: float = 0.5
    armijo: float = 0.6
    max_outer: int = 50
    max_inner: int = 50
    max_backtracks: int = 40
    tolerance: float = 1e-3
    gradient_step: float | None = None

    def __post_init__(self):
        if self.num_agents < 1:
            raise InvalidInputError("need at least one agent")
        if not (self.mass_exponent > 0 and self.step_exponent > 0):
            raise InvalidInputError("mass and step exponents must be positive")
        if not 0 < self.shrink_factor < 1:
            raise InvalidInputError("shrink_factor must lie in (0, 1)")
        if not 0 < self.armijo < 1:
            raise InvalidInputError("armijo must lie in (0, 1)")
        if self.max_outer < 0 or self.max_inner < 0 or self.max_backtracks < 0:
            raise InvalidInputError("iteration limits must be non-negative")
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be positive")
        for name in ("max_step", "gradient_step"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InvalidInputError(f"{name} must be positive")

    def resolved(self, wavelength) -> "SwarmParams":
        """Copy with the wavelength-relative defaults filled in."""
        return replace(
            self,
            max_step=0.25 * wavelength if self.max_step is None else self.max_step,
            gradient_step=1e-4 * wavelength if self.gradient_step is None else self.gradient_step,
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_mapping(cls, mapping) -> "SwarmParams":
        kinds = {"num_agents": int, "max_outer": int, "max_inner": int, "max_backtracks": int}
        kwargs = {}
        for key in cls.__dataclass_fields__:
            if key in mapping and mapping[key] not in (None, "", "None"):
                kind = kinds.get(key, float)
                kwargs[key] = kind(float(mapping[key])) if kind is int else kind(mapping[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SwarmAgent:
    position: tuple
    mass: float
    relative_mass: float
    objective_value: float


@dataclass(frozen=True, eq=False)
class SwarmState:
    """Positions ``(I, 2)``, masses, relative masses and objective values of a swarm."""

    positions: np.ndarray
    masses: np.ndarray
    relative_masses: np.ndarray
    values: np.ndarray

    @classmethod
    def start(cls, positions, values) -> "SwarmState":
        positions = np.array(positions, dtype=float).reshape(-1, 2)
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n), np.ones(n), np.array(values, dtype=float))

    @property
    def agents(self) -> list:
        return [SwarmAgent(tuple(p), float(g), float(r), float(v))
                for p, g, r, v in zip(self.positions, self.masses, self.relative_masses, self.values)]

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.values))


@dataclass(frozen=True, eq=False)
class MonteCarloSampleSet:
    """Frozen target/source realizations: ``u, v`` are ``(M, K)``, ``sources`` is ``(M, K, T)``."""

    u: np.ndarray
    v: np.ndarray
    sources: np.ndarray
    rs2: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        S = np.ascontiguousarray(self.sources, dtype=np.complex128)
        if u.ndim != 2 or u.shape != v.shape or S.shape[:2] != u.shape or u.shape[0] < 1:
            raise InvalidInputError("sample set needs u, v of shape (M, K) and sources (M, K, T)")
        # ones(2, 2) kron R_S^T with R_S = S S^H, per realization.
        RsT = np.einsum("mkt,mjt->mkj", S.conj(), S)
        rs2 = np.ascontiguousarray(np.tile(RsT, (1, 2, 2)))
        for arr in (u, v, S, rs2):
            arr.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "sources", S)
        object.__setattr__(self, "rs2", rs2)

    def __len__(self):
        return self.u.shape[0]

    @property
    def num_targets(self) -> int:
        return self.u.shape[1]

    def targets(self, m) -> TargetSet:
        return TargetSet(self.u[m], self.v[m])

    def duplicated(self, times=2) -> "MonteCarloSampleSet":
        idx = np.repeat(np.arange(len(self)), times)
        return MonteCarloSampleSet(self.u[idx], self.v[idx], self.sources[idx])

    def subset(self, count) -> "MonteCarloSampleSet":
        return MonteCarloSampleSet(self.u[:count], self.v[:count], self.sources[:count])


def draw_sample_set(scenario: ScenarioConfig, num_samples=DEFAULT_SAMPLES, rng=None, num_targets=None,
                    min_separation=1e-3) -> MonteCarloSampleSet:
    """``M`` i.i.d. (targets, equal-power sources) draws.

    Uses the scenario's target stream when ``rng`` is not given.
    """
    if num_samples < 1:
        raise InvalidInputError("need M >= 1 samples")
    if rng is None:
        rng = stream_rng(scenario.seed, STREAM_TARGETS)
    us, vs, ss = [], [], []
    for _ in range(int(num_samples)):
        targets, S = draw_realization(scenario, rng, min_separation, num_targets)
        us.append(targets.u)
        vs.append(targets.v)
        ss.append(S)
    return MonteCarloSampleSet(np.array(us), np.array(vs), np.array(ss))


def _wavenumber(wavelength):
    return 2.0 * math.pi / wavelength


def _raise_singular(ok, samples):
    m = int(np.flatnonzero(~ok)[0])
    pair = samples.targets(m).closest_pair()[0] if samples.num_targets > 1 else None
    raise SingularFimError(f"Fisher information singular for Monte Carlo sample {m}", pair=pair, sample=m)


def crb_traces(geometry: ArrayGeometry, samples: MonteCarloSampleSet, noise_power, wavelength,
               backend=None) -> np.ndarray:
    """Per-sample ``tr(CRB_m)``; raises :class:`SingularFimError` naming the first bad sample."""
    mod = kernels.get_backend(backend)
    Q = mod.gram_matrices(np.ascontiguousarray(geometry.x), np.ascontiguousarray(geometry.y),
                          samples.u, samples.v, _wavenumber(wavelength))
    tr, ok = mod.traces_from_gram(Q, samples.rs2, float(noise_power), 1e-12)
    if not ok.all():
        _raise_singular(ok, samples)
    return tr


def expected_crb_trace(geometry: ArrayGeometry, samples: MonteCarloSampleSet, noise_power, wavelength,
                       backend=None) -> float:
    """Sample average of ``tr(CRB)`` over the frozen realizations."""
    return float(np.mean(crb_traces(geometry, samples, noise_power, wavelength, backend)))


class AntennaObjective:
    """Expected CRB trace as a function of one antenna's position, the others fixed."""

    def __init__(self, geometry: ArrayGeometry, index, samples: MonteCarloSampleSet, noise_power,
                 wavelength, backend=None):
        self._mod = kernels.get_backend(backend)
        self._samples = samples
        self._noise = float(noise_power)
        self._wn = _wavenumber(wavelength)
        rest = np.delete(geometry.positions, index, axis=0)
        self.others = rest
        self._Q_rest = self._mod.gram_matrices(np.ascontiguousarray(rest[:, 0]), np.ascontiguousarray(rest[:, 1]),
                                               samples.u, samples.v, self._wn)
        self.evaluations = 0

    def __call__(self, position) -> float:
        self.evaluations += 1
        tr, ok = self._mod.candidate_traces(self._Q_rest, float(position[0]), float(position[1]),
                                            self._samples.u, self._samples.v, self._samples.rs2,
                                            self._wn, self._noise, 1e-12)
        if not ok.all():
            _raise_singular(ok, self._samples)
        return float(np.mean(tr))


def project_to_region(position, region_size) -> np.ndarray:
    """Clamp each coordinate to ``[-A/2, A/2]``."""
    h = region_size / 2.0
    return np.clip(np.asarray(position, dtype=float), -h, h)


def numeric_gradient(objective: Callable, position, delta, region_size=math.inf) -> np.ndarray:
    """Central differences with both probes projected into the region.

    Near the boundary the projected probes are closer together and the
    difference is divided by their actual separation, which turns into a
    one-sided difference on the boundary itself.
    """
    p = np.asarray(position, dtype=float)
    grad = np.zeros(2)
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = delta
        hi = project_to_region(p + step, region_size)
        lo = project_to_region(p - step, region_size)
        sep = hi[axis] - lo[axis]
        if sep <= 0:
            continue
        try:
            f_hi = objective(hi)
            f_lo = objective(lo)
        except (SingularFimError, ArithmeticError) as exc:
            raise GradientEvaluationError(f"objective failed at a probe point near {p.tolist()}") from exc
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise GradientEvaluationError(f"non-finite objective at a probe point near {p.tolist()}")
        grad[axis] = (f_hi - f_lo) / sep
    return grad


def update_masses(state: SwarmState, exponent) -> SwarmState:
    """Move mass from worse agents to the current best one.

    ``kappa_i = ((psi_i - psi_min) / (psi_max - psi_min))^p``; agents with a
    non-finite value get ``kappa = 1``. If the finite spread is negligible no
    mass moves.
    """
    vals = np.asarray(state.values, dtype=float)
    g = np.asarray(state.masses, dtype=float)
    finite = np.isfinite(vals)
    i0 = int(np.argmin(np.where(finite, vals, np.inf)))
    kappa = np.ones_like(vals)
    if finite.any():
        lo = vals[finite].min()
        hi = vals[finite].max()
        spread = hi - lo
        if spread < KAPPA_GUARD * max(1.0, abs(lo)):
            kappa[finite] = 0.0
        else:
            kappa[finite] = ((vals[finite] - lo) / spread) ** exponent
    kappa[i0] = 0.0
    loss = kappa * g
    new = g - loss
    new[i0] = g[i0] + (loss.sum() - loss[i0])
    rel = new / new.max()
    return replace(state, masses=new, relative_masses=rel)


class StepOutcome(NamedTuple):
    position: np.ndarray
    value: float
    step: float
    backtracks: int


def backtracking_step(objective: Callable, position, value, gradient, beta, params: SwarmParams,
                      region_size=math.inf, feasible: Callable | None = None) -> StepOutcome:
    """Armijo backtracking from ``tau = max_step`` with shrink ``shrink_factor``.

    A candidate ``B(q - tau * grad)`` is accepted when ``feasible`` holds and
    ``psi(new) <= psi(old) - armijo * beta * tau * ||grad||^2``.  After
    ``max_backtracks`` shrinks the old position is returned with ``step = 0``.
    """
    p = np.asarray(position, dtype=float)
    g = np.asarray(gradient, dtype=float)
    gnorm2 = float(g @ g)
    tau = float(params.max_step)
    for b in range(params.max_backtracks + 1):
        cand = project_to_region(p - tau * g, region_size)
        if feasible is None or feasible(cand):
            if np.array_equal(cand, p):
                f = value
            else:
                try:
                    f = objective(cand)
                except SingularFimError:
                    f = math.inf
            if f <= value - params.armijo * beta * tau * gnorm2:
                return StepOutcome(cand, f, tau, b)
        tau *= params.shrink_factor
    return StepOutcome(p, value, 0.0, params.max_backtracks)


@dataclass
class SwarmOutcome:
    position: np.ndarray
    value: float
    history: list
    stalls: int = 0
    gradient_failures: int = 0


def swarm_descent(objective: Callable, state: SwarmState, params: SwarmParams, region_size=math.inf,
                  feasible: Callable | None = None, on_iteration: Callable | None = None) -> SwarmOutcome:
    """Inner loop for one antenna, starting from an initialized swarm.

    ``params`` must be resolved (explicit ``max_step`` / ``gradient_step``).
    ``on_iteration(inner, best_value)`` is called after each iteration.
    """
    incumbent = float(state.values[0])
    best = float(np.min(state.values))
    prev = incumbent
    history = []
    stalls = grad_fail = 0
    for ell in range(1, params.max_inner + 1):
        state = update_masses(state, params.mass_exponent)
        beta = state.relative_masses ** params.step_exponent
        positions = state.positions.copy()
        values = state.values.copy()
        for i in range(positions.shape[0]):
            if not math.isfinite(values[i]):
                continue
            try:
                grad = numeric_gradient(objective, positions[i], params.gradient_step, region_size)
            except GradientEvaluationError:
                grad_fail += 1
                continue
            out = backtracking_step(objective, positions[i], values[i], grad, beta[i], params,
                                    region_size, feasible)
            if out.step == 0.0 and np.any(grad != 0):
                stalls += 1
            positions[i] = out.position
            values[i] = out.value
        state = replace(state, positions=positions, values=values)
        best = float(np.min(values))
        history.append(best)
        if on_iteration is not None:
            on_iteration(ell, best)
        if (prev - best) <= params.tolerance * abs(prev):
            break
        prev = best
    i0 = state.best_index
    return SwarmOutcome(state.positions[i0].copy(), float(state.values[i0]), history, stalls, grad_fail)


class TraceRow(NamedTuple):
    outer: int
    antenna: int
    inner: int
    best_objective: float


@dataclass(eq=False)
class OptimizationResult:
    geometry: ArrayGeometry
    objective: float
    initial_objective: float
    trace: list
    flags: dict
    evaluations: int = 0
    outer_iterations: int = 0

    @property
    def history(self) -> np.ndarray:
        """Committed objective after every inner iteration (non-increasing)."""
        return np.array([row.best_objective for row in self.trace])


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer", "antenna", "inner", "best_objective"])
        for row in trace:
            w.writerow([row.outer, row.antenna, row.inner, repr(float(row.best_objective))])


def _min_distance(point, others):
    if len(others) == 0:
        return math.inf
    return float(np.min(np.hypot(others[:, 0] - point[0], others[:, 1] - point[1])))


def _spawn_agent(rng, others, region_size, min_spacing, attempts=AGENT_INIT_ATTEMPTS):
    h = region_size / 2.0
    for _ in range(attempts):
        cand = rng.uniform(-h, h, 2)
        if _min_distance(cand, others) >= min_spacing:
            return cand
    return None


def initial_geometry_for(scenario: ScenarioConfig) -> ArrayGeometry:
    """Full-aperture lattice used as the starting layout."""
    return full_aperture_upa(scenario.num_antennas, scenario.region_size, scenario.min_spacing)


def optimize_positions(scenario: ScenarioConfig, params: SwarmParams | None = None,
                       samples: MonteCarloSampleSet | None = None,
                       initial_geometry: ArrayGeometry | None = None, seed=None, backend=None,
                       progress: Callable | None = None) -> OptimizationResult:
    """Alternating per-antenna swarm descent of the expected CRB trace.

    Agent 1 of every swarm is the incumbent position; the others are drawn
    uniformly in the region subject to the spacing constraint against the
    other ``N - 1`` antennas.  The committed objective never increases.
    """
    params = (params or SwarmParams()).resolved(scenario.wavelength)
    seed = scenario.seed if seed is None else seed
    if samples is None:
        samples = draw_sample_set(scenario, DEFAULT_SAMPLES, stream_rng(seed, STREAM_TARGETS))
    if initial_geometry is None:
        initial_geometry = initial_geometry_for(scenario)
    A, dmin = scenario.region_size, scenario.min_spacing
    geometry = ArrayGeometry(initial_geometry.positions, A, dmin)
    bad = validate_geometry(geometry)
    if bad:
        raise InvalidInputError("initial geometry infeasible: " + "; ".join(map(str, bad[:3])))
    if geometry.num_antennas <= samples.num_targets:
        raise InvalidInputError("need more antennas than targets")
    sigma2, lam = scenario.noise_power, scenario.wavelength

    psi = expected_crb_trace(geometry, samples, sigma2, lam, backend)
    initial = psi
    trace = [TraceRow(0, -1, 0, psi)]
    flags = {"agent_init_failures": 0, "gradient_failures": 0, "stalls": 0}
    rng = stream_rng(seed, STREAM_AGENTS)
    evaluations = 1
    outer_done = 0
    positions = geometry.positions.copy()

    for j in range(1, params.max_outer + 1):
        psi_start = psi
        for n in range(positions.shape[0]):
            current = ArrayGeometry(positions, A, dmin)
            obj = AntennaObjective(current, n, samples, sigma2, lam, backend)
            others = obj.others

            def feasible(p, others=others):
                return _min_distance(p, others) >= dmin

            agents = [positions[n].copy()]
            values = [psi]  # same geometry as the incumbent; reuse its value
            for _ in range(params.num_agents - 1):
                cand = _spawn_agent(rng, others, A, dmin)
                if cand is None:
                    flags["agent_init_failures"] += 1
                    agents.append(positions[n].copy())
                    values.append(psi)
                    continue
                try:
                    values.append(obj(cand))
                except SingularFimError:
                    values.append(math.inf)
                agents.append(cand)

            def record(inner, best, j=j, n=n):
                trace.append(TraceRow(j, n, inner, best))
                if progress is not None:
                    progress(j, n, inner, best)

            out = swarm_descent(obj, SwarmState.start(agents, values), params, A, feasible, record)
            flags["stalls"] += out.stalls
            flags["gradient_failures"] += out.gradient_failures
            evaluations += obj.evaluations
            if out.value <= psi:
                positions[n] = out.position
                psi = out.value
        outer_done = j
        if (psi_start - psi) <= params.tolerance * abs(psi_start):
            break

    final = ArrayGeometry(positions, A, dmin)
    return OptimizationResult(final, psi, initial, trace, flags, evaluations, outer_done)


__all__ = [
    "SwarmParams", "SwarmAgent", "SwarmState", "MonteCarloSampleSet", "draw_sample_set",
    "crb_traces", "expected_crb_trace", "AntennaObjective", "project_to_region", "numeric_gradient",
    "update_masses", "backtracking_step", "StepOutcome", "swarm_descent", "SwarmOutcome", "TraceRow",
    "OptimizationResult", "write_trace_csv", "optimize_positions", "initial_geometry_for",
    "DEFAULT_SAMPLES",
]
