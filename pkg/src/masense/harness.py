"""Baseline geometries, parameter sweeps, diagnostics grids and run manifests."""
from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .crb import bound_b_value, crb_matrix, sensitivity_diagnostics, steering_correlation_map
from .errors import DegenerateGeometryError, InvalidInputError, SingularFimError
from .model import (
    STREAM_NOISE, STREAM_SIGNALS, STREAM_SINGLE_TARGET, STREAM_TARGETS, ArrayGeometry, ScenarioConfig,
    SnapshotBundle, TargetSet, draw_realization, full_aperture_upa, sample_covariance, stream_rng,
    synthesize_snapshots, upa_lattice, write_kv_file,
)
from .music import estimate_aoas, match_estimates, music_spectrum
from .swarm import SwarmParams, draw_sample_set, optimize_positions

SCHEMES = ("proposed_ma", "single_target_ma", "dense_upa", "sparse_upa", "lower_bound")
SWEEP_PARAMETERS = ("snr_db", "num_snapshots", "num_targets", "region_size_over_lambda", "angle_range",
                    "num_antennas")
FAILURE_FLAG_FRACTION = 0.01
CURVE_HEADER = ["scheme", "x", "crb", "mse", "trials", "failures", "flagged"]


# ---------------------------------------------------------------- geometries

def dense_upa(num_antennas, wavelength, region_size=math.inf, min_spacing=0.0) -> ArrayGeometry:
    """Half-wavelength lattice centered at the origin."""
    return upa_lattice(num_antennas, wavelength / 2.0, region_size, min_spacing)


def sparse_upa(num_antennas, region_size, min_spacing=0.0) -> ArrayGeometry:
    """Lattice spanning the region, spacing ``A / (ceil(sqrt(N)) - 1)``."""
    return full_aperture_upa(num_antennas, region_size, min_spacing)


def single_target_ma_baseline(scenario: ScenarioConfig, params: SwarmParams | None = None, num_samples=100,
                              seed=None, point_index=0, return_result=False):
    """Optimize against a single-target distribution over the same angle box.

    Stands in for a single-target movable-antenna design; the returned
    geometry is then evaluated on multi-target draws.
    """
    seed = scenario.seed if seed is None else seed
    single = scenario.with_(num_targets=1)
    samples = draw_sample_set(single, num_samples, stream_rng(seed, STREAM_SINGLE_TARGET, point_index))
    result = optimize_positions(single, params, samples, seed=seed)
    return result if return_result else result.geometry


def proposed_geometry(scenario: ScenarioConfig, params: SwarmParams | None = None, num_samples=100, seed=None,
                      point_index=0, return_result=False):
    seed = scenario.seed if seed is None else seed
    samples = draw_sample_set(scenario, num_samples, stream_rng(seed, STREAM_TARGETS, point_index))
    result = optimize_positions(scenario, params, samples, seed=seed)
    return result if return_result else result.geometry


def scheme_geometry(scheme, scenario: ScenarioConfig, params=None, num_samples=100, seed=None, point_index=0):
    """Geometry for a named scheme (``None`` for ``lower_bound``)."""
    A, d = scenario.region_size, scenario.min_spacing
    if scheme == "dense_upa":
        return dense_upa(scenario.num_antennas, scenario.wavelength, A, d)
    if scheme == "sparse_upa":
        return sparse_upa(scenario.num_antennas, A, d)
    if scheme == "proposed_ma":
        return proposed_geometry(scenario, params, num_samples, seed, point_index)
    if scheme == "single_target_ma":
        return single_target_ma_baseline(scenario, params, num_samples, seed, point_index)
    if scheme == "lower_bound":
        return None
    raise InvalidInputError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepSpec:
    swept_parameter: str
    values: tuple
    trials_per_point: int = 200
    schemes: tuple = SCHEMES
    num_samples: int = 100
    music_resolution: int = 401
    compute_mse: bool = True

    def __post_init__(self):
        if self.swept_parameter not in SWEEP_PARAMETERS:
            raise InvalidInputError(f"cannot sweep {self.swept_parameter!r}; choose from {SWEEP_PARAMETERS}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InvalidInputError("sweep needs at least one value")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise InvalidInputError("sweep values must be strictly increasing")
        object.__setattr__(self, "values", vals)
        schemes = tuple(self.schemes)
        for s in schemes:
            if s not in SCHEMES:
                raise InvalidInputError(f"unknown scheme {s!r}")
        object.__setattr__(self, "schemes", schemes)
        if self.trials_per_point < 1:
            raise InvalidInputError("need at least one trial per point")

    def as_dict(self) -> dict:
        return {
            "sweep.parameter": self.swept_parameter,
            "sweep.values": ",".join(repr(v) for v in self.values),
            "sweep.trials": self.trials_per_point,
            "sweep.schemes": ",".join(self.schemes),
            "sweep.num_samples": self.num_samples,
            "sweep.music_resolution": self.music_resolution,
            "sweep.compute_mse": int(self.compute_mse),
        }


@dataclass(frozen=True)
class CurvePoint:
    scheme: str
    x_value: float
    crb_trace_mean: float
    mse_mean: float
    trials: int
    seed_base: int
    failures: int = 0
    flagged: bool = False

    def row(self) -> list:
        return [self.scheme, repr(float(self.x_value)), repr(float(self.crb_trace_mean)),
                repr(float(self.mse_mean)), self.trials, self.failures, int(self.flagged)]


def apply_sweep_value(scenario: ScenarioConfig, parameter, value) -> ScenarioConfig:
    if parameter == "snr_db":
        return scenario.with_(snr_db=float(value))
    if parameter == "num_snapshots":
        return scenario.with_(num_snapshots=int(round(value)))
    if parameter == "num_targets":
        return scenario.with_(num_targets=int(round(value)))
    if parameter == "num_antennas":
        return scenario.with_(num_antennas=int(round(value)))
    if parameter == "region_size_over_lambda":
        return scenario.with_(region_size=float(value) * scenario.wavelength)
    if parameter == "angle_range":
        return scenario.with_(u_max=float(value), v_max=float(value))
    raise InvalidInputError(f"unknown sweep parameter {parameter!r}")


def evaluate_trial(geometry: ArrayGeometry, scenario: ScenarioConfig, seed, point_index, trial,
                   compute_mse=True, music_resolution=401):
    """CRB trace and MUSIC squared error for one seeded realization.

    Every scheme sees the same targets, sources and noise for a given
    ``(seed, point_index, trial)``.
    """
    targets, S = draw_realization(scenario, stream_rng(seed, STREAM_SIGNALS, point_index, trial))
    crb = crb_matrix(geometry, targets, S, scenario.noise_power, scenario.wavelength).trace
    if not compute_mse:
        return crb, math.nan
    mse = music_trial_error(geometry, targets, S, scenario, stream_rng(seed, STREAM_NOISE, point_index, trial),
                            music_resolution)
    return crb, mse


def music_trial_error(geometry, targets, S, scenario, rng, music_resolution=401, return_spectrum=False):
    bundle = synthesize_snapshots(geometry, targets, SnapshotBundle(S, scenario.noise_power),
                                  scenario.wavelength, rng)
    R = sample_covariance(bundle.received)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        spec = music_spectrum(R, geometry, len(targets), scenario.wavelength, scenario.u_max, scenario.v_max,
                              music_resolution)
    picks = estimate_aoas(spec, len(targets))
    err = match_estimates(targets, picks.angles).total_mse_contribution
    return (err, spec) if return_spectrum else err


def _run_point(job):
    scheme, xi, x, scenario, params, spec, seed = job
    sc = apply_sweep_value(scenario, spec.swept_parameter, x)
    if scheme == "lower_bound":
        return CurvePoint(scheme, x, bound_b_value(sc), math.nan, 1, seed), None
    geometry = scheme_geometry(scheme, sc, params, spec.num_samples, seed, xi)
    crbs, errs, failures = [], [], 0
    for t in range(spec.trials_per_point):
        try:
            c, e = evaluate_trial(geometry, sc, seed, xi, t, spec.compute_mse, spec.music_resolution)
        except (SingularFimError, DegenerateGeometryError, InvalidInputError, np.linalg.LinAlgError):
            failures += 1
            continue
        crbs.append(c)
        errs.append(e)
    ok = len(crbs)
    crb_mean = float(np.mean(crbs)) if ok else math.nan
    mse_mean = float(np.mean(errs)) if ok and spec.compute_mse else math.nan
    flagged = failures > FAILURE_FLAG_FRACTION * spec.trials_per_point
    return CurvePoint(scheme, x, crb_mean, mse_mean, ok, seed, failures, flagged), geometry


def _read_done(path):
    done = {}
    if not path.exists():
        return done
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_HEADER:
            raise InvalidInputError(f"{path} exists with an unexpected header; refusing to resume")
        for row in reader:
            if len(row) != len(CURVE_HEADER):
                break  # torn final line from an interrupted run
            done[(row[0], row[1])] = CurvePoint(row[0], float(row[1]), float(row[2]), float(row[3]),
                                                int(row[4]), -1, int(row[5]), bool(int(row[6])))
    return done


def run_sweep(spec: SweepSpec, scenario: ScenarioConfig, params: SwarmParams | None = None, seed=None,
              out_dir=None, workers=1) -> list:
    """Average CRB trace and MUSIC error per (scheme, x).

    With ``out_dir`` set, rows are appended to ``curves.csv`` in a fixed
    order as they complete and finished points are skipped on a re-run.
    Results do not depend on ``workers``.
    """
    seed = scenario.seed if seed is None else int(seed)
    params = params or SwarmParams()
    jobs = [(s, xi, x, scenario, params, spec, seed)
            for xi, x in enumerate(spec.values) for s in spec.schemes]
    out = Path(out_dir) if out_dir is not None else None
    done = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curves = out / "curves.csv"
        done = _read_done(curves)
        if not done:
            with open(curves, "w", newline="") as fh:
                csv.writer(fh).writerow(CURVE_HEADER)
        else:
            _truncate_torn_tail(curves)
    todo = [j for j in jobs if (j[0], repr(float(j[2]))) not in done]

    results = {}

    def emit(job, point, geometry):
        results[(job[0], job[1])] = point
        if out is None:
            return
        if geometry is not None:
            geometry.to_csv(out / f"geometry_{job[0]}_x{job[1]}.csv")

    pending = list(todo)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_point, j) for j in todo]
            for j, fut in zip(todo, futures):
                point, geometry = fut.result()
                emit(j, point, geometry)
                _flush_prefix(out, pending, results)
    else:
        for j in todo:
            point, geometry = _run_point(j)
            emit(j, point, geometry)
            _flush_prefix(out, pending, results)

    points = []
    for s, xi, x, *_ in jobs:
        key = (s, repr(float(x)))
        if key in done:
            p = done[key]
            points.append(CurvePoint(p.scheme, p.x_value, p.crb_trace_mean, p.mse_mean, p.trials, seed,
                                     p.failures, p.flagged))
        else:
            points.append(results[(s, xi)])
    return points


def _flush_prefix(out, pending, results):
    """Append finished rows in job order so the file never depends on completion order."""
    while pending and (pending[0][0], pending[0][1]) in results:
        job = pending.pop(0)
        if out is not None:
            with open(out / "curves.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(results[(job[0], job[1])].row())


def _truncate_torn_tail(path):
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        Path(path).write_text(text[: text.rfind("\n") + 1])


def sweep_degraded(points) -> bool:
    return any(p.flagged for p in points)


# ---------------------------------------------------------------- diagnostics

def _box_grid(scenario, resolution):
    return (np.linspace(-scenario.u_max, scenario.u_max, resolution),
            np.linspace(-scenario.v_max, scenario.v_max, resolution))


def _write_grid(writer, scheme, gu, gv, values):
    for i, u in enumerate(gu):
        for j, v in enumerate(gv):
            writer.writerow([scheme, repr(float(u)), repr(float(v)), repr(float(values[i, j]))])


def diagnostics_report(geometries: dict, scenario: ScenarioConfig, reference_target=(0.0, 0.0), out_dir=None,
                       seed=None, grid_resolution=241, num_draws=20, music_resolution=401) -> dict:
    """Sensitivity aggregates, correlation grids and one MUSIC realization per scheme.

    Writes ``diagnostics.csv``, ``correlation_grid.csv`` and
    ``spectrum_grid.csv`` when ``out_dir`` is given.  Returns a mapping
    ``scheme -> {"rho_mean", "omega_mean", "realization_mse", "mean_radius",
    "correlation", "spectrum"}`` plus the grids under ``"grid"``.
    """
    seed = scenario.seed if seed is None else int(seed)
    gu, gv = _box_grid(scenario, grid_resolution)
    draws = [draw_realization(scenario, stream_rng(seed, STREAM_SIGNALS, 10_000, d)) for d in range(num_draws)]
    realization = draws[0]
    report = {"grid": (gu, gv)}
    for scheme, geometry in geometries.items():
        rhos, omegas = [], []
        for targets, _ in draws:
            diag = sensitivity_diagnostics(geometry, targets, scenario.wavelength)
            rhos.append(diag.rho_mean)
            omegas.append(diag.omega_mean)
        corr = steering_correlation_map(geometry, reference_target, gu, gv, scenario.wavelength)
        targets, S = realization
        err, spec = music_trial_error(geometry, targets, S, scenario, stream_rng(seed, STREAM_NOISE, 10_000, 0),
                                      music_resolution, return_spectrum=True)
        report[scheme] = {
            "rho_mean": float(np.mean(rhos)), "omega_mean": float(np.mean(omegas)),
            "realization_mse": float(err), "mean_radius": geometry.mean_radius(),
            "correlation": corr, "spectrum": spec,
        }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        schemes = [k for k in report if k != "grid"]
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "rho_mean", "omega_mean", "realization_mse", "mean_radius"])
            for s in schemes:
                r = report[s]
                w.writerow([s, repr(r["rho_mean"]), repr(r["omega_mean"]), repr(r["realization_mse"]),
                            repr(r["mean_radius"])])
        with open(out / "correlation_grid.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "u", "v", "value"])
            for s in schemes:
                _write_grid(w, s, gu, gv, report[s]["correlation"])
        with open(out / "spectrum_grid.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "u", "v", "value"])
            for s in schemes:
                spec = report[s]["spectrum"]
                _write_grid(w, s, spec.grid_u, spec.grid_v, spec.values)
    return report


# ---------------------------------------------------------------- presets / manifest

@dataclass(frozen=True)
class Preset:
    scenario: ScenarioConfig
    swarm: SwarmParams
    num_samples: int
    trials: int
    music_resolution: int


PRESETS = {
    "full": Preset(ScenarioConfig(), SwarmParams(), 100, 200, 401),
    "desk": Preset(ScenarioConfig(num_antennas=8, num_targets=3, region_size=0.3, num_snapshots=16),
                   SwarmParams(num_agents=8, max_outer=10, max_inner=10), 20, 20, 201),
}


def manifest_mapping(scenario: ScenarioConfig, params: SwarmParams | None = None, extra: dict | None = None) -> dict:
    out = {"artifact_version": __version__}
    out.update(scenario.as_dict())
    if params is not None:
        out.update({f"swarm.{k}": v for k, v in params.as_dict().items()})
    out.update(extra or {})
    out["derived.noise_power"] = scenario.noise_power
    return out


def write_manifest(path, scenario: ScenarioConfig, params: SwarmParams | None = None, extra: dict | None = None):
    """Flat ``key = value`` record of every parameter; readable back via ``--config``."""
    write_kv_file(path, manifest_mapping(scenario, params, extra))


__all__ = [
    "SCHEMES", "SWEEP_PARAMETERS", "dense_upa", "sparse_upa", "single_target_ma_baseline", "proposed_geometry",
    "scheme_geometry", "SweepSpec", "CurvePoint", "apply_sweep_value", "evaluate_trial", "run_sweep",
    "sweep_degraded", "diagnostics_report", "PRESETS", "Preset", "write_manifest", "manifest_mapping",
]
