"""Command-line front end: ``masense <command> [options]``.

Settings are layered: preset, then ``--config`` file, then explicit flags.
Exit status is 0 on success, 2 when a run finished but was flagged as
degraded, 1 on error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .crb import check_bound_conditions, crb_matrix, lower_bound
from .errors import MasenseError
from .harness import (
    PRESETS, SCHEMES, SWEEP_PARAMETERS, SweepSpec, diagnostics_report, music_trial_error, proposed_geometry,
    run_sweep, scheme_geometry, single_target_ma_baseline, sweep_degraded, write_manifest,
)
from .kernels import BACKEND
from .model import (
    STREAM_NOISE, STREAM_SIGNALS, ArrayGeometry, ScenarioConfig, TargetSet, draw_realization,
    equal_power_sources, read_kv_file, stream_rng,
)
from .music import estimate_aoas, match_estimates
from .swarm import SwarmParams, write_trace_csv

log = logging.getLogger("masense")

EXIT_OK, EXIT_ERROR, EXIT_DEGRADED = 0, 1, 2

class Settings:
    """Resolved scenario, swarm parameters and run options."""

    def __init__(self, args):
        preset = PRESETS[args.preset]
        raw = read_kv_file(args.config) if args.config else {}
        base = preset.scenario.as_dict()
        base.update({k: v for k, v in raw.items() if "." not in k})
        if args.seed is not None:
            base["seed"] = args.seed
        self.scenario = ScenarioConfig.from_mapping(base)
        swarm = preset.swarm.as_dict()
        swarm.update({k.split(".", 1)[1]: v for k, v in raw.items() if k.startswith("swarm.")})
        self.swarm = SwarmParams.from_mapping(swarm)
        self.raw = raw
        self.num_samples = int(float(raw.get("run.num_samples", raw.get("sweep.num_samples", preset.num_samples))))
        self.trials = int(float(raw.get("sweep.trials", preset.trials)))
        self.music_resolution = int(float(raw.get("sweep.music_resolution", preset.music_resolution)))
        if getattr(args, "samples", None) is not None:
            self.num_samples = args.samples
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.preset = args.preset

    def manifest(self, command, extra=None):
        info = {"run.command": command, "run.preset": self.preset, "run.num_samples": self.num_samples,
                "run.kernel_backend": BACKEND}
        info.update(extra or {})
        write_manifest(self.out / "manifest.txt", self.scenario, self.swarm, info)

def _parse_targets(text):
    pairs = [p for p in text.replace(" ", "").split(";") if p]
    return TargetSet.from_angles(tuple(float(c) for c in p.split(",")) for p in pairs)

def _geometry(args, st: Settings) -> ArrayGeometry:
    if getattr(args, "geometry", None):
        return ArrayGeometry.from_csv(args.geometry, st.scenario.region_size, st.scenario.min_spacing)
    return scheme_geometry(args.scheme, st.scenario, st.swarm, st.num_samples)

def _realization(args, st: Settings):
    sc = st.scenario
    rng = stream_rng(sc.seed, STREAM_SIGNALS, 0, 0)
    if getattr(args, "targets", None):
        targets = _parse_targets(args.targets)
        S = equal_power_sources(len(targets), sc.num_snapshots, sc.signal_power, rng)
        return targets, S
    return draw_realization(sc, rng)

# ---------------------------------------------------------------- commands

def cmd_optimize(args, st: Settings) -> int:
    builder = single_target_ma_baseline if args.scheme == "single_target_ma" else proposed_geometry
    result = builder(st.scenario, st.swarm, st.num_samples, return_result=True)
    result.geometry.to_csv(st.out / f"geometry_{args.scheme}.csv")
    write_trace_csv(st.out / "trace.csv", result.trace)
    st.manifest("optimize", {"run.scheme": args.scheme})
    print(f"initial objective {result.initial_objective:.6e}")
    print(f"final objective   {result.objective:.6e}  ({result.outer_iterations} outer passes, "
          f"{result.evaluations} evaluations)")
    if result.flags["agent_init_failures"]:
        log.warning("agent initialization failed %d times", result.flags["agent_init_failures"])
        return EXIT_DEGRADED
    return EXIT_OK

def cmd_crb(args, st: Settings) -> int:
    geometry = _geometry(args, st)
    targets, S = _realization(args, st)
    res = crb_matrix(geometry, targets, S, st.scenario.noise_power, st.scenario.wavelength)
    with open(st.out / "crb.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "u", "v", "crb_u", "crb_v"])
        for k, (u, v) in enumerate(targets.as_array()):
            w.writerow([k, repr(float(u)), repr(float(v)), repr(float(res.per_target_crbs[k, 0])),
                        repr(float(res.per_target_crbs[k, 1]))])
    st.manifest("crb")
    print(f"tr(CRB) = {res.trace:.6e}")
    return EXIT_OK

def cmd_bound(args, st: Settings) -> int:
    geometry = _geometry(args, st)
    rep = lower_bound(geometry, st.scenario)
    print(f"bound_a = {rep.bound_a:.6e}")
    print(f"bound_b = {rep.bound_b:.6e}")
    if args.check:
        targets, S = _realization(args, st)
        chk = check_bound_conditions(geometry, targets, S, st.scenario.wavelength, st.scenario.noise_power,
                                     st.scenario.region_size)
        tr = crb_matrix(geometry, targets, S, st.scenario.noise_power, st.scenario.wavelength).trace
        print(f"tr(CRB) = {tr:.6e}")
        print("condition (a) residuals: " + ", ".join(f"{r:.3e}" for r in chk.condition_a_residuals))
        print("condition (b) residuals: " + ", ".join(f"{r:.3e}" for r in chk.condition_b_residuals))
    st.manifest("bound")
    return EXIT_OK

def cmd_music(args, st: Settings) -> int:
    geometry = _geometry(args, st)
    targets, S = _realization(args, st)
    sc = st.scenario
    err, spec = music_trial_error(geometry, targets, S, sc, stream_rng(sc.seed, STREAM_NOISE, 0, 0),
                                  st.music_resolution, return_spectrum=True)
    picks = estimate_aoas(spec, len(targets))
    matched = match_estimates(targets, picks.angles)
    with open(st.out / "spectrum_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "value"])
        for i, u in enumerate(spec.grid_u):
            for j, v in enumerate(spec.grid_v):
                w.writerow([repr(float(u)), repr(float(v)), repr(float(spec.values[i, j]))])
    st.manifest("music", {"sweep.music_resolution": st.music_resolution})
    for k, (t, e) in enumerate(zip(targets, matched.estimated_angles)):
        print(f"target {k}: true ({t.u:+.5f}, {t.v:+.5f})  est ({e.u:+.5f}, {e.v:+.5f})")
    print(f"squared error = {err:.6e}")
    if picks.padded:
        log.warning("fewer spectral peaks than targets; estimates padded")
        return EXIT_DEGRADED
    return EXIT_OK

def cmd_sweep(args, st: Settings) -> int:
    raw = st.raw
    parameter = args.parameter or raw.get("sweep.parameter")
    if parameter is None:
        raise MasenseError("sweep needs --parameter (or sweep.parameter in the config)")
    values = args.values or raw.get("sweep.values")
    if values is None:
        raise MasenseError("sweep needs --values (or sweep.values in the config)")
    schemes = args.schemes or raw.get("sweep.schemes") or ",".join(SCHEMES)
    trials = args.trials if args.trials is not None else st.trials
    compute_mse = not args.no_mse and bool(int(float(raw.get("sweep.compute_mse", 1))))
    spec = SweepSpec(parameter, tuple(float(v) for v in str(values).split(",")), trials,
                     tuple(s for s in schemes.split(",") if s), st.num_samples, st.music_resolution, compute_mse)
    extra = spec.as_dict()
    extra["run.num_samples"] = st.num_samples
    st.manifest("sweep", extra)
    points = run_sweep(spec, st.scenario, st.swarm, out_dir=st.out, workers=args.workers)
    for p in points:
        print(f"{p.scheme:18s} x={p.x_value:<10g} crb={p.crb_trace_mean:.4e} mse={p.mse_mean:.4e}"
              + ("  FLAGGED" if p.flagged else ""))
    return EXIT_DEGRADED if sweep_degraded(points) else EXIT_OK

def cmd_diagnose(args, st: Settings) -> int:
    schemes = args.schemes.split(",") if args.schemes else ["proposed_ma", "dense_upa", "sparse_upa"]
    geometries = {}
    for s in schemes:
        path = st.out / f"geometry_{s}.csv"
        if s in ("proposed_ma", "single_target_ma") and path.exists():
            geometries[s] = ArrayGeometry.from_csv(path, st.scenario.region_size, st.scenario.min_spacing)
        else:
            geometries[s] = scheme_geometry(s, st.scenario, st.swarm, st.num_samples)
            geometries[s].to_csv(path)
    ref = tuple(float(c) for c in args.reference.split(","))
    rep = diagnostics_report(geometries, st.scenario, ref, st.out, grid_resolution=args.grid,
                             music_resolution=st.music_resolution)
    st.manifest("diagnose", {"run.reference": args.reference, "run.grid": args.grid})
    for s in schemes:
        r = rep[s]
        print(f"{s:18s} rho_mean={r['rho_mean']:.4f} omega_mean={r['omega_mean']:.4e} "
              f"mse={r['realization_mse']:.3e} mean_radius={r['mean_radius']:.4f}")
    return EXIT_OK

# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser copy from overwriting a value given before it.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value settings file (a manifest.txt replays a run)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="parameter preset (default: full)")
    common.add_argument("--samples", type=int, help="Monte Carlo realizations for optimization")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="masense", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def geometry_opts(sp):
        sp.add_argument("--geometry", help="geometry CSV (n,x,y); overrides --scheme")
        sp.add_argument("--scheme", choices=[s for s in SCHEMES if s != "lower_bound"], default="dense_upa")
        sp.add_argument("--targets", help="explicit targets 'u,v;u,v;...' (default: seeded draw)")

    sp = sub.add_parser("optimize", parents=[common], help="optimize antenna positions")
    sp.add_argument("--scheme", choices=["proposed_ma", "single_target_ma"], default="proposed_ma")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("crb", parents=[common], help="CRB of one realization")
    geometry_opts(sp)
    sp.set_defaults(func=cmd_crb)

    sp = sub.add_parser("bound", parents=[common], help="lower bounds and equality-condition residuals")
    geometry_opts(sp)
    sp.add_argument("--check", action="store_true", help="also report condition residuals for one realization")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("music", parents=[common], help="MUSIC estimate for one seeded realization")
    geometry_opts(sp)
    sp.set_defaults(func=cmd_music)

    sp = sub.add_parser("sweep", parents=[common], help="parameter sweep, writes curves.csv")
    sp.add_argument("--parameter", choices=SWEEP_PARAMETERS)
    sp.add_argument("--values", help="comma-separated, increasing")
    sp.add_argument("--schemes", help="comma-separated subset of " + ",".join(SCHEMES))
    sp.add_argument("--trials", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--no-mse", action="store_true", help="skip MUSIC (CRB curves only)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("diagnose", parents=[common], help="sensitivity aggregates and grids")
    sp.add_argument("--schemes", help="comma-separated schemes (default proposed_ma,dense_upa,sparse_upa)")
    sp.add_argument("--reference", default="0,0", help="reference target 'u,v' for the correlation grid")
    sp.add_argument("--grid", type=int, default=241, help="correlation grid points per axis")
    sp.set_defaults(func=cmd_diagnose)
    return p

GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": ".", "preset": "full", "samples": None,
                   "verbose": False}

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        st = Settings(args)
        return args.func(args, st)
    except (MasenseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
