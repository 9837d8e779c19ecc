"""Compare the compiled and numpy CRB-trace kernels.

    python benchmarks/bench_kernels.py [--samples 100] [--targets 5] [--antennas 16] [--repeat 20]

Reports the median wall time of the two hot paths (full-array traces and
single-antenna candidate traces) for each available backend, checks that
the backends agree, and prints the speedup.
"""
import argparse
import statistics
import time

import numpy as np

from masense import kernels
from masense.model import ScenarioConfig, full_aperture_upa, stream_rng
from masense.swarm import draw_sample_set


def _median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--targets", type=int, default=5)
    ap.add_argument("--antennas", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    sc = ScenarioConfig(num_antennas=args.antennas, num_targets=args.targets)
    samples = draw_sample_set(sc, args.samples, stream_rng(0, 99))
    geom = full_aperture_upa(sc.num_antennas, sc.region_size)
    wn = 2 * np.pi / sc.wavelength
    x, y = np.ascontiguousarray(geom.x), np.ascontiguousarray(geom.y)
    rest_x, rest_y = x[1:].copy(), y[1:].copy()
    px, py = 0.01, -0.02

    rows, results = [], {}
    for name, mod in sorted(kernels.available_backends().items()):
        Q_rest = mod.gram_matrices(rest_x, rest_y, samples.u, samples.v, wn)

        def full():
            Q = mod.gram_matrices(x, y, samples.u, samples.v, wn)
            return mod.traces_from_gram(Q, samples.rs2, sc.noise_power, 1e-12)

        def candidate():
            return mod.candidate_traces(Q_rest, px, py, samples.u, samples.v, samples.rs2, wn,
                                        sc.noise_power, 1e-12)

        results[name] = (full()[0], candidate()[0])
        rows.append((name, _median_time(full, args.repeat), _median_time(candidate, args.repeat)))

    print(f"M={args.samples} K={args.targets} N={args.antennas}  (median of {args.repeat})")
    print(f"{'backend':8s} {'full array [ms]':>16s} {'candidate [ms]':>15s}")
    for name, tf, tc in rows:
        print(f"{name:8s} {tf * 1e3:16.3f} {tc * 1e3:15.3f}")
    if "cython" in results:
        ref_full, ref_cand = results["numpy"]
        got_full, got_cand = results["cython"]
        err = max(np.max(np.abs(got_full / ref_full - 1)), np.max(np.abs(got_cand / ref_cand - 1)))
        by_name = {r[0]: r for r in rows}
        print(f"max relative difference between backends: {err:.2e}")
        print(f"speedup (numpy / cython): full {by_name['numpy'][1] / by_name['cython'][1]:.1f}x, "
              f"candidate {by_name['numpy'][2] / by_name['cython'][2]:.1f}x")
    else:
        print("compiled backend not built; only numpy timed")


if __name__ == "__main__":
    main()
