"""MUSIC spatial spectrum on a (u, v) grid, peak picking and assignment-aware MSE."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError
from .model import ArrayGeometry, SpatialAngle, TargetSet

DEFAULT_RESOLUTION = 401
DENOM_FLOOR = 1e-300
EXHAUSTIVE_MAX_K = 7


@dataclass(frozen=True, eq=False)
class MusicSpectrum:
    """Pseudo-spectrum ``values[i, j]`` at ``(grid_u[i], grid_v[j])``.

    ``denominators`` holds ``||U_z^H a||^2`` (floored) so peak refinement can
    work on the smooth quantity rather than its reciprocal.
    """

    grid_u: np.ndarray
    grid_v: np.ndarray
    values: np.ndarray
    subspace_dim: int
    denominators: np.ndarray = field(repr=False, default=None)
    eigenvalues: np.ndarray = field(repr=False, default=None)
    tie_warning: bool = False
    noise_basis: np.ndarray = field(repr=False, default=None)
    positions: np.ndarray = field(repr=False, default=None)
    wavenumber: float = 0.0


@dataclass(frozen=True, eq=False)
class EstimationResult:
    estimated_angles: list
    per_target_sq_errors: np.ndarray
    total_mse_contribution: float
    truth: TargetSet | None = None
    assignment: tuple = ()


@dataclass(frozen=True, eq=False)
class PeakPicks:
    angles: list
    values: np.ndarray
    padded: bool = False

    def as_targets(self) -> TargetSet:
        return TargetSet.from_angles((a.u, a.v) for a in self.angles)


def noise_subspace(R, num_targets):
    """Eigenvectors of the N - K smallest eigenvalues of Hermitian ``R``.

    Returns ``(U_z, eigenvalues_descending, tie_flag)``.
    """
    R = np.asarray(R)
    N = R.shape[0]
    if R.ndim != 2 or R.shape[1] != N:
        raise InvalidInputError("covariance must be square")
    if not 0 < num_targets < N:
        raise InvalidInputError(f"need 0 < K < N (K={num_targets}, N={N})")
    w, U = np.linalg.eigh(0.5 * (R + R.conj().T))  # ascending
    m = N - num_targets
    scale = max(abs(w[-1]), np.finfo(float).tiny)
    tie = bool(abs(w[m] - w[m - 1]) <= 1e-12 * scale) and not np.allclose(w, w[0], rtol=0, atol=1e-12 * scale)
    return U[:, :m], w[::-1].copy(), tie


def music_spectrum(R, geometry: ArrayGeometry, num_targets, wavelength, u_max=0.6, v_max=0.6,
                   grid_resolution=DEFAULT_RESOLUTION) -> MusicSpectrum:
    """Evaluate ``1 / (a^H U_z U_z^H a)`` on a uniform grid covering the angle box.

    ``grid_resolution`` is the number of points per axis (an int or a
    ``(n_u, n_v)`` pair).
    """
    if np.isscalar(grid_resolution):
        n_u = n_v = int(grid_resolution)
    else:
        n_u, n_v = (int(g) for g in grid_resolution)
    if n_u < 1 or n_v < 1:
        raise InvalidInputError("grid resolution must be positive")
    Uz, eig, tie = noise_subspace(R, num_targets)
    if tie:
        warnings.warn("eigenvalue tie at the signal/noise boundary; subspace split is ambiguous",
                      RuntimeWarning, stacklevel=2)
    grid_u = np.linspace(-u_max, u_max, n_u)
    grid_v = np.linspace(-v_max, v_max, n_v)
    denom = _noise_projection_power(Uz, geometry, grid_u, grid_v, wavelength)
    denom = np.maximum(denom, DENOM_FLOOR)
    positions = np.column_stack([geometry.x, geometry.y])
    return MusicSpectrum(grid_u, grid_v, 1.0 / denom, int(num_targets), denom, eig, tie,
                         Uz, positions, 2.0 * np.pi / wavelength)


def _noise_projection_power(Uz, geometry, grid_u, grid_v, wavelength, chunk=64):
    # a(u, v) factors as exp(j k x u) * exp(j k y v), so U_z^H a is a product of two
    # small matrices per noise eigenvector.
    k = 2.0 * np.pi / wavelength
    ex = np.exp(1j * k * np.outer(grid_u, geometry.x))  # (U, N)
    ey = np.exp(1j * k * np.outer(geometry.y, grid_v))  # (N, V)
    Uc = Uz.conj().T  # (m, N)
    out = np.empty((grid_u.size, grid_v.size))
    for start in range(0, grid_u.size, chunk):
        blk = ex[start:start + chunk]  # (c, N)
        weighted = (blk[:, None, :] * Uc[None, :, :]).reshape(-1, Uc.shape[1])  # (c*m, N)
        proj = (weighted @ ey).reshape(blk.shape[0], Uc.shape[0], -1)
        out[start:start + chunk] = np.sum(proj.real ** 2 + proj.imag ** 2, axis=1)
    return out


def _local_maxima(values):
    """Boolean mask of strict 8-neighborhood maxima (edges compare against existing neighbors)."""
    padded = np.pad(values, 1, mode="constant", constant_values=-np.inf)
    centre = padded[1:-1, 1:-1]
    mask = np.ones(values.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neigh = padded[1 + di:padded.shape[0] - 1 + di, 1 + dj:padded.shape[1] - 1 + dj]
            mask &= centre > neigh
    return mask


NEWTON_ITERATIONS = 8


def _refine(spec: MusicSpectrum, i, j):
    """Locate the off-grid peak near grid node (i, j).

    A Newton step on the 3x3 stencil of the denominator gives a start point;
    when the noise basis is available, analytic Newton iterations on the
    denominator then remove the remaining grid bias. The result stays within
    one grid cell of the node and inside the grid box. Without the noise basis
    an axis that lacks both neighbors is left unrefined.
    """
    u, v = _stencil_step(spec, i, j)
    if spec.noise_basis is None:
        return u, v
    gu, gv = spec.grid_u, spec.grid_v
    hu = gu[1] - gu[0] if gu.size > 1 else 0.0
    hv = gv[1] - gv[0] if gv.size > 1 else 0.0
    lo = np.array([max(gu[0], gu[i] - hu), max(gv[0], gv[j] - hv)])
    hi = np.array([min(gu[-1], gu[i] + hu), min(gv[-1], gv[j] + hv)])
    x = np.array([u, v])
    f0 = _denominator_derivatives(spec, x)[0]
    for _ in range(NEWTON_ITERATIONS):
        f, g, H = _denominator_derivatives(spec, x)
        if H[0, 0] <= 0 or np.linalg.det(H) <= 0:
            break
        step = np.linalg.solve(H, g)
        x_new = np.clip(x - step, lo, hi)
        if np.max(np.abs(x_new - x)) <= 1e-15 * max(1.0, np.max(np.abs(x))):
            x = x_new
            break
        x = x_new
    if _denominator_derivatives(spec, x)[0] > f0:  # never worse than the stencil estimate
        return u, v
    return float(x[0]), float(x[1])


def _denominator_derivatives(spec: MusicSpectrum, point):
    """Value, gradient and Hessian of ``||U_z^H a(u, v)||^2``."""
    k = spec.wavenumber
    px, py = spec.positions[:, 0], spec.positions[:, 1]
    a = np.exp(1j * k * (px * point[0] + py * point[1]))
    Uc = spec.noise_basis.conj().T
    z = Uc @ a
    zx = Uc @ (1j * k * px * a)
    zy = Uc @ (1j * k * py * a)
    zxx = Uc @ (-(k * px) ** 2 * a)
    zyy = Uc @ (-(k * py) ** 2 * a)
    zxy = Uc @ (-(k * k) * px * py * a)
    re = lambda p, q: float(np.real(np.vdot(p, q)))  # noqa: E731
    f = re(z, z)
    g = np.array([2 * re(z, zx), 2 * re(z, zy)])
    H = np.array([[2 * (re(zx, zx) + re(z, zxx)), 2 * (re(zx, zy) + re(z, zxy))],
                  [2 * (re(zx, zy) + re(z, zxy)), 2 * (re(zy, zy) + re(z, zyy))]])
    return f, g, H


def _stencil_step(spec: MusicSpectrum, i, j):
    """Newton step on the 3x3 stencil of the denominator, clipped to one grid cell."""
    d = spec.denominators if spec.denominators is not None else 1.0 / spec.values
    gu, gv = spec.grid_u, spec.grid_v
    nu, nv = d.shape
    hu = gu[1] - gu[0] if nu > 1 else 0.0
    hv = gv[1] - gv[0] if nv > 1 else 0.0
    u0, v0 = gu[i], gv[j]
    has_u = 0 < i < nu - 1
    has_v = 0 < j < nv - 1
    c = d[i, j]
    if has_u:
        g_u = (d[i + 1, j] - d[i - 1, j]) / 2.0
        h_uu = d[i + 1, j] - 2 * c + d[i - 1, j]
    if has_v:
        g_v = (d[i, j + 1] - d[i, j - 1]) / 2.0
        h_vv = d[i, j + 1] - 2 * c + d[i, j - 1]
    du = dv = 0.0
    if has_u and has_v:
        h_uv = (d[i + 1, j + 1] - d[i + 1, j - 1] - d[i - 1, j + 1] + d[i - 1, j - 1]) / 4.0
        det = h_uu * h_vv - h_uv * h_uv
        if h_uu > 0 and det > 0:
            du = -(h_vv * g_u - h_uv * g_v) / det
            dv = -(h_uu * g_v - h_uv * g_u) / det
        else:
            du = -g_u / h_uu if h_uu > 0 else 0.0
            dv = -g_v / h_vv if h_vv > 0 else 0.0
    elif has_u and h_uu > 0:
        du = -g_u / h_uu
    elif has_v and h_vv > 0:
        dv = -g_v / h_vv
    du = float(np.clip(du, -1.0, 1.0))
    dv = float(np.clip(dv, -1.0, 1.0))
    return u0 + du * hu, v0 + dv * hv


def _safe_angle(u, v):
    r2 = u * u + v * v
    if r2 > 1.0:
        s = 1.0 / math.sqrt(r2)
        u, v = u * s, v * s
    return SpatialAngle(float(u), float(v))


def estimate_aoas(spectrum: MusicSpectrum, num_targets, refine=True) -> PeakPicks:
    """The K largest strict local maxima, ordered by value then (u, v).

    If fewer than K maxima exist the result is padded with the largest
    remaining grid values and ``padded`` is set.
    """
    vals = spectrum.values
    gu, gv = np.meshgrid(spectrum.grid_u, spectrum.grid_v, indexing="ij")
    mask = _local_maxima(vals)
    idx = np.flatnonzero(mask)
    order = np.lexsort((gv.ravel()[idx], gu.ravel()[idx], -vals.ravel()[idx]))
    chosen = list(idx[order[:num_targets]])
    padded = len(chosen) < num_targets
    if padded:
        taken = set(chosen)
        flat = vals.ravel()
        rest = np.lexsort((gv.ravel(), gu.ravel(), -flat))
        for f in rest:
            if len(chosen) >= num_targets:
                break
            if f not in taken:
                chosen.append(f)
                taken.add(f)
    angles = []
    picked = []
    for f in chosen:
        i, j = np.unravel_index(f, vals.shape)
        if refine and mask[i, j]:
            u, v = _refine(spectrum, i, j)
        else:
            u, v = spectrum.grid_u[i], spectrum.grid_v[j]
        angles.append(_safe_angle(u, v))
        picked.append(vals[i, j])
    return PeakPicks(angles, np.array(picked), padded)


def _as_array(angles):
    if isinstance(angles, TargetSet):
        return angles.as_array()
    if isinstance(angles, PeakPicks):
        return angles.as_targets().as_array()
    return np.array([(a.u, a.v) if isinstance(a, SpatialAngle) else tuple(a) for a in angles], dtype=float).reshape(-1, 2)


def match_estimates(truth, estimates) -> EstimationResult:
    """Assign estimates to truths minimizing the total squared (u, v) distance.

    Exhaustive over permutations for K <= 7, Hungarian assignment above.
    """
    t = _as_array(truth)
    e = _as_array(estimates)
    if t.shape != e.shape:
        raise InvalidInputError(f"K mismatch: {len(t)} truths vs {len(e)} estimates")
    K = len(t)
    cost = np.sum((t[:, None, :] - e[None, :, :]) ** 2, axis=2)
    if K <= EXHAUSTIVE_MAX_K:
        best, best_perm = math.inf, tuple(range(K))
        for perm in itertools.permutations(range(K)):
            total = cost[np.arange(K), perm].sum()
            if total < best:
                best, best_perm = total, perm
        perm = np.array(best_perm, dtype=int)
    else:
        _, perm = linear_sum_assignment(cost)
    errs = cost[np.arange(K), perm]
    angles = [SpatialAngle(float(e[p, 0]), float(e[p, 1])) for p in perm]
    truth_set = truth if isinstance(truth, TargetSet) else TargetSet(t[:, 0], t[:, 1])
    return EstimationResult(angles, errs, float(errs.sum()), truth_set, tuple(int(p) for p in perm))


def evaluate_mse(true_targets, estimated) -> float:
    """Average over trials of the assignment-matched total squared error.

    ``true_targets`` is either one TargetSet shared by every trial or a
    list with one truth per trial; ``estimated`` is a list of per-trial
    estimates (angle lists, TargetSets, PeakPicks or EstimationResults).
    """
    trials = list(estimated)
    if not trials:
        raise InvalidInputError("no trials")
    shared = isinstance(true_targets, TargetSet)
    if not shared and len(true_targets) != len(trials):
        raise InvalidInputError("need one truth per trial")
    totals = []
    for n, est in enumerate(trials):
        truth = true_targets if shared else true_targets[n]
        if isinstance(est, EstimationResult):
            est = est.estimated_angles
        totals.append(match_estimates(truth, est).total_mse_contribution)
    return float(np.mean(totals))


def trial_rows(trial_index, result: EstimationResult):
    """CSV rows ``trial,k,true_u,true_v,est_u,est_v,sq_err`` for one matched trial."""
    rows = []
    for k, (tu, tv) in enumerate(result.truth.as_array()):
        est = result.estimated_angles[k]
        rows.append([trial_index, k, repr(float(tu)), repr(float(tv)), repr(est.u), repr(est.v),
                     repr(float(result.per_target_sq_errors[k]))])
    return rows


__all__ = [
    "MusicSpectrum", "EstimationResult", "PeakPicks", "noise_subspace", "music_spectrum",
    "estimate_aoas", "match_estimates", "evaluate_mse", "trial_rows", "DEFAULT_RESOLUTION",
]
