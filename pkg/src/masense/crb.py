"""Cramér–Rao bound for joint 2-D AoA estimation of K far-field targets.

Parameter ordering in every 2K x 2K matrix is ``(u_1..u_K, v_1..v_K)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError, SingularFimError
from .model import ArrayGeometry, ScenarioConfig, TargetSet, geometry_stats, steering_derivatives, steering_vector

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class FimBlocks:
    """Unscaled blocks of the Fisher information; the full FIM is ``2/sigma^2 [[F11, F12], [F21, F22]]``.

    ``d_omega`` and ``d_zeta`` are the mean Jacobians built by explicit
    Kronecker products, kept for cross-checking the closed forms.
    """

    F11: np.ndarray
    F12: np.ndarray
    F21: np.ndarray
    F22: np.ndarray
    d_omega: np.ndarray
    d_zeta: np.ndarray
    dA_u: np.ndarray
    dA_v: np.ndarray
    projector: np.ndarray
    source_cov: np.ndarray
    steering: np.ndarray

    def full(self, noise_power):
        return (2.0 / noise_power) * np.block([[self.F11, self.F12], [self.F21, self.F22]])

    def closed_form_f11(self):
        """``Re{[R_S^T ⊙ Ȧ_i^H Ȧ_j]}`` assembled block-wise."""
        rt = self.source_cov.T
        blocks = [[rt * (a.conj().T @ b) for b in (self.dA_u, self.dA_v)] for a in (self.dA_u, self.dA_v)]
        return np.real(np.block(blocks))

    def closed_form_schur_term(self):
        """``F12 F22^-1 F21`` in its Hadamard form with the column-space projector of A."""
        A = self.steering
        proj = A @ np.linalg.solve(A.conj().T @ A, A.conj().T)
        rt = self.source_cov.T
        blocks = [[rt * (a.conj().T @ proj @ b) for b in (self.dA_u, self.dA_v)] for a in (self.dA_u, self.dA_v)]
        return np.real(np.block(blocks))


@dataclass(frozen=True, eq=False)
class CrbResult:
    crb_matrix: np.ndarray
    trace: float
    per_target_crbs: np.ndarray  # (K, 2): CRB of u_k and v_k
    info_matrix: np.ndarray = field(repr=False, default=None)


@dataclass(eq=False)
class BoundReport:
    bound_a: float
    bound_b: float
    condition_a_residuals: list = field(default_factory=list)
    condition_b_residuals: list = field(default_factory=list)
    rho_matrix: np.ndarray | None = None
    omega_values: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class SensitivityDiagnostics:
    """Normalized sensitivity-vector correlations and effective powers.

    ``rho[k, k', i, i']`` with ``i, i'`` in ``(u, v)``; entries with
    ``k == k'`` are NaN. ``omega[i, k]`` with row 0 for u, row 1 for v.
    """

    rho: np.ndarray
    omega: np.ndarray
    rho_mean: float
    omega_mean: float


def _as_targets(targets) -> TargetSet:
    if isinstance(targets, TargetSet):
        return targets
    return TargetSet.from_angles(targets)


def _check_instance(geometry, targets, S=None):
    N, K = geometry.num_antennas, len(targets)
    if K < 1:
        raise InvalidInputError("need at least one target")
    if N <= K:
        raise InvalidInputError(f"need more antennas than targets (N={N}, K={K})")
    if S is not None:
        S = np.asarray(S)
        if S.ndim != 2 or S.shape[0] != K:
            raise InvalidInputError(f"source matrix must be K x T with K={K}, got {S.shape}")
        return S
    return None


def _singular(targets, what):
    pair, dist = targets.closest_pair()
    msg = f"{what} is singular"
    if pair is not None:
        msg += f"; closest targets {pair} at (u, v) distance {dist:.3g}"
    return SingularFimError(msg, pair=pair)


def _projected(geometry, targets, wavelength):
    """Steering matrix, derivative matrices and the orthogonal-complement projector of A."""
    A = steering_vector(geometry, targets, wavelength)
    dAu, dAv = steering_derivatives(geometry, targets, wavelength)
    gram = A.conj().T @ A
    if np.linalg.cond(gram) > COND_LIMIT:
        raise _singular(targets, "steering Gram matrix")
    P = np.eye(A.shape[0]) - A @ np.linalg.solve(gram, A.conj().T)
    P = 0.5 * (P + P.conj().T)
    return A, dAu, dAv, P


def _invert_guarded(H, targets, what="projected Fisher information"):
    if not np.all(np.isfinite(H)) or np.linalg.cond(H) > COND_LIMIT:
        raise _singular(targets, what)
    inv = np.linalg.solve(H, np.eye(H.shape[0]))
    return 0.5 * (inv + inv.T)


def crb_matrix(geometry: ArrayGeometry, targets, S, noise_power, wavelength) -> CrbResult:
    """CRB of ``(u_1..u_K, v_1..v_K)`` for the deterministic-signal model.

    Computes ``sigma^2/2 (Re{(1_2 ⊗ R_S^T) ⊙ Ȧ^H Π⊥ Ȧ})^-1`` with
    ``R_S = S S^H`` and ``Ȧ = [Ȧ_u, Ȧ_v]``.

    Raises:
        SingularFimError: the information matrix has condition number above
            ``COND_LIMIT`` (nearly coincident targets, or no spread along
            an axis).
    """
    targets = _as_targets(targets)
    S = _check_instance(geometry, targets, S)
    A, dAu, dAv, P = _projected(geometry, targets, wavelength)
    dA = np.hstack([dAu, dAv])
    RS = S @ S.conj().T
    info = np.real(np.tile(RS.T, (2, 2)) * (dA.conj().T @ P @ dA))
    info = 0.5 * (info + info.T)
    inv = _invert_guarded(info, targets)
    crb = 0.5 * noise_power * inv
    K = len(targets)
    diag = np.diag(crb)
    return CrbResult(crb, float(np.trace(crb)), np.column_stack([diag[:K], diag[K:]]), info)


def fim_blocks(geometry: ArrayGeometry, targets, S, noise_power, wavelength) -> FimBlocks:
    """FIM blocks built from explicit mean Jacobians.

    ``vec(Y)`` has mean ``(S^T ⊗ I_N) vec(A)``; the Jacobians with respect to
    the angles and to the real/imaginary source samples are formed with
    Kronecker products, then ``F_ij = Re{D_i^H D_j}``. This path costs
    ``O((KT)^3)`` downstream and exists as an independent reference.
    """
    targets = _as_targets(targets)
    S = _check_instance(geometry, targets, S)
    N, K, T = geometry.num_antennas, len(targets), S.shape[1]
    A = steering_vector(geometry, targets, wavelength)
    dAu, dAv = steering_derivatives(geometry, targets, wavelength)
    I_N = np.eye(N)
    I_T = np.eye(T)
    cols = []
    for dA in (dAu, dAv):
        for k in range(K):
            e_k = np.zeros((K, 1))
            e_k[k] = 1.0
            cols.append(np.kron(S.T @ e_k, I_N) @ dA[:, k])
    d_omega = np.column_stack(cols)
    blocks = [np.kron(I_T, A[:, [k]]) for k in range(K)]
    d_re = np.hstack(blocks)
    d_zeta = np.hstack([d_re, 1j * d_re])
    F11 = np.real(d_omega.conj().T @ d_omega)
    F12 = np.real(d_omega.conj().T @ d_zeta)
    F21 = np.real(d_zeta.conj().T @ d_omega)
    F22 = np.real(d_zeta.conj().T @ d_zeta)
    A_gram = A.conj().T @ A
    P = I_N - A @ np.linalg.solve(A_gram, A.conj().T)
    return FimBlocks(F11, F12, F21, F22, d_omega, d_zeta, dAu, dAv, P, S @ S.conj().T, A)


def crb_from_fim(blocks: FimBlocks, noise_power) -> np.ndarray:
    """Top-left 2K x 2K block of the inverse FIM via the Schur complement."""
    schur = blocks.F11 - blocks.F12 @ np.linalg.solve(blocks.F22, blocks.F21)
    return 0.5 * noise_power * np.linalg.inv(schur)


def crb_1d(x, u, S, noise_power, wavelength) -> np.ndarray:
    """K x K CRB of ``u_1..u_K`` for a linear array along x.

    ``x`` are antenna coordinates (meters), ``u`` the target coordinates.
    """
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    S = np.asarray(S)
    N, K = x.size, u.size
    if N <= K:
        raise InvalidInputError(f"need more antennas than targets (N={N}, K={K})")
    if S.shape[0] != K:
        raise InvalidInputError("source matrix must have one row per target")
    k = 2.0 * np.pi / wavelength
    A = np.exp(1j * k * np.outer(x, u))
    dA = 1j * k * x[:, None] * A
    targets = TargetSet(u, np.zeros_like(u))
    gram = A.conj().T @ A
    if np.linalg.cond(gram) > COND_LIMIT:
        raise _singular(targets, "steering Gram matrix")
    P = np.eye(N) - A @ np.linalg.solve(gram, A.conj().T)
    RS = S @ S.conj().T
    info = np.real(RS.T * (dA.conj().T @ P @ dA))
    info = 0.5 * (info + info.T)
    return 0.5 * noise_power * _invert_guarded(info, targets)


def _bounds(geometry, num_targets, num_snapshots, signal_power, noise_power, wavelength, region_size):
    st = geometry_stats(geometry)
    vx, vy, c = st["var_x"], st["var_y"], st["cov"]
    scale = max(vx + vy, np.finfo(float).tiny)
    if vx <= 1e-14 * scale or vy <= 1e-14 * scale:
        raise DegenerateGeometryError("antenna coordinates have no spread along one axis")
    den_x = vx - c * c / vy
    den_y = vy - c * c / vx
    if den_x <= 1e-14 * scale or den_y <= 1e-14 * scale:
        raise DegenerateGeometryError("antenna coordinates are collinear")
    pre = num_targets * noise_power * wavelength ** 2 / (geometry.num_antennas * num_snapshots * signal_power * np.pi ** 2)
    bound_a = pre / 8.0 * (1.0 / den_x + 1.0 / den_y)
    bound_b = pre / region_size ** 2
    return float(bound_a), float(bound_b)


def lower_bound(geometry: ArrayGeometry, scenario: ScenarioConfig) -> BoundReport:
    """Variance/covariance bound (a) and region-size bound (b) on the CRB trace.

    Assumes every target delivers energy ``T * P_s``.
    """
    a, b = _bounds(geometry, scenario.num_targets, scenario.num_snapshots, scenario.signal_power,
                   scenario.noise_power, scenario.wavelength, scenario.region_size)
    return BoundReport(bound_a=a, bound_b=b)


def bound_b_value(scenario: ScenarioConfig) -> float:
    """Geometry-free bound ``K sigma^2 lambda^2 / (N T P_s A^2 pi^2)``."""
    return (scenario.num_targets * scenario.noise_power * scenario.wavelength ** 2
            / (scenario.num_antennas * scenario.num_snapshots * scenario.signal_power
               * scenario.region_size ** 2 * np.pi ** 2))


def _zeta_star(dai, daj, proj_k):
    """Minimizer over real z of ||proj_k (dai - z daj)||^2."""
    pj = proj_k @ daj
    return float(np.real(np.vdot(proj_k @ dai, pj)) / np.real(np.vdot(pj, pj)))


def check_bound_conditions(geometry: ArrayGeometry, targets, S, wavelength, noise_power=1.0,
                           region_size=None) -> BoundReport:
    """Residuals of the equality conditions for both bounds.

    ``condition_a_residuals`` = [cross-target interference term maximized over
    k != k' and both axis pairs, worst ``||A^H Π_k⊥ (ȧ_i - z* ȧ_j)||_inf``].
    ``condition_b_residuals`` = [|cov|, |var_x - var_y|, max |mean|,
    max_n |x_n^2 + y_n^2 - A^2/2|].

    Bounds are evaluated with ``P_s`` taken as the mean per-target energy of ``S``.
    """
    targets = _as_targets(targets)
    S = _check_instance(geometry, targets, S)
    K, T = len(targets), S.shape[1]
    region = geometry.region_size if region_size is None else region_size
    A, dAu, dAv, P = _projected(geometry, targets, wavelength)
    RS_T = (S @ S.conj().T).T
    derivs = (dAu, dAv)

    cross = 0.0
    for k in range(K):
        for kk in range(K):
            if k == kk:
                continue
            for da in derivs:
                for db in derivs:
                    val = np.real(RS_T[k, kk] * (da[:, k].conj() @ P @ db[:, kk]))
                    cross = max(cross, abs(float(val)))

    sens = 0.0
    N = geometry.num_antennas
    for k in range(K):
        a_k = A[:, k]
        proj_k = np.eye(N) - np.outer(a_k, a_k.conj()) / np.real(np.vdot(a_k, a_k))
        for i, j in ((0, 1), (1, 0)):
            dai, daj = derivs[i][:, k], derivs[j][:, k]
            if np.linalg.norm(proj_k @ daj) == 0.0:
                continue
            z = _zeta_star(dai, daj, proj_k)
            res = A.conj().T @ proj_k @ (dai - z * daj)
            sens = max(sens, float(np.max(np.abs(res))))

    st = geometry_stats(geometry)
    radial = float(np.max(np.abs(geometry.x ** 2 + geometry.y ** 2 - region ** 2 / 2.0))) \
        if math.isfinite(region) else math.inf
    cond_b = [abs(st["cov"]), abs(st["var_x"] - st["var_y"]), max(abs(st["mean_x"]), abs(st["mean_y"])), radial]

    P_s = float(np.mean(np.sum(np.abs(S) ** 2, axis=1)) / T)
    try:
        a, b = _bounds(geometry, K, T, P_s, noise_power, wavelength, region)
    except DegenerateGeometryError:
        a, b = math.nan, math.nan
    return BoundReport(bound_a=a, bound_b=b, condition_a_residuals=[cross, sens], condition_b_residuals=cond_b)


def sensitivity_diagnostics(geometry: ArrayGeometry, targets, wavelength) -> SensitivityDiagnostics:
    """Correlation and effective power of the projected steering derivatives."""
    targets = _as_targets(targets)
    _check_instance(geometry, targets)
    K = len(targets)
    A, dAu, dAv, P = _projected(geometry, targets, wavelength)
    proj = np.stack([P @ dAu, P @ dAv])  # (2, N, K)
    power = np.real(np.sum(np.abs(proj) ** 2, axis=1))  # (2, K)
    if np.any(power <= 1e-300):
        raise DegenerateGeometryError("a projected steering derivative vanishes (no spread along an axis)")
    # inner[i, j, k, k'] = ȧ_i(k)^H Π⊥ ȧ_j(k')
    inner = np.einsum("ink,jnl->ijkl", proj.conj(), proj)
    rho = np.abs(inner) ** 2 / (power[:, None, :, None] * power[None, :, None, :])
    rho = np.clip(np.transpose(rho, (2, 3, 0, 1)), 0.0, 1.0)  # (k, k', i, j)
    for k in range(K):
        rho[k, k] = np.nan
    cross_uv = np.real(inner[0, 1, np.arange(K), np.arange(K)])
    omega = np.empty((2, K))
    omega[0] = power[0] - cross_uv ** 2 / power[1]
    omega[1] = power[1] - cross_uv ** 2 / power[0]
    omega = np.maximum(omega, 0.0)
    rho_mean = float(np.nanmean(rho)) if K > 1 else math.nan
    return SensitivityDiagnostics(rho, omega, rho_mean, float(np.mean(omega)))


def steering_correlation_map(geometry: ArrayGeometry, reference, grid_u, grid_v, wavelength) -> np.ndarray:
    """``|a(ref)^H a(r)|^2 / N^2`` on the grid; shape ``(len(grid_u), len(grid_v))``."""
    ref_u, ref_v = (reference.u, reference.v) if hasattr(reference, "u") else reference
    grid_u = np.asarray(grid_u, dtype=float)
    grid_v = np.asarray(grid_v, dtype=float)
    k = 2.0 * np.pi / wavelength
    N = geometry.num_antennas
    # a(ref)^H a(r) = sum_n exp(j k (x_n (u - ref_u) + y_n (v - ref_v)))
    ex = np.exp(1j * k * np.outer(grid_u - ref_u, geometry.x))  # (U, N)
    ey = np.exp(1j * k * np.outer(geometry.y, grid_v - ref_v))  # (N, V)
    val = np.abs(ex @ ey) ** 2 / N ** 2
    return np.minimum(val, 1.0)


__all__ = [
    "FimBlocks", "CrbResult", "BoundReport", "SensitivityDiagnostics", "COND_LIMIT",
    "crb_matrix", "fim_blocks", "crb_from_fim", "crb_1d", "lower_bound", "bound_b_value",
    "check_bound_conditions", "sensitivity_diagnostics", "steering_correlation_map",
]
