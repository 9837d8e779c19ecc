"""Pure-numpy implementation of the batched CRB-trace kernels.

The CRB for one realization depends on the array only through the Gram
matrix ``Q = E^H E`` of the stacked rows ``e_n = [a_n, j k x_n a_n, j k y_n a_n]``
(length 3K), so every kernel works on ``(M, 3K, 3K)`` stacks of ``Q``.
Moving a single antenna only changes its own rank-one term.

Both this module and the compiled ``_crbkernel`` expose the same four
functions with the same semantics; ``masense.kernels`` picks one.
"""
import numpy as np

BACKEND = "numpy"


def _rows(px, py, u, v, wavenumber):
    """Per-sample rows ``e`` for one antenna: shape (M, 3K)."""
    a = np.exp(1j * wavenumber * (px * u + py * v))
    return np.concatenate([a, 1j * wavenumber * px * a, 1j * wavenumber * py * a], axis=-1)


def gram_matrices(x, y, u, v, wavenumber):
    """Stacked Gram matrices for a full array.

    Args:
        x, y: antenna coordinates, shape (N,).
        u, v: target coordinates per realization, shape (M, K).
        wavenumber: ``2 pi / lambda``.

    Returns:
        complex array (M, 3K, 3K).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    phase = wavenumber * (x[None, :, None] * u[:, None, :] + y[None, :, None] * v[:, None, :])
    a = np.exp(1j * phase)
    E = np.concatenate([a, 1j * wavenumber * x[None, :, None] * a,
                        1j * wavenumber * y[None, :, None] * a], axis=-1)
    return np.einsum("mni,mnj->mij", E.conj(), E)


def antenna_gram(px, py, u, v, wavenumber):
    """Rank-one Gram contribution of a single antenna at ``(px, py)``."""
    e = _rows(float(px), float(py), np.asarray(u, float), np.asarray(v, float), wavenumber)
    return e.conj()[:, :, None] * e[:, None, :]


def _single_trace(Q, rs2, pivot_tol):
    K = Q.shape[0] // 3
    G = Q[:K, :K]
    try:
        Lg = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return np.nan, False
    if np.min(np.real(np.diag(Lg)) ** 2) <= pivot_tol * np.max(np.real(np.diag(G))):
        return np.nan, False
    W = np.linalg.solve(Lg, Q[:K, K:])
    H = np.real(rs2 * (Q[K:, K:] - W.conj().T @ W))
    try:
        Lh = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return np.nan, False
    if np.min(np.diag(Lh) ** 2) <= pivot_tol * np.max(np.diag(H)):
        return np.nan, False
    Linv = np.linalg.inv(Lh)
    return float(np.sum(Linv * Linv)), True


def traces_from_gram(Q, rs2, noise_power, pivot_tol=1e-12):
    """CRB traces for each realization.

    Args:
        Q: (M, 3K, 3K) Gram stack.
        rs2: (M, 2K, 2K) complex, ``ones(2, 2) kron R_S^T`` per realization.
        noise_power: sigma^2.
        pivot_tol: a Cholesky pivot below ``pivot_tol`` times the largest
            diagonal entry marks the realization as singular.

    Returns:
        ``(traces, ok)``; ``traces[m]`` is NaN where ``ok[m]`` is False.
    """
    Q = np.asarray(Q)
    M = Q.shape[0]
    K = Q.shape[-1] // 3
    G = Q[:, :K, :K]
    try:
        Lg = np.linalg.cholesky(G)
        W = np.linalg.solve(Lg, Q[:, :K, K:])
        H = np.real(rs2 * (Q[:, K:, K:] - np.conj(np.swapaxes(W, 1, 2)) @ W))
        Lh = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        out = np.empty(M)
        ok = np.empty(M, dtype=bool)
        for m in range(M):
            out[m], ok[m] = _single_trace(Q[m], rs2[m], pivot_tol)
        return 0.5 * noise_power * out, ok
    pg = np.real(np.diagonal(Lg, axis1=1, axis2=2)) ** 2
    ph = np.diagonal(Lh, axis1=1, axis2=2) ** 2
    ok = (pg.min(axis=1) > pivot_tol * np.real(np.diagonal(G, axis1=1, axis2=2)).max(axis=1)) & \
         (ph.min(axis=1) > pivot_tol * np.diagonal(H, axis1=1, axis2=2).max(axis=1))
    Linv = np.linalg.inv(Lh)
    tr = np.sum(Linv * Linv, axis=(1, 2))
    tr = np.where(ok, tr, np.nan)
    return 0.5 * noise_power * tr, ok


def candidate_traces(Q_rest, px, py, u, v, rs2, wavenumber, noise_power, pivot_tol=1e-12):
    """Traces after placing one antenna at ``(px, py)`` on top of ``Q_rest``."""
    return traces_from_gram(Q_rest + antenna_gram(px, py, u, v, wavenumber), rs2, noise_power, pivot_tol)
