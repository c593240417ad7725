"""Demixing-matrix updates by the auxiliary function method and vectorwise coordinate descent.

Shapes used throughout: mixtures ``X`` are ``(I, J, M)``, demixing matrices
``W`` are ``(I, N, M)`` with ``W[i, n] = w_in^H``, and separated signals
``Y`` are ``(I, J, N)``.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from .errors import ContractViolation, SingularMatrixError
from .linalg import RIDGE, HermitianBlockMatrix, psd_inv
from .model import SourceModel, effective_covariance

__all__ = [
    "compute_pi",
    "demix",
    "demix_sweep",
    "quadratic_forms",
    "stack_frequencies",
    "update_demixing",
    "vcd_update",
    "weighted_covariances",
]

# |eta_hat| below this (times max(1, eta)) takes the gamma-free branch
BRANCH_TOL = 1e-12


def demix(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``y_ij = W_i x_ij`` for every bin and frame."""
    W, X = np.asarray(W), np.asarray(X)
    if W.ndim != 3 or X.ndim != 3 or W.shape[0] != X.shape[0] or W.shape[2] != X.shape[2]:
        raise ContractViolation(f"demixing matrices {W.shape} do not fit mixture {X.shape}")
    return X @ np.swapaxes(W, -1, -2)


def stack_frequencies(Y: np.ndarray, partition) -> List[np.ndarray]:
    """Frequency-stacked vectors per block group, each of shape ``(J, N, n_blocks, b)``."""
    return [np.ascontiguousarray(np.moveaxis(Y[spec.index], (0, 1), (2, 3))) for spec in partition.groups]


def quadratic_forms(Y: np.ndarray, R_inv: HermitianBlockMatrix) -> np.ndarray:
    """``y_jn^H R_jn^{-1} y_jn`` for all frames and sources, shape ``(J, N)``."""
    q = 0.0
    for y, g in zip(stack_frequencies(Y, R_inv.partition), R_inv.groups):
        q = q + np.einsum("jnla,jnlab,jnlb->jn", y.conj(), g, y, optimize=True).real
    return np.asarray(q)


def _pi_from_q(q: np.ndarray, nu: float, n_bins: int) -> np.ndarray:
    if math.isinf(nu):
        return np.ones_like(q)
    return (nu + 2 * n_bins) / (nu + 2 * q)


def compute_pi(Y: np.ndarray, model: SourceModel, nu: float, ridge: float = RIDGE, R_inv=None) -> np.ndarray:
    """Auxiliary weights ``pi_jn = (nu + 2I) / (nu + 2 y^H R^{-1} y)``, shape ``(J, N)``.

    ``nu = inf`` gives ones without touching the model.
    """
    if math.isinf(nu):
        return np.ones((Y.shape[1], Y.shape[2]))
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    return _pi_from_q(quadratic_forms(Y, R_inv), nu, Y.shape[0])


def weighted_covariances(
    X: np.ndarray,
    model: SourceModel,
    pi: np.ndarray,
    W: np.ndarray,
    i: int,
    n: int,
    ridge: float = RIDGE,
    R_inv: Optional[HermitianBlockMatrix] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Quadratic and linear coefficients of the auxiliary function in ``w_in``.

    Returns ``Q_in`` (M x M) and ``gamma_in`` (M,).  Only bins of the block
    containing ``i`` contribute to ``gamma_in``; all other entries of
    ``(R / pi)^{-1}`` vanish.
    """
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    J = X.shape[1]
    l, p = model.partition.locate(i)
    bins = model.partition.blocks[l]
    P = pi[:, n, None, None] * R_inv.block(l)[:, n]  # (J, b, b)
    x = X[i]  # (J, M)
    Q = np.einsum("j,ja,jb->ab", P[:, p, p].real, x, x.conj()) / J
    gamma = np.zeros(X.shape[2], dtype=complex)
    for q, i2 in enumerate(bins):
        if i2 == i:
            continue
        y = X[i2] @ W[i2, n]  # y_{i'jn} = w_{i'n}^H x_{i'j}
        gamma += np.einsum("j,ja,j->a", P[:, q, p], x, y.conj()) / J
    return 0.5 * (Q + Q.conj().T), gamma


def _solve_graded(Q: np.ndarray, rhs: np.ndarray, ridge: float) -> Tuple[np.ndarray, np.ndarray]:
    """Solve ``Q x = rhs`` for a batch of Hermitian PD ``Q`` after Jacobi scaling.

    The scaled matrix has unit diagonal; a ridge of ``ridge`` is added only
    to the problems whose scaled matrix is not numerically positive definite.
    Returns the solutions and a mask of the ridged problems.
    """
    M = Q.shape[-1]
    d = np.sqrt(np.diagonal(Q, axis1=-2, axis2=-1).real)
    if not np.all(d > 0):
        raise np.linalg.LinAlgError("zero diagonal")
    Qs = Q / (d[:, :, None] * d[:, None, :])
    Qs = 0.5 * (Qs + np.swapaxes(Qs, -1, -2).conj())
    ok = np.ones(len(Q), dtype=bool)
    try:
        np.linalg.cholesky(Qs)
    except np.linalg.LinAlgError:
        ok = np.linalg.eigvalsh(Qs)[:, 0] > 0
    if ridge and not np.all(ok):
        Qs = Qs + np.where(ok, 0.0, ridge)[:, None, None] * np.eye(M)
    return np.linalg.solve(Qs, rhs / d[..., None]) / d[..., None], ~ok


def _vcd_core(Q: np.ndarray, gamma: np.ndarray, n: int, ridge: float) -> Tuple[np.ndarray, np.ndarray]:
    """VCD step in coordinates where the current ``W_i`` is the identity.

    Minimises ``u^H Q u + 2 Re(u^H gamma) - log|u_n|^2`` for a batch of
    problems.  Returns ``u`` and the mask of problems that needed a ridge.
    """
    M = Q.shape[-1]
    rhs = np.zeros(Q.shape[:1] + (M, 2), dtype=complex)
    rhs[:, n, 0] = 1.0
    rhs[:, :, 1] = gamma
    sol, ridged = _solve_graded(Q, rhs, ridge)
    zeta, zeta_hat = sol[..., 0], sol[..., 1]
    eta = zeta[:, n].real  # zeta^H Q zeta
    if not np.all(eta > 0):
        raise np.linalg.LinAlgError("Q is not positive definite")
    eta_hat = zeta_hat[:, n]  # zeta^H Q zeta_hat
    mag = np.abs(eta_hat)
    branch0 = mag < BRANCH_TOL * np.maximum(1.0, eta)
    # smaller root of t^2 eta - t|eta_hat| - 1 = 0, written without cancellation
    phase = np.where(branch0, 1.0, eta_hat / np.where(branch0, 1.0, mag))
    coef = np.where(branch0, 1.0 / np.sqrt(eta), -2.0 * phase / (mag + np.sqrt(mag**2 + 4.0 * eta)))
    return coef[:, None] * zeta - zeta_hat, ridged


def _nearly_singular(Wi: np.ndarray) -> np.ndarray:
    """``|det W| / prod(row norms)`` below round-off, per matrix."""
    norms = np.prod(np.linalg.norm(Wi, axis=-1), axis=-1)
    return ~(np.abs(np.linalg.det(Wi)) > 1e-13 * norms)


def _vcd_batch(Wi: np.ndarray, Q: np.ndarray, gamma: np.ndarray, n: int, ridge: float) -> np.ndarray:
    """Vectorised VCD step from ``Q`` and ``gamma`` in mixture coordinates. Returns ``w_in``."""
    WiH = np.swapaxes(Wi, -1, -2).conj()
    Qy = Wi @ Q @ WiH
    u, ridged = _vcd_core(0.5 * (Qy + np.swapaxes(Qy, -1, -2).conj()), np.einsum("lab,lb->la", Wi, gamma), n, ridge)
    if np.any(ridged) and np.any(_nearly_singular(Wi[ridged])):
        raise np.linalg.LinAlgError("W_i is singular")
    return np.einsum("lab,lb->la", WiH, u)


def vcd_update(
    Wi: np.ndarray, Q: np.ndarray, gamma: np.ndarray, n: int, ridge: float = RIDGE, index: Optional[int] = None
) -> np.ndarray:
    """Exact minimiser over ``w_in`` of ``w^H Q w + 2 Re(w^H gamma) - log|det W_i|^2``.

    Args:
        Wi: Current demixing matrix ``W_i`` (N x M), nonsingular.  The
            minimiser does not depend on row ``n``, which only fixes the
            coordinates the step is solved in.
        Q: Hermitian positive definite ``Q_in``.
        gamma: Linear coefficient ``gamma_in``.
        n: Row to update.
        ridge: Ridge added to the unit-diagonal scaled ``Q`` when it is not
            numerically positive definite.
        index: Bin index reported in a singularity error.

    Returns:
        The new column vector ``w_in``; the new row of ``W_i`` is its conjugate.
    """
    Wi = np.asarray(Wi, dtype=complex)
    Q = np.asarray(Q, dtype=complex)
    try:
        w = _vcd_batch(Wi[None], Q[None], np.asarray(gamma, dtype=complex)[None], n, ridge)[0]
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"W_i Q_in is singular at (i={index}, n={n})", index=(index, n)) from None
    if not np.all(np.isfinite(w)):
        raise SingularMatrixError(f"W_i Q_in is singular at (i={index}, n={n})", index=(index, n))
    return w


def update_demixing(
    W: np.ndarray,
    X: np.ndarray,
    model: SourceModel,
    pi: np.ndarray,
    ridge: float = RIDGE,
    R_inv: Optional[HermitianBlockMatrix] = None,
) -> np.ndarray:
    """One VCD pass over all ``(i, n)`` with fixed auxiliary weights ``pi``.

    The order is bins ascending (outer) and sources ascending (inner).  Bins
    of different blocks do not interact, so the pass is vectorised over
    blocks of equal size while positions inside a block run sequentially.
    """
    W = np.array(W, dtype=complex)
    X = np.asarray(X)
    I, J, M = X.shape
    N = W.shape[1]
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    partition = model.partition

    weights = np.empty((I, J, N))
    for g, spec in zip(R_inv.groups, partition.groups):
        d = np.diagonal(g, axis1=-2, axis2=-1).real  # (J, N, nb, b)
        weights[spec.index] = np.moveaxis(d, (0, 1), (2, 3))
    weights *= pi[None]

    # Q_in and gamma_in are formed in the coordinates of the current W_i
    # (y = W_i x), where Q is graded rather than dominated by one direction
    for g, spec in zip(R_inv.groups, partition.groups):
        idx = spec.index  # (nb, b)
        Xg = X[idx]  # (nb, b, J, M)
        # Pt[q, p, n] = [pi R^-1]_{i' i} for i' at position q and i at position p, shape (nb, J)
        Pt = np.ascontiguousarray((g * pi[:, :, None, None, None]).transpose(3, 4, 1, 2, 0))
        for p in range(spec.size):
            bins = idx[:, p]
            for n in range(N):
                c = np.zeros((len(bins), J), dtype=complex)
                for q in range(spec.size):
                    if q != p:
                        yq = (Xg[:, q] @ W[idx[:, q], n][..., None])[..., 0]  # (nb, J)
                        c += Pt[q, p, n] * yq.conj()
                Wi = W[bins]
                Yi = Xg[:, p] @ np.swapaxes(Wi, -1, -2)  # (nb, J, N)
                Qy = np.swapaxes(Yi * weights[bins, :, n, None], -1, -2) @ Yi.conj() / J
                gy = (c[:, None, :] @ Yi)[:, 0] / J
                try:
                    u, ridged = _vcd_core(0.5 * (Qy + np.swapaxes(Qy, -1, -2).conj()), gy, n, ridge)
                    ok = np.all(np.isfinite(u), axis=-1)
                    if np.any(ridged):
                        ok[ridged] &= ~_nearly_singular(Wi[ridged])
                except np.linalg.LinAlgError:
                    u, ok = None, np.zeros(len(bins), dtype=bool)
                if not np.all(ok):
                    i = int(bins[_first_singular(Qy, gy, n, ridge, ok)])
                    raise SingularMatrixError(f"W_i Q_in is singular at (i={i}, n={n})", index=(i, n))
                # new row n of W_i is u^H W_i
                W[bins, n] = np.einsum("la,lam->lm", u.conj(), Wi)
    return W


def _first_singular(Q, gamma, n, ridge, ok):
    for l in range(len(Q)):
        try:
            u, _ = _vcd_core(Q[l : l + 1], gamma[l : l + 1], n, ridge)
        except np.linalg.LinAlgError:
            return l
        if not np.all(np.isfinite(u)):
            return l
    return int(np.flatnonzero(~ok)[0]) if np.any(~ok) else 0


def demix_sweep(
    W: np.ndarray,
    X: np.ndarray,
    model: SourceModel,
    nu: float,
    ridge: float = RIDGE,
    R_inv: Optional[HermitianBlockMatrix] = None,
) -> np.ndarray:
    """Refresh ``pi`` at the current ``W`` and run one VCD pass."""
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    pi = compute_pi(demix(W, X), model, nu, ridge, R_inv=R_inv)
    return update_demixing(W, X, model, pi, ridge, R_inv=R_inv)
