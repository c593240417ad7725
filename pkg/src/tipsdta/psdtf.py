"""Student's t PSDTF updates of the activations and basis matrices."""

from __future__ import annotations

import logging
from typing import Tuple

import numpy as np

from .demix import compute_pi, stack_frequencies
from .errors import DegenerateBasisError
from .linalg import RIDGE, HermitianBlockMatrix, hermitize, psd_inv, psd_power, psd_sqrt
from .model import ACTIVATION_FLOOR, SourceModel, effective_covariance, normalize_bases

__all__ = [
    "basis_statistics",
    "source_sweep",
    "update_activations",
    "update_bases",
]

logger = logging.getLogger(__name__)


def _whitened(Y: np.ndarray, R_inv: HermitianBlockMatrix):
    """``R_jn^{-1} y_jn`` per block group, shapes ``(J, N, nb, b)``."""
    return [(g @ y[..., None])[..., 0] for g, y in zip(R_inv.groups, stack_frequencies(Y, R_inv.partition))]


def update_activations(
    model: SourceModel, Y: np.ndarray, pi: np.ndarray, ridge: float = RIDGE, R_inv=None
) -> SourceModel:
    """Multiplicative update ``v <- v * sqrt(tr(pi y y^H R^-1 U R^-1) / tr(R^-1 U))``.

    ``R`` is frozen at the incoming model for all ``(k, j, n)``.  A zero
    denominator leaves the activation unchanged.  Results are floored at
    ``ACTIVATION_FLOOR``, or at the previous value if that is already lower:
    trace normalization can push an activation under the floor, and lifting
    it back up would move it away from the minimiser and raise the cost.
    """
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    num = 0.0
    den = 0.0
    for z, g_inv, U in zip(_whitened(Y, R_inv), R_inv.groups, model.U.groups):
        num = num + np.einsum("jnla,knlab,jnlb->kjn", z.conj(), U, z).real
        den = den + np.einsum("jnlab,knlba->kjn", g_inv, U).real
    num = num * pi[None]
    zero = ~(den > 0)
    if np.any(zero):
        logger.debug("%d activations with zero denominator left unchanged", int(zero.sum()))
    ratio = np.where(zero, 1.0, num / np.where(zero, 1.0, den))
    v = np.maximum(model.v * np.sqrt(ratio), np.minimum(model.v, ACTIVATION_FLOOR))
    return SourceModel(v, model.U)


def basis_statistics(
    model: SourceModel, Y: np.ndarray, pi: np.ndarray, ridge: float = RIDGE, R_inv=None
) -> Tuple[HermitianBlockMatrix, HermitianBlockMatrix]:
    """``S_kn = sum_j v R^-1 (pi y y^H) R^-1`` and ``T_kn = sum_j v R^-1``, batch shape ``(K, N)``."""
    if R_inv is None:
        R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    S, T = [], []
    for z, g_inv in zip(_whitened(Y, R_inv), R_inv.groups):
        S.append(hermitize(np.einsum("kjn,jn,jnla,jnlb->knlab", model.v, pi, z, z.conj())))
        T.append(hermitize(np.einsum("kjn,jnlab->knlab", model.v, g_inv)))
    return HermitianBlockMatrix(model.partition, S, psd=True), HermitianBlockMatrix(model.partition, T, psd=True)


def _inv_sqrt_or_retry(M: HermitianBlockMatrix, ridge: float) -> HermitianBlockMatrix:
    # an all-zero block has no usable inverse square root: ridge once, then give up
    tops = [np.linalg.eigvalsh(g)[..., -1] for g in M.groups]
    if all(np.all(t > 0) for t in tops):
        return psd_power(M, -0.5)
    retry = M.map(lambda g: g + max(ridge, np.finfo(float).tiny) * np.eye(g.shape[-1]), psd=True)
    for g, spec in zip(retry.groups, M.partition.groups):
        top = np.linalg.eigvalsh(g)[..., -1]
        bad = np.argwhere(~(top > 0))
        if bad.size:
            k, n = int(bad[0][0]), int(bad[0][1])
            raise DegenerateBasisError(f"basis update for (k={k}, n={n}) is degenerate", index=(k, n))
    return psd_power(retry, -0.5)


def update_bases(
    model: SourceModel, Y: np.ndarray, pi: np.ndarray, ridge: float = RIDGE, R_inv=None
) -> SourceModel:
    """``U <- U S^1/2 (S^1/2 U T U S^1/2)^-1/2 S^1/2 U`` blockwise for every ``(k, n)``.

    The result is not trace-normalized; see :func:`normalize_bases`.
    """
    S, T = basis_statistics(model, Y, pi, ridge, R_inv)
    U = model.U
    S_half = psd_sqrt(S)
    inner = (S_half @ U @ T @ U @ S_half).hermitize()
    middle = _inv_sqrt_or_retry(inner, ridge)
    new = (U @ S_half @ middle @ S_half @ U).hermitize()
    new = psd_power(new, 1.0)  # clip round-off negative eigenvalues
    return SourceModel(model.v, HermitianBlockMatrix(model.partition, new.groups, psd=True))


def source_sweep(model: SourceModel, Y: np.ndarray, nu: float, ridge: float = RIDGE) -> SourceModel:
    """Activations, then bases (each with freshly computed ``pi`` and ``R``), then normalization."""
    R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    pi = compute_pi(Y, model, nu, ridge, R_inv=R_inv)
    model = update_activations(model, Y, pi, ridge, R_inv=R_inv)
    R_inv = psd_inv(effective_covariance(model, ridge), ridge=0.0)
    pi = compute_pi(Y, model, nu, ridge, R_inv=R_inv)
    model = update_bases(model, Y, pi, ridge, R_inv=R_inv)
    return normalize_bases(model)
