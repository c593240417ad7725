"""Alternating optimization loop, cost evaluation and scale restoration."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np

from .demix import _pi_from_q, demix, quadratic_forms, update_demixing
from .errors import ContractViolation, InvalidCostError, SingularMatrixError
from .linalg import RIDGE, logdet, psd_inv
from .model import ModelConfig, SourceModel, effective_covariance, init_model
from .psdtf import source_sweep
from .signal import SpectrogramTensor, WaveformBatch, istft

__all__ = [
    "CostRecord",
    "CostTrace",
    "SeparationResult",
    "cost",
    "projection_back",
    "separate",
]

TRACE_HEADER = ["iteration", "phase", "cost", "seconds"]

logger = logging.getLogger(__name__)


def _cost_from_parts(W, q, nu, logdet_R) -> float:
    n_frames = q.shape[0]
    n_bins = W.shape[0]
    _, logabs = np.linalg.slogdet(W)
    if not np.all(np.isfinite(logabs)):
        return math.inf
    if math.isinf(nu):
        data_term = q
    else:
        data_term = 0.5 * (nu + 2 * n_bins) * np.log1p(2.0 * q / nu)
    return float(np.sum(logdet_R + data_term) - 2.0 * n_frames * np.sum(logabs))


def cost(W: np.ndarray, model: SourceModel, Y: np.ndarray, nu: float, ridge: float = RIDGE) -> float:
    """Negative log-likelihood without its parameter-free constant.

    ``sum_jn [log det R_jn + (nu + 2I)/2 log(1 + 2/nu y^H R^-1 y)] - J sum_i log|det W_i|^2``;
    for ``nu = inf`` the second term is replaced by its limit ``y^H R^-1 y``.
    Returns ``inf`` when some ``W_i`` is singular.
    """
    R = effective_covariance(model, ridge)
    return _cost_from_parts(np.asarray(W), quadratic_forms(np.asarray(Y), psd_inv(R, ridge=0.0)), nu, logdet(R))


def projection_back(Y: np.ndarray, W: np.ndarray, reference: int = 0) -> np.ndarray:
    """Rescale source ``n`` at bin ``i`` by ``[W_i^-1]_{reference, n}``.

    The rescaled sources add up to the mixture at the reference channel.
    """
    try:
        A = np.linalg.inv(W)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("a demixing matrix is singular; cannot project back") from None
    return Y * A[:, None, reference, :]


@dataclass
class CostRecord:
    iteration: int
    phase: str
    cost: float
    seconds: float


@dataclass
class CostTrace:
    """Cost after every demixing sweep and every source-model sweep.

    ``initial`` is the cost of the starting point, before any update.  In CSV
    form it is the row with phase ``init`` and iteration 0.
    """

    initial: Optional[float] = None
    records: List[CostRecord] = field(default_factory=list)

    def append(self, iteration: int, phase: str, value: float, seconds: float) -> None:
        self.records.append(CostRecord(iteration, phase, float(value), float(seconds)))

    @property
    def costs(self) -> np.ndarray:
        head = [] if self.initial is None else [self.initial]
        return np.array(head + [r.cost for r in self.records])

    def phase_costs(self, phase: str) -> np.ndarray:
        return np.array([r.cost for r in self.records if r.phase == phase])

    def increases(self, rtol: float = 1e-9) -> List[int]:
        """Positions in :attr:`costs` where the value rose by more than ``rtol`` relative."""
        c = self.costs
        return [t for t in range(1, len(c)) if c[t] - c[t - 1] > rtol * abs(c[t - 1])]

    def is_monotone(self, rtol: float = 1e-9) -> bool:
        return not self.increases(rtol)

    def to_csv(self, path, timing: bool = False) -> None:
        """Write ``iteration,phase,cost,seconds``; without ``timing`` the seconds column is 0."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            if self.initial is not None:
                writer.writerow([0, "init", repr(self.initial), "0"])
            for r in self.records:
                writer.writerow([r.iteration, r.phase, repr(r.cost), f"{r.seconds:.6f}" if timing else "0"])

    @classmethod
    def from_csv(cls, path) -> "CostTrace":
        trace = cls()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != TRACE_HEADER:
                raise ContractViolation(f"{path}: expected header {','.join(TRACE_HEADER)}")
            for row in reader:
                if row["phase"] == "init":
                    trace.initial = float(row["cost"])
                    continue
                trace.append(int(row["iteration"]), row["phase"], float(row["cost"]), float(row["seconds"]))
        return trace


@dataclass
class SeparationResult:
    spectrogram: SpectrogramTensor
    waveforms: Optional[WaveformBatch]
    W: np.ndarray
    model: SourceModel
    trace: CostTrace


def separate(
    X: Union[SpectrogramTensor, np.ndarray],
    config: ModelConfig,
    reference: int = 0,
    callback: Optional[Callable[[int, np.ndarray, SourceModel], None]] = None,
) -> SeparationResult:
    """Blind separation of a determined mixture.

    Each outer iteration runs ``config.vcd_sweeps`` demixing sweeps followed by
    one source-model sweep; the cost is recorded after every sweep.  The
    output is rescaled by :func:`projection_back` and, when the input carries
    framing metadata, also synthesised to waveforms.

    Args:
        X: Mixture spectrogram, ``(I, J, M)``.
        config: Model and schedule configuration.
        reference: Reference microphone for projection back.
        callback: Called as ``callback(iteration, W, model)`` after every
            outer iteration.
    """
    spec = X if isinstance(X, SpectrogramTensor) else SpectrogramTensor(np.asarray(X))
    data = np.asarray(spec.data, dtype=complex)
    n_bins, n_frames, n_channels = data.shape
    if not 0 <= reference < n_channels:
        raise ContractViolation(f"reference channel {reference} out of range for {n_channels} channels")
    nu, ridge = config.nu, config.ridge

    W = np.tile(np.eye(n_channels, dtype=complex), (n_bins, 1, 1))
    model = init_model(config, n_bins, n_frames, n_channels)
    if max(model.partition.sizes) > n_frames:
        # every basis can then collapse onto the span of the frames
        logger.warning(
            "block size %d exceeds the %d frames; the likelihood is unbounded and descent is not guaranteed",
            max(model.partition.sizes),
            n_frames,
        )
    trace = CostTrace()
    start = time.perf_counter()

    R = effective_covariance(model, ridge)
    R_inv, logdet_R = psd_inv(R, ridge=0.0), logdet(R)
    Y = demix(W, data)
    q = quadratic_forms(Y, R_inv)
    trace.initial = _cost_from_parts(W, q, nu, logdet_R)

    def record(iteration, phase, value):
        trace.append(iteration, phase, value, time.perf_counter() - start)
        if not math.isfinite(value):
            raise InvalidCostError(f"cost is not finite after {phase} step of iteration {iteration}", trace=trace)

    for t in range(1, config.outer_iterations + 1):
        for _ in range(config.vcd_sweeps):
            # same refresh as demix_sweep, reusing the quadratic forms of the cost
            pi = _pi_from_q(q, nu, n_bins)
            W = update_demixing(W, data, model, pi, ridge, R_inv=R_inv)
            Y = demix(W, data)
            q = quadratic_forms(Y, R_inv)
            record(t, "demix", _cost_from_parts(W, q, nu, logdet_R))
        model = source_sweep(model, Y, nu, ridge)
        R = effective_covariance(model, ridge)
        R_inv, logdet_R = psd_inv(R, ridge=0.0), logdet(R)
        q = quadratic_forms(Y, R_inv)
        record(t, "source", _cost_from_parts(W, q, nu, logdet_R))
        if callback is not None:
            callback(t, W, model)

    Y = projection_back(demix(W, data), W, reference)
    out = spec.replace(Y)
    waveforms = istft(out) if None not in (spec.window_length, spec.hop, spec.sample_rate, spec.n_samples) else None
    return SeparationResult(out, waveforms, W, model, trace)
