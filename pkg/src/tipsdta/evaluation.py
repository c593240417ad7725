"""Synthetic mixtures with known ground truth and SI-SDR based scoring."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .errors import ContractViolation
from .signal import SpectrogramTensor, WaveformBatch

__all__ = [
    "MixingSpec",
    "SDRScores",
    "mix",
    "mix_waveforms",
    "sdr_improvement",
    "si_sdr",
    "synthetic_sources",
    "write_metrics_csv",
]

SDR_CLAMP = 300.0
METRICS_HEADER = ["trial", "source", "sdr_in", "sdr_out", "improvement_db"]


@dataclass
class MixingSpec:
    """Mixing system.

    ``matrices`` is one ``(M, N)`` matrix shared by all bins for
    ``mode="instantaneous"`` and ``(I, M, N)`` for ``mode="convolutive"``.
    Convolutive specs built from impulse responses keep them in
    ``impulse_responses`` (``(M, N, taps)``) for time-domain mixing.
    """

    mode: str
    matrices: np.ndarray
    seed: Optional[int] = None
    cond_bound: float = np.inf
    impulse_responses: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("instantaneous", "convolutive"):
            raise ContractViolation(f"unknown mixing mode {self.mode!r}")
        A = np.asarray(self.matrices)
        if self.mode == "instantaneous" and A.ndim != 2:
            raise ContractViolation("instantaneous mixing needs one (M, N) matrix")
        if self.mode == "convolutive" and A.ndim != 3:
            raise ContractViolation("convolutive mixing needs (I, M, N) matrices")
        if A.shape[-1] != A.shape[-2]:
            raise ContractViolation(f"mixing must be determined (M = N), got {A.shape[-2:]}")
        cond = np.linalg.cond(A)
        # round-off keeps cond finite for exactly singular matrices
        if not np.all(cond < 1 / np.finfo(float).eps):
            raise ContractViolation("mixing matrix is singular")
        if np.any(cond > self.cond_bound):
            raise ContractViolation(f"mixing condition number {np.max(cond):.3g} exceeds {self.cond_bound}")
        self.matrices = A

    @property
    def n_sources(self) -> int:
        return self.matrices.shape[-1]

    def per_bin(self, n_bins: int) -> np.ndarray:
        if self.mode == "instantaneous":
            return np.broadcast_to(self.matrices, (n_bins,) + self.matrices.shape)
        if self.matrices.shape[0] != n_bins:
            raise ContractViolation(f"spec has {self.matrices.shape[0]} bins, signal has {n_bins}")
        return self.matrices

    @classmethod
    def identity(cls, n: int) -> "MixingSpec":
        return cls("instantaneous", np.eye(n))

    @classmethod
    def random(
        cls,
        n: int,
        seed: int,
        mode: str = "instantaneous",
        n_bins: Optional[int] = None,
        cond_bound: float = 5.0,
        max_tries: int = 1000,
    ) -> "MixingSpec":
        """Draw Gaussian mixing matrices, rejecting any with condition number above ``cond_bound``.

        Instantaneous matrices are real (so they also mix waveforms);
        convolutive ones are complex and drawn independently per bin.
        """
        rng = np.random.default_rng(seed)

        def draw(complex_):
            for _ in range(max_tries):
                A = rng.standard_normal((n, n))
                if complex_:
                    A = (A + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
                if np.linalg.cond(A) <= cond_bound:
                    return A
            raise ContractViolation(f"no matrix with condition <= {cond_bound} in {max_tries} draws")

        if mode == "instantaneous":
            return cls(mode, draw(False), seed=seed, cond_bound=cond_bound)
        if n_bins is None:
            raise ContractViolation("convolutive random mixing needs n_bins")
        return cls(mode, np.stack([draw(True) for _ in range(n_bins)]), seed=seed, cond_bound=cond_bound)

    @classmethod
    def from_impulse_responses(cls, h: np.ndarray, n_fft: int, cond_bound: float = np.inf) -> "MixingSpec":
        """Per-bin matrices ``A_i`` from room impulse responses ``h`` of shape ``(M, N, taps)``."""
        h = np.asarray(h, dtype=float)
        if h.shape[-1] > n_fft:
            raise ContractViolation("impulse responses longer than the FFT size")
        A = np.fft.rfft(h, n=n_fft, axis=-1).transpose(2, 0, 1)
        return cls("convolutive", A, cond_bound=cond_bound, impulse_responses=h)


def mix(S: Union[SpectrogramTensor, np.ndarray], spec: MixingSpec):
    """``x_ij = A_i s_ij`` in the time-frequency domain."""
    data = S.data if isinstance(S, SpectrogramTensor) else np.asarray(S)
    if data.shape[2] != spec.n_sources:
        raise ContractViolation(f"{data.shape[2]} sources but mixing expects {spec.n_sources}")
    X = np.einsum("imn,ijn->ijm", spec.per_bin(data.shape[0]), data)
    return S.replace(X) if isinstance(S, SpectrogramTensor) else X


def mix_waveforms(sources: WaveformBatch, spec: MixingSpec) -> WaveformBatch:
    """Time-domain mixture: a real matrix product or a sum of convolutions."""
    s = sources.samples
    if s.shape[0] != spec.n_sources:
        raise ContractViolation(f"{s.shape[0]} sources but mixing expects {spec.n_sources}")
    if spec.mode == "instantaneous":
        if np.iscomplexobj(spec.matrices) and np.any(spec.matrices.imag != 0):
            raise ContractViolation("complex instantaneous mixing cannot be applied to waveforms")
        return WaveformBatch(np.real(spec.matrices) @ s, sources.sample_rate)
    if spec.impulse_responses is None:
        raise ContractViolation("time-domain convolutive mixing needs impulse responses")
    h = spec.impulse_responses
    x = np.zeros((h.shape[0], s.shape[1]))
    for m in range(h.shape[0]):
        for n in range(h.shape[1]):
            x[m] += fftconvolve(s[n], h[m, n])[: s.shape[1]]
    return WaveformBatch(x, sources.sample_rate)


def _burst_envelope(rng, n_samples, sample_rate):
    env = np.zeros(n_samples)
    t = 0
    while t < n_samples:
        gap = int(rng.uniform(0.05, 0.6) * sample_rate)
        length = int(rng.uniform(0.15, 0.8) * sample_rate)
        start = t + gap
        stop = min(start + length, n_samples)
        if start < n_samples:
            ramp = np.hanning(stop - start) ** 0.5 if stop - start > 2 else 1.0
            env[start:stop] = rng.uniform(0.3, 1.0) * ramp
        t = stop
    return env


def synthetic_sources(n_sources: int, duration: float, sample_rate: int, seed: int) -> WaveformBatch:
    """Super-Gaussian test sources with distinct temporal envelopes.

    Even-indexed sources are band-limited Laplacian noise bursts; odd-indexed
    ones are harmonic tones with random amplitude modulation and gating.
    Every source is scaled to unit RMS.
    """
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration * sample_rate))
    t = np.arange(n_samples) / sample_rate
    out = np.zeros((n_sources, n_samples))
    for n in range(n_sources):
        if n % 2 == 0:
            noise = rng.laplace(size=n_samples)
            pole = rng.uniform(0.3, 0.9) * (1 if rng.random() < 0.5 else -1)
            noise = lfilter([1.0], [1.0, -pole], noise)
            sig = noise * _burst_envelope(rng, n_samples, sample_rate)
        else:
            f0 = rng.uniform(120.0, 400.0)
            tone = sum(
                rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
                for h in range(1, 9)
                if h * f0 < sample_rate / 2
            )
            rate = rng.uniform(1.0, 4.0)
            am = (0.5 + 0.5 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 3
            sig = tone * am * _burst_envelope(rng, n_samples, sample_rate)
        out[n] = sig / np.sqrt(np.mean(sig**2))
    return WaveformBatch(out, sample_rate)


def si_sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR in dB, clamped to +/-300 dB."""
    reference = np.asarray(reference, dtype=float).ravel()
    estimate = np.asarray(estimate, dtype=float).ravel()
    if reference.shape != estimate.shape:
        raise ContractViolation(f"length mismatch: {reference.size} vs {estimate.size}")
    energy = np.dot(reference, reference)
    if energy == 0:
        raise ContractViolation("reference signal is all zeros")
    target = np.dot(estimate, reference) / energy * reference
    err = estimate - target
    num, den = np.dot(target, target), np.dot(err, err)
    if den == 0:
        return SDR_CLAMP
    if num == 0:
        return -SDR_CLAMP
    return float(np.clip(10 * np.log10(num / den), -SDR_CLAMP, SDR_CLAMP))


@dataclass
class SDRScores:
    """Per-reference scores; ``permutation[n]`` is the estimate matched to reference ``n``."""

    permutation: tuple
    sdr_in: np.ndarray
    sdr_out: np.ndarray

    @property
    def improvement(self) -> np.ndarray:
        return self.sdr_out - self.sdr_in

    @property
    def mean_improvement(self) -> float:
        return float(np.mean(self.improvement))


def sdr_improvement(sources: np.ndarray, mixture: np.ndarray, estimates: np.ndarray) -> SDRScores:
    """SI-SDR improvement over the reference-channel mixture under the best permutation."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if sources.shape != estimates.shape:
        raise ContractViolation(f"{sources.shape[0]} references but {estimates.shape[0]} estimates")
    N = sources.shape[0]
    table = np.array([[si_sdr(sources[n], estimates[e]) for e in range(N)] for n in range(N)])
    best = max(itertools.permutations(range(N)), key=lambda p: table[np.arange(N), list(p)].sum())
    sdr_out = table[np.arange(N), list(best)]
    sdr_in = np.array([si_sdr(sources[n], mixture) for n in range(N)])
    return SDRScores(tuple(best), sdr_in, sdr_out)


def write_metrics_csv(path, scores: Iterable[SDRScores], trials: Optional[Sequence[int]] = None) -> None:
    """Rows ``trial,source,sdr_in,sdr_out,improvement_db``, one per reference source."""
    scores = list(scores)
    trials = range(len(scores)) if trials is None else trials
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for trial, s in zip(trials, scores):
            for n in range(len(s.sdr_in)):
                writer.writerow([trial, n, f"{s.sdr_in[n]:.6f}", f"{s.sdr_out[n]:.6f}", f"{s.improvement[n]:.6f}"])
