"""Multichannel waveforms, WAV files and the STFT front end."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.io import wavfile
from scipy.signal.windows import hamming

from .errors import ContractViolation, InputTooShortError, WavFormatError

__all__ = [
    "SpectrogramTensor",
    "WaveformBatch",
    "istft",
    "read_wav",
    "stft",
    "write_wav",
]


@dataclass
class WaveformBatch:
    """Real signals of shape ``(channels, length)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ContractViolation(f"samples must be (channels, length), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ContractViolation(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class SpectrogramTensor:
    """One-sided STFT of shape ``(n_bins, n_frames, channels)`` plus framing metadata.

    ``n_samples`` is the length of the analysed signal before padding; it is
    needed to trim the synthesis output.
    """

    data: np.ndarray
    window_length: Optional[int] = None
    hop: Optional[int] = None
    sample_rate: Optional[int] = None
    n_samples: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ContractViolation(f"data must be (bins, frames, channels), got shape {self.data.shape}")
        if self.window_length is not None and self.data.shape[0] != self.window_length // 2 + 1:
            raise ContractViolation(
                f"{self.data.shape[0]} bins inconsistent with window length {self.window_length}"
            )

    @property
    def n_bins(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def replace(self, data: np.ndarray) -> "SpectrogramTensor":
        """Same framing, new coefficients (the channel count may change)."""
        return SpectrogramTensor(data, self.window_length, self.hop, self.sample_rate, self.n_samples)


def analysis_window(window_length: int) -> np.ndarray:
    # periodic Hamming: constant overlap-add at 50 % overlap
    return hamming(window_length, sym=False)


def _frame_params(sample_rate, window_ms, hop_ms):
    if not window_ms > hop_ms > 0:
        raise ContractViolation(f"need window_ms > hop_ms > 0, got {window_ms}, {hop_ms}")
    window_length = int(round(window_ms * sample_rate / 1000))
    hop = int(round(hop_ms * sample_rate / 1000))
    if window_length % 2:
        raise ContractViolation(f"window of {window_ms} ms is {window_length} samples; must be even")
    if hop < 1:
        raise ContractViolation(f"hop of {hop_ms} ms is shorter than one sample")
    return window_length, hop


def stft(w: WaveformBatch, window_ms: float = 256.0, hop_ms: float = 128.0) -> SpectrogramTensor:
    """Hamming-windowed one-sided STFT.

    The signal is zero-padded by one full window on both sides (plus up to
    ``hop - 1`` extra trailing zeros so the last frame is complete), hence
    every sample is covered by the same number of frames as an interior one.
    """
    window_length, hop = _frame_params(w.sample_rate, window_ms, hop_ms)
    x = w.samples
    n_samples = x.shape[1]
    if n_samples < window_length:
        raise InputTooShortError(f"signal of {n_samples} samples is shorter than one window ({window_length})")
    padded_length = n_samples + 2 * window_length
    extra = (-(padded_length - window_length)) % hop
    padded = np.pad(x, ((0, 0), (window_length, window_length + extra)))
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_length, axis=-1)[:, ::hop, :]
    spec = np.fft.rfft(frames * analysis_window(window_length), axis=-1)  # (C, J, I)
    return SpectrogramTensor(
        np.ascontiguousarray(spec.transpose(2, 1, 0)),
        window_length=window_length,
        hop=hop,
        sample_rate=w.sample_rate,
        n_samples=n_samples,
    )


def istft(s: SpectrogramTensor) -> WaveformBatch:
    """Weighted overlap-add synthesis, inverse of :func:`stft` on its padding rule."""
    if None in (s.window_length, s.hop, s.sample_rate, s.n_samples):
        raise ContractViolation("spectrogram lacks framing metadata required for synthesis")
    window_length, hop = s.window_length, s.hop
    window = analysis_window(window_length)
    frames = np.fft.irfft(s.data.transpose(2, 1, 0), n=window_length, axis=-1) * window
    n_channels, n_frames, _ = frames.shape
    total = (n_frames - 1) * hop + window_length
    out = np.zeros((n_channels, total))
    norm = np.zeros(total)
    for j in range(n_frames):
        out[:, j * hop : j * hop + window_length] += frames[:, j]
        norm[j * hop : j * hop + window_length] += window**2
    out = out / np.where(norm > 1e-10, norm, 1.0)
    return WaveformBatch(out[:, window_length : window_length + s.n_samples], s.sample_rate)


def read_wav(path) -> WaveformBatch:
    """Read 16-bit PCM or 32-bit float WAV into float samples in [-1, 1].

    Raises:
        WavFormatError: on a malformed file or any other sample encoding.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            sample_rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError, IndexError, UnboundLocalError) as exc:
        # scipy raises UnboundLocalError when the fmt chunk is missing
        raise WavFormatError(f"{path}: malformed WAV file ({exc})") from None
    if data.dtype == np.int16:
        samples = data.astype(float) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(float)
    else:
        kind = {"i": "integer PCM", "u": "unsigned PCM", "f": "float"}.get(data.dtype.kind, data.dtype.kind)
        raise WavFormatError(f"{path}: unsupported encoding {8 * data.dtype.itemsize}-bit {kind}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    return WaveformBatch(np.ascontiguousarray(samples), sample_rate)


def write_wav(path, w: WaveformBatch, bit_depth: int = 32) -> None:
    """Write 32-bit float (``bit_depth=32``) or 16-bit PCM (``bit_depth=16``) WAV."""
    x = w.samples.T
    if bit_depth == 32:
        data = x.astype(np.float32)
    elif bit_depth == 16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"unsupported encoding {bit_depth}-bit")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, w.sample_rate, data)
