"""Blind source separation with Student's t independent positive semidefinite tensor analysis."""

from .linalg import FrequencyPartition, HermitianBlockMatrix, build_partition, psd_inv, psd_sqrt
from .model import ModelConfig, SourceModel, assemble_R, init_model, normalize_bases
from .pipeline import CostTrace, SeparationResult, cost, projection_back, separate
from .signal import SpectrogramTensor, WaveformBatch, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "CostTrace",
    "FrequencyPartition",
    "HermitianBlockMatrix",
    "ModelConfig",
    "SeparationResult",
    "SourceModel",
    "SpectrogramTensor",
    "WaveformBatch",
    "assemble_R",
    "build_partition",
    "cost",
    "init_model",
    "istft",
    "normalize_bases",
    "projection_back",
    "psd_inv",
    "psd_sqrt",
    "read_wav",
    "separate",
    "stft",
    "write_wav",
]
