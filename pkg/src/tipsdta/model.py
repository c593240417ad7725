"""PSDTF source model: activations, block-diagonal bases and their covariances."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ContractViolation, DegenerateBasisError
from .linalg import RIDGE, FrequencyPartition, HermitianBlockMatrix, Scheme, build_partition

__all__ = [
    "ACTIVATION_FLOOR",
    "ModelConfig",
    "SourceModel",
    "assemble_R",
    "effective_covariance",
    "init_model",
    "load_model",
    "normalize_bases",
    "save_model",
]

ACTIVATION_FLOOR = 1e-12


def parse_nu(value) -> float:
    """Accept a positive number or ``"inf"`` (Gaussian limit)."""
    nu = float(value)
    if not nu > 0 or math.isnan(nu):
        raise ContractViolation(f"nu must be positive or inf, got {value!r}")
    return nu


@dataclass
class ModelConfig:
    """Hyperparameters of a separation run.

    Attributes:
        nu: Degree of freedom of the Student's t model; ``math.inf`` selects
            the Gaussian limit.
        n_basis: Number of PSDTF bases per source.
        partition: Block scheme for the bases, see
            :func:`tipsdta.linalg.build_partition`.
        outer_iterations: Number of alternations between the demixing and
            source-model updates.
        vcd_sweeps: Demixing sweeps per outer iteration.
        ridge: Relative ridge added to every covariance block before it is
            inverted (times trace / dim).
        seed: Seed for the random initialization of the source model.
    """

    nu: float = 1.0
    n_basis: int = 2
    partition: Scheme = "pairs"
    outer_iterations: int = 100
    vcd_sweeps: int = 10
    ridge: float = RIDGE
    seed: int = 0

    def __post_init__(self):
        self.nu = parse_nu(self.nu)
        if int(self.n_basis) < 1:
            raise ContractViolation(f"n_basis must be >= 1, got {self.n_basis}")
        if int(self.outer_iterations) < 0:
            raise ContractViolation(f"outer_iterations must be >= 0, got {self.outer_iterations}")
        if int(self.vcd_sweeps) < 1:
            raise ContractViolation(f"vcd_sweeps must be >= 1, got {self.vcd_sweeps}")
        if not self.ridge >= 0:
            raise ContractViolation(f"ridge must be >= 0, got {self.ridge}")
        self.n_basis = int(self.n_basis)
        self.outer_iterations = int(self.outer_iterations)
        self.vcd_sweeps = int(self.vcd_sweeps)
        self.seed = int(self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nu"] = "inf" if math.isinf(self.nu) else self.nu
        if not isinstance(self.partition, (str, int)):
            d["partition"] = [list(b) for b in self.partition]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SourceModel:
    """Activations ``v`` of shape ``(K, J, N)`` and bases ``U`` with batch shape ``(K, N)``."""

    v: np.ndarray
    U: HermitianBlockMatrix

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if self.v.ndim != 3:
            raise ContractViolation(f"activations must be (K, J, N), got shape {self.v.shape}")
        K, _, N = self.v.shape
        if self.U.batch_shape != (K, N):
            raise ContractViolation(f"bases have batch shape {self.U.batch_shape}, expected {(K, N)}")
        if np.any(self.v < 0):
            raise ContractViolation("activations must be nonnegative")

    @property
    def partition(self) -> FrequencyPartition:
        return self.U.partition

    @property
    def n_basis(self) -> int:
        return self.v.shape[0]

    @property
    def n_frames(self) -> int:
        return self.v.shape[1]

    @property
    def n_sources(self) -> int:
        return self.v.shape[2]

    @property
    def n_bins(self) -> int:
        return self.partition.n_bins

    def basis(self, k: int, n: int) -> HermitianBlockMatrix:
        return self.U[k, n]

    def copy(self) -> "SourceModel":
        return SourceModel(self.v.copy(), self.U.map(np.copy, psd=self.U.psd))


def assemble_R(model: SourceModel, j: Optional[int] = None, n: Optional[int] = None) -> HermitianBlockMatrix:
    """``R_jn = sum_k v_kjn U_kn``.

    With ``j`` and ``n`` omitted, all covariances are returned with batch
    shape ``(J, N)``.
    """
    groups = [np.einsum("kjn,knlab->jnlab", model.v, g) for g in model.U.groups]
    R = HermitianBlockMatrix(model.partition, groups, psd=True)
    if j is None and n is None:
        return R
    if j is None or n is None:
        raise ContractViolation("give both j and n, or neither")
    return R[j, n]


def effective_covariance(model: SourceModel, ridge: float = RIDGE) -> HermitianBlockMatrix:
    """All ``R_jn`` with ``ridge * trace / dim`` added to the diagonal of each block.

    This is the covariance the optimizers invert and the cost evaluates, so
    that every step majorizes the same function.
    """
    R = assemble_R(model)
    if ridge == 0:
        return R
    groups = []
    for g, spec in zip(R.groups, R.partition.groups):
        r = ridge * np.trace(g, axis1=-2, axis2=-1).real / spec.size
        groups.append(g + r[..., None, None] * np.eye(spec.size))
    return HermitianBlockMatrix(R.partition, groups, psd=True)


def normalize_bases(model: SourceModel) -> SourceModel:
    """Rescale so that ``trace(U_kn) = 1`` while every ``R_jn`` stays the same.

    Raises:
        DegenerateBasisError: if some ``U_kn`` has nonpositive trace.
    """
    tau = model.U.trace()  # (K, N)
    bad = np.argwhere(~(tau > 0))
    if bad.size:
        k, n = (int(x) for x in bad[0])
        raise DegenerateBasisError(f"basis (k={k}, n={n}) has nonpositive trace {tau[k, n]}", index=(k, n))
    U = model.U / tau
    v = model.v * tau[:, None, :]
    return SourceModel(v, HermitianBlockMatrix(U.partition, U.groups, psd=True))


def init_model(
    config: ModelConfig, n_bins: int, n_frames: int, n_sources: int, rng: Optional[np.random.Generator] = None
) -> SourceModel:
    """Random initial model: uniform activations, uniform diagonal bases, trace-normalized."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    partition = build_partition(n_bins, config.partition)
    K = config.n_basis
    low = np.finfo(float).tiny
    v = rng.uniform(low, 1.0, size=(K, n_frames, n_sources))
    diag = rng.uniform(low, 1.0, size=(K, n_sources, n_bins))
    groups = []
    for spec in partition.groups:
        d = diag[..., spec.index]  # (K, N, nb, b)
        groups.append(d[..., :, None] * np.eye(spec.size))
    U = HermitianBlockMatrix(partition, [g.astype(complex) for g in groups], psd=True)
    return normalize_bases(SourceModel(v, U))


def save_model(path, model: SourceModel, config: Optional[ModelConfig] = None) -> None:
    """Write a model checkpoint as an uncompressed ``.npz`` archive.

    Layout: ``v`` (K, J, N) float64; ``bounds`` int64 partition bounds;
    ``U_<g>`` complex128 of shape (K, N, n_blocks_g, b_g, b_g) for every
    block-size group ``g`` in ascending block size; ``config`` a JSON string
    (empty if no config was given).
    """
    arrays = {
        "v": model.v,
        "bounds": np.asarray(model.partition.bounds, dtype=np.int64),
        "config": np.asarray(json.dumps(config.to_dict()) if config is not None else ""),
    }
    for g, arr in enumerate(model.U.groups):
        arrays[f"U_{g}"] = arr
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path) -> Tuple[SourceModel, Optional[ModelConfig]]:
    with np.load(path, allow_pickle=False) as data:
        partition = FrequencyPartition(tuple(int(b) for b in data["bounds"]))
        groups = [data[f"U_{g}"] for g in range(len(partition.groups))]
        model = SourceModel(data["v"], HermitianBlockMatrix(partition, groups, psd=True))
        text = str(data["config"])
    config = ModelConfig.from_dict(json.loads(text)) if text else None
    return model, config
