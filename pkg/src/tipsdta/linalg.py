"""Hermitian positive semidefinite algebra on block-diagonal matrices.

Every matrix handled by the separation model is block diagonal over a
contiguous partition of the frequency bins.  :class:`HermitianBlockMatrix`
stores only the diagonal blocks, grouped by block size so that the work can
be batched with numpy.  Leading *batch* dimensions are allowed, which lets a
single object hold, e.g., all ``K x N`` basis matrices of a source model.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation, SingularMatrixError

__all__ = [
    "EIG_CLIP",
    "RIDGE",
    "BlockGroup",
    "FrequencyPartition",
    "HermitianBlockMatrix",
    "build_partition",
    "hermitian_eig",
    "hermitize",
    "logdet",
    "psd_inv",
    "psd_power",
    "psd_sqrt",
]

# Relative eigenvalue floor used by matrix functions (times the largest eigenvalue).
EIG_CLIP = 1e-12
# Relative ridge used by inversions (times trace / dim of each block).
RIDGE = 1e-10

Scheme = Union[str, int, Sequence[Sequence[int]]]


def hermitize(a: np.ndarray) -> np.ndarray:
    """Return ``(A + A^H) / 2`` over the last two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2).conj())


@dataclass(frozen=True)
class BlockGroup:
    """All blocks of one size: ``index[l, p]`` is the bin at position ``p`` of the ``l``-th block."""

    size: int
    block_ids: np.ndarray
    index: np.ndarray


@dataclass(frozen=True)
class FrequencyPartition:
    """Partition of the bins ``0, ..., n_bins - 1`` into contiguous ascending blocks.

    ``bounds`` holds the first bin of every block followed by ``n_bins``.
    """

    bounds: Tuple[int, ...]

    def __post_init__(self):
        bounds = tuple(int(b) for b in self.bounds)
        if len(bounds) < 2 or bounds[0] != 0:
            raise ContractViolation("partition must start at bin 0 and contain a block")
        if any(b1 <= b0 for b0, b1 in zip(bounds[:-1], bounds[1:])):
            raise ContractViolation("partition blocks must be nonempty and ascending")
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]], n_bins: Optional[int] = None):
        """Validate an explicit list of blocks (0-based bin indices)."""
        bounds = [0]
        expected = 0
        for l, block in enumerate(blocks):
            block = [int(i) for i in block]
            if len(block) == 0:
                raise ContractViolation(f"block {l} is empty")
            if block != list(range(expected, expected + len(block))):
                raise ContractViolation(
                    f"block {l} is not the contiguous run starting at bin {expected}: {block}"
                )
            expected += len(block)
            bounds.append(expected)
        if len(bounds) == 1:
            raise ContractViolation("partition has no blocks")
        if n_bins is not None and expected != n_bins:
            raise ContractViolation(f"blocks cover {expected} bins, expected {n_bins}")
        return cls(tuple(bounds))

    @property
    def n_bins(self) -> int:
        return self.bounds[-1]

    @property
    def n_blocks(self) -> int:
        return len(self.bounds) - 1

    @property
    def sizes(self) -> List[int]:
        return [b1 - b0 for b0, b1 in zip(self.bounds[:-1], self.bounds[1:])]

    @property
    def blocks(self) -> List[range]:
        return [range(b0, b1) for b0, b1 in zip(self.bounds[:-1], self.bounds[1:])]

    def locate(self, i: int) -> Tuple[int, int]:
        """Return ``(block, position)`` of bin ``i``."""
        if not 0 <= i < self.n_bins:
            raise IndexError(f"bin {i} out of range for {self.n_bins} bins")
        l = int(np.searchsorted(self.bounds, i, side="right")) - 1
        return l, i - self.bounds[l]

    @cached_property
    def groups(self) -> Tuple[BlockGroup, ...]:
        sizes = np.asarray(self.sizes)
        starts = np.asarray(self.bounds[:-1])
        groups = []
        for b in np.unique(sizes):
            ids = np.flatnonzero(sizes == b)
            index = starts[ids, None] + np.arange(b)[None, :]
            groups.append(BlockGroup(int(b), ids, index))
        return tuple(groups)

    @cached_property
    def _slots(self) -> Tuple[Tuple[int, int], ...]:
        # block id -> (group, row within group)
        slots = [None] * self.n_blocks
        for g, group in enumerate(self.groups):
            for row, l in enumerate(group.block_ids):
                slots[l] = (g, row)
        return tuple(slots)

    def slot(self, l: int) -> Tuple[int, int]:
        return self._slots[l]


def build_partition(n_bins: int, scheme: Scheme = "pairs") -> FrequencyPartition:
    """Build a frequency partition.

    Args:
        n_bins: Number of frequency bins ``I``.
        scheme: ``"pairs"`` for blocks of two bins where the last block
            absorbs a leftover bin, ``"single"`` for one block spanning all
            bins, an integer ``b`` for blocks of ``b`` bins with a shorter
            trailing block, or an explicit list of 0-based blocks.
    """
    if int(n_bins) < 1:
        raise ContractViolation(f"n_bins must be >= 1, got {n_bins}")
    n_bins = int(n_bins)
    if isinstance(scheme, str):
        if scheme == "single":
            return FrequencyPartition((0, n_bins))
        if scheme == "pairs":
            if n_bins < 2:
                return FrequencyPartition((0, n_bins))
            # an odd leftover bin never starts a block, so it joins the last pair
            return FrequencyPartition(tuple(range(0, n_bins - 1, 2)) + (n_bins,))
        raise ContractViolation(f"unknown partition scheme {scheme!r}")
    if isinstance(scheme, (int, np.integer)):
        if scheme < 1:
            raise ContractViolation(f"block size must be >= 1, got {scheme}")
        return FrequencyPartition(tuple(range(0, n_bins, int(scheme))) + (n_bins,))
    return FrequencyPartition.from_blocks(scheme, n_bins=n_bins)


class HermitianBlockMatrix:
    """Hermitian matrices stored as their diagonal blocks over a partition.

    ``groups[g]`` has shape ``(*batch_shape, n_blocks_g, b_g, b_g)`` and holds
    the blocks listed in ``partition.groups[g]``.
    """

    def __init__(self, partition: FrequencyPartition, groups: Sequence[np.ndarray], psd: bool = False):
        if len(groups) != len(partition.groups):
            raise ContractViolation("number of block groups does not match partition")
        groups = tuple(np.asarray(g) for g in groups)
        batch = None
        for g, spec in zip(groups, partition.groups):
            if g.shape[-3:] != (len(spec.block_ids), spec.size, spec.size):
                raise ContractViolation(
                    f"block group shape {g.shape[-3:]} does not match "
                    f"({len(spec.block_ids)}, {spec.size}, {spec.size})"
                )
            if batch is None:
                batch = g.shape[:-3]
            elif g.shape[:-3] != batch:
                raise ContractViolation("block groups disagree on batch shape")
        self.partition = partition
        self.groups = groups
        self.psd = psd

    # construction

    @classmethod
    def from_blocks(cls, partition: FrequencyPartition, blocks: Sequence[np.ndarray], psd: bool = False):
        if len(blocks) != partition.n_blocks:
            raise ContractViolation(f"expected {partition.n_blocks} blocks, got {len(blocks)}")
        groups = []
        for spec in partition.groups:
            groups.append(np.stack([np.asarray(blocks[l], dtype=complex) for l in spec.block_ids], axis=-3))
        return cls(partition, groups, psd=psd)

    @classmethod
    def from_dense(cls, partition: FrequencyPartition, a: np.ndarray, psd: bool = False):
        """Keep the diagonal blocks of dense ``(*batch, I, I)`` matrices."""
        a = np.asarray(a, dtype=complex)
        groups = []
        for spec in partition.groups:
            idx = spec.index
            groups.append(a[..., idx[:, :, None], idx[:, None, :]])
        return cls(partition, groups, psd=psd)

    @classmethod
    def identity(cls, partition: FrequencyPartition, batch_shape: Tuple[int, ...] = ()):
        groups = [
            np.broadcast_to(np.eye(s.size, dtype=complex), tuple(batch_shape) + (len(s.block_ids), s.size, s.size)).copy()
            for s in partition.groups
        ]
        return cls(partition, groups, psd=True)

    @classmethod
    def zeros(cls, partition: FrequencyPartition, batch_shape: Tuple[int, ...] = ()):
        groups = [
            np.zeros(tuple(batch_shape) + (len(s.block_ids), s.size, s.size), dtype=complex)
            for s in partition.groups
        ]
        return cls(partition, groups, psd=True)

    # views

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.groups[0].shape[:-3]

    def block(self, l: int) -> np.ndarray:
        g, row = self.partition.slot(l)
        return self.groups[g][..., row, :, :]

    @property
    def blocks(self) -> List[np.ndarray]:
        return [self.block(l) for l in range(self.partition.n_blocks)]

    def to_dense(self) -> np.ndarray:
        n = self.partition.n_bins
        out = np.zeros(self.batch_shape + (n, n), dtype=complex)
        for g, spec in zip(self.groups, self.partition.groups):
            idx = spec.index
            out[..., idx[:, :, None], idx[:, None, :]] = g
        return out

    def diagonal(self) -> np.ndarray:
        """Real diagonal entries, shape ``(*batch, I)``."""
        out = np.zeros(self.batch_shape + (self.partition.n_bins,))
        for g, spec in zip(self.groups, self.partition.groups):
            out[..., spec.index] = np.diagonal(g, axis1=-2, axis2=-1).real
        return out

    def __getitem__(self, key) -> "HermitianBlockMatrix":
        if not isinstance(key, tuple):
            key = (key,)
        groups = [g[key + (Ellipsis,)] for g in self.groups]
        if groups[0].ndim < 3:
            raise IndexError("indexing must address batch dimensions only")
        return HermitianBlockMatrix(self.partition, groups, psd=self.psd)

    def __repr__(self):
        return (
            f"HermitianBlockMatrix(n_bins={self.partition.n_bins}, "
            f"n_blocks={self.partition.n_blocks}, batch_shape={self.batch_shape})"
        )

    # algebra

    def map(self, fn: Callable[[np.ndarray], np.ndarray], psd: bool = False) -> "HermitianBlockMatrix":
        return HermitianBlockMatrix(self.partition, [fn(g) for g in self.groups], psd=psd)

    def _check_partition(self, other):
        if other.partition != self.partition:
            raise ContractViolation("operands live on different partitions")

    def _scale(self, c):
        c = np.asarray(c)
        if c.ndim:
            c = c[..., None, None, None]
        return c

    def __add__(self, other):
        if isinstance(other, HermitianBlockMatrix):
            self._check_partition(other)
            return HermitianBlockMatrix(
                self.partition, [a + b for a, b in zip(self.groups, other.groups)], psd=self.psd and other.psd
            )
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, HermitianBlockMatrix):
            self._check_partition(other)
            return HermitianBlockMatrix(self.partition, [a - b for a, b in zip(self.groups, other.groups)])
        return NotImplemented

    def __mul__(self, c):
        """Multiply by a real scalar or by an array broadcast over the batch shape."""
        c = self._scale(c)
        nonneg = bool(np.all(np.isreal(c)) and np.all(np.real(c) >= 0))
        return HermitianBlockMatrix(self.partition, [g * c for g in self.groups], psd=self.psd and nonneg)

    __rmul__ = __mul__

    def __truediv__(self, c):
        c = self._scale(c)
        return HermitianBlockMatrix(self.partition, [g / c for g in self.groups], psd=self.psd)

    def __matmul__(self, other):
        """Blockwise product; the result is in general not Hermitian."""
        if not isinstance(other, HermitianBlockMatrix):
            return NotImplemented
        self._check_partition(other)
        return HermitianBlockMatrix(self.partition, [a @ b for a, b in zip(self.groups, other.groups)])

    def hermitize(self) -> "HermitianBlockMatrix":
        return self.map(hermitize, psd=self.psd)

    def trace(self) -> np.ndarray:
        """Real trace of every matrix, shape ``batch_shape``."""
        total = 0.0
        for g in self.groups:
            total = total + np.trace(g, axis1=-2, axis2=-1).real.sum(axis=-1)
        return np.asarray(total)

    def block_traces(self) -> List[np.ndarray]:
        return [np.trace(g, axis1=-2, axis2=-1).real for g in self.groups]

    def is_hermitian(self, rtol: float = 1e-12) -> bool:
        for g in self.groups:
            diff = np.linalg.norm(g - np.swapaxes(g, -1, -2).conj(), axis=(-2, -1))
            scale = np.linalg.norm(g, axis=(-2, -1))
            if np.any(diff > rtol * np.maximum(scale, np.finfo(float).tiny)):
                return False
        return True

    def min_relative_eigenvalue(self) -> float:
        """Smallest ``lambda_min / lambda_max`` over all blocks (1 for zero blocks)."""
        worst = 1.0
        for g in self.groups:
            lam = np.linalg.eigvalsh(hermitize(g))
            top = lam[..., -1]
            ratio = np.where(top > 0, lam[..., 0] / np.where(top > 0, top, 1.0), 1.0)
            worst = min(worst, float(ratio.min()))
        return worst


def hermitian_eig(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a dense Hermitian matrix, eigenvalues ascending.

    Raises:
        ContractViolation: if ``a`` is not square or not Hermitian.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {a.shape}")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.conj().T) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise ContractViolation("matrix is not Hermitian")
    return np.linalg.eigh(hermitize(a))


def _clipped_eigh(g: np.ndarray, clip_floor: Optional[float]):
    lam, vec = np.linalg.eigh(hermitize(g))
    if clip_floor is None:
        floor = EIG_CLIP * np.maximum(lam[..., -1:], 0.0)
    else:
        floor = clip_floor
    return np.maximum(lam, floor), vec


def _recompose(lam: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return hermitize((vec * lam[..., None, :]) @ np.swapaxes(vec, -1, -2).conj())


def psd_power(a: HermitianBlockMatrix, power: float, clip_floor: Optional[float] = None) -> HermitianBlockMatrix:
    """Blockwise ``A ** power`` through the eigendecomposition.

    Eigenvalues are clipped below at ``clip_floor`` (default: ``EIG_CLIP``
    times the largest eigenvalue of each block).  For negative powers an
    all-zero block stays zero instead of blowing up.
    """

    def fn(g):
        lam, vec = _clipped_eigh(g, clip_floor)
        if power < 0:
            safe = np.where(lam > 0, lam, 1.0)
            lam = np.where(lam > 0, safe**power, 0.0)
        else:
            lam = lam**power
        return _recompose(lam, vec)

    return a.map(fn, psd=True)


def psd_sqrt(a: HermitianBlockMatrix, clip_floor: Optional[float] = None) -> HermitianBlockMatrix:
    """Blockwise principal square root with eigenvalue clipping."""
    return psd_power(a, 0.5, clip_floor)


def _locate_singular(b: np.ndarray, spec) -> Tuple[int, Tuple[int, ...]]:
    batch = b.shape[:-3]
    for pos in np.ndindex(*batch, b.shape[-3]):
        m = b[pos]
        try:
            inv = np.linalg.inv(m)
        except np.linalg.LinAlgError:
            return int(spec.block_ids[pos[-1]]), pos[:-1]
        if not np.all(np.isfinite(inv)):
            return int(spec.block_ids[pos[-1]]), pos[:-1]
    return int(spec.block_ids[0]), ()


def _small_inv(b: np.ndarray) -> np.ndarray:
    # closed form for 1x1 and Hermitian 2x2 blocks; batched LAPACK is slow on these
    if b.shape[-1] == 1:
        d = b[..., 0, 0].real
        if not np.all(d != 0):
            raise np.linalg.LinAlgError("singular block")
        return (1.0 / d)[..., None, None] + 0j * b
    a, c, off = b[..., 0, 0].real, b[..., 1, 1].real, b[..., 0, 1]
    det = a * c - (off.real**2 + off.imag**2)
    if not np.all(det != 0):
        raise np.linalg.LinAlgError("singular block")
    out = np.empty(b.shape, dtype=np.result_type(b.dtype, complex))
    out[..., 0, 0] = c / det
    out[..., 1, 1] = a / det
    out[..., 0, 1] = -off / det
    out[..., 1, 0] = -off.conj() / det
    return out


def psd_inv(a: HermitianBlockMatrix, ridge: Optional[float] = None) -> HermitianBlockMatrix:
    """Blockwise inverse of ``A + ridge * E``.

    With ``ridge=None`` every block gets its own ridge of
    ``RIDGE * trace(block) / dim``.

    Raises:
        SingularMatrixError: if a block is singular after the ridge; the
            exception's ``index`` is ``(block, batch_index)``.
    """
    groups = []
    for g, spec in zip(a.groups, a.partition.groups):
        eye = np.eye(spec.size)
        if ridge is None:
            r = RIDGE * np.trace(g, axis1=-2, axis2=-1).real / spec.size
            b = g + r[..., None, None] * eye
        else:
            b = g + ridge * eye
        try:
            inv = _small_inv(b) if spec.size <= 2 else np.linalg.inv(b)
            ok = np.all(np.isfinite(inv))
        except np.linalg.LinAlgError:
            ok = False
        if not ok:
            l, pos = _locate_singular(b, spec)
            raise SingularMatrixError(f"block {l} (batch index {pos}) is singular", index=(l, pos))
        groups.append(hermitize(inv))
    return HermitianBlockMatrix(a.partition, groups, psd=a.psd)


def logdet(a: HermitianBlockMatrix) -> np.ndarray:
    """``log det`` of positive definite block matrices, shape ``batch_shape``."""
    total = 0.0
    for g in a.groups:
        sign, val = np.linalg.slogdet(g)
        val = np.where(sign.real > 0, val, -np.inf)
        total = total + val.sum(axis=-1)
    return np.asarray(total)
