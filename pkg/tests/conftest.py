import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tipsdta.linalg import HermitianBlockMatrix, build_partition
from tipsdta.model import SourceModel

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_hpd(rng, n, batch=(), cond=10.0):
    """Random Hermitian positive definite matrices with eigenvalues in [1, cond]."""
    a = rng.standard_normal(batch + (n, n)) + 1j * rng.standard_normal(batch + (n, n))
    q, _ = np.linalg.qr(a)
    lam = rng.uniform(1.0, cond, size=batch + (n,))
    return (q * lam[..., None, :]) @ np.swapaxes(q, -1, -2).conj()


def random_model(rng, n_bins, n_frames, n_sources, n_basis, scheme="pairs"):
    """Source model with full (non-diagonal) PSD blocks and trace-normalized bases."""
    partition = build_partition(n_bins, scheme)
    groups = []
    for spec in partition.groups:
        groups.append(random_hpd(rng, spec.size, (n_basis, n_sources, len(spec.block_ids))))
    U = HermitianBlockMatrix(partition, groups, psd=True)
    U = U / U.trace()
    v = rng.uniform(0.1, 2.0, size=(n_basis, n_frames, n_sources))
    return SourceModel(v, HermitianBlockMatrix(partition, U.groups, psd=True))


def super_gaussian_mixture(rng, n_bins, n_frames, n=2):
    """Complex mixture ``x = A s`` with sources whose variance varies per frame."""
    scale = rng.gamma(0.5, 1.0, size=(1, n_frames, n)) + 1e-3
    s = np.sqrt(scale / 2) * (rng.standard_normal((n_bins, n_frames, n)) + 1j * rng.standard_normal((n_bins, n_frames, n)))
    A = rng.standard_normal((n, n)) + np.eye(n) * 2
    return s @ A.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
