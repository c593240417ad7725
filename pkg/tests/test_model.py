import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_model
from oracles import dense_bases, dense_R, naive_cost
from tipsdta.errors import ContractViolation, DegenerateBasisError
from tipsdta.linalg import HermitianBlockMatrix, build_partition
from tipsdta.model import (
    ModelConfig,
    SourceModel,
    assemble_R,
    effective_covariance,
    init_model,
    load_model,
    normalize_bases,
    save_model,
)
from tipsdta.pipeline import cost


def scalar_model(v, U, dim=2):
    p = build_partition(dim, "single")
    groups = [np.asarray(U, dtype=complex).reshape(1, 1, 1, dim, dim)]
    return SourceModel(np.full((1, 1, 1), float(v)), HermitianBlockMatrix(p, groups, psd=True))


def test_assemble_conic_sum():
    model = scalar_model(3.0, np.eye(2) / 2)
    np.testing.assert_allclose(assemble_R(model, 0, 0).to_dense(), np.diag([1.5, 1.5]))


def test_assemble_zero_activations():
    model = scalar_model(0.0, np.eye(2) / 2)
    R = assemble_R(model, 0, 0)
    assert not np.any(R.to_dense())
    # the default ridge is relative to the trace, so a zero block stays zero
    assert not np.any(effective_covariance(model).to_dense())


def test_assemble_matches_direct_sum(rng):
    model = random_model(rng, 5, 4, 2, 2)
    np.testing.assert_allclose(assemble_R(model).to_dense(), dense_R(model), atol=1e-12)


def test_assemble_requires_both_indices(rng):
    with pytest.raises(ContractViolation):
        assemble_R(random_model(rng, 4, 3, 2, 1), j=0)


def test_effective_covariance_ridge(rng):
    model = random_model(rng, 4, 3, 2, 2)
    R = assemble_R(model)
    Re = effective_covariance(model, 1e-3)
    for g, ge, spec in zip(R.groups, Re.groups, R.partition.groups):
        tr = np.trace(g, axis1=-2, axis2=-1).real
        np.testing.assert_allclose(ge - g, (1e-3 * tr / spec.size)[..., None, None] * np.eye(spec.size), atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_assembled_R_is_psd(seed, K):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 5, 3, 2, K)
    for g in assemble_R(model).groups:
        lam = np.linalg.eigvalsh(g)
        assert np.all(lam >= -1e-10 * lam[..., -1:])


# --- normalization ----------------------------------------------------------


def test_normalize_idempotent(rng):
    model = random_model(rng, 4, 3, 2, 2)
    again = normalize_bases(model)
    np.testing.assert_allclose(again.v, model.v, rtol=1e-14)
    for a, b in zip(again.U.groups, model.U.groups):
        np.testing.assert_allclose(a, b, rtol=1e-14)


def test_normalize_scale_cancellation(rng):
    model = random_model(rng, 4, 3, 2, 1)
    scaled = SourceModel(model.v, model.U * 5.0)
    out = normalize_bases(scaled)
    np.testing.assert_allclose(out.v, model.v * 5.0, rtol=1e-14)
    for a, b in zip(out.U.groups, model.U.groups):
        np.testing.assert_allclose(a, b, rtol=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_normalize_preserves_R(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 6, 3, 2, 2)
    model = SourceModel(model.v, model.U * rng.uniform(0.01, 100, size=(2, 2)))
    before = assemble_R(model).to_dense()
    after_model = normalize_bases(model)
    after = assemble_R(after_model).to_dense()
    assert np.linalg.norm(after - before) <= 1e-12 * np.linalg.norm(before)
    np.testing.assert_allclose(after_model.U.trace(), 1.0, atol=1e-9)


def test_normalize_preserves_cost(rng):
    model = random_model(rng, 4, 5, 2, 2)
    model = SourceModel(model.v, model.U * 3.7)
    Y = rng.standard_normal((4, 5, 2)) + 1j * rng.standard_normal((4, 5, 2))
    W = np.tile(np.eye(2, dtype=complex), (4, 1, 1))
    a = cost(W, model, Y, 1.0, ridge=0.0)
    b = cost(W, normalize_bases(model), Y, 1.0, ridge=0.0)
    assert abs(a - b) <= 1e-10 * abs(a)


def test_normalize_rejects_zero_trace(rng):
    model = random_model(rng, 4, 3, 2, 2)
    groups = [g.copy() for g in model.U.groups]
    for g in groups:
        g[1, 0] = 0.0
    bad = SourceModel(model.v, HermitianBlockMatrix(model.partition, groups))
    with pytest.raises(DegenerateBasisError) as err:
        normalize_bases(bad)
    assert err.value.index == (1, 0)


# --- initialization --------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_init_invariants(seed):
    model = init_model(ModelConfig(n_basis=2, seed=seed), 7, 4, 2)
    assert np.all(model.v >= 0)
    np.testing.assert_allclose(model.U.trace(), 1.0, atol=1e-9)
    U = dense_bases(model)
    # diagonal initialization
    off = U - np.einsum("knii,ij->knij", U, np.eye(7))
    assert not np.any(off)
    assert np.all(np.diagonal(U, axis1=-2, axis2=-1).real > 0)


def test_init_deterministic():
    a = init_model(ModelConfig(seed=5), 6, 3, 2)
    b = init_model(ModelConfig(seed=5), 6, 3, 2)
    np.testing.assert_array_equal(a.v, b.v)
    for x, y in zip(a.U.groups, b.U.groups):
        np.testing.assert_array_equal(x, y)


def test_init_small_case_traces():
    model = init_model(ModelConfig(n_basis=2, seed=3), 4, 3, 2)
    traces = model.U.trace()
    assert traces.shape == (2, 2)
    np.testing.assert_allclose(traces, 1.0, atol=1e-12)


# --- config and checkpoints -------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [{"nu": 0}, {"nu": -1}, {"nu": float("nan")}, {"n_basis": 0}, {"outer_iterations": -1}, {"vcd_sweeps": 0}, {"ridge": -1}],
)
def test_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        ModelConfig(**kwargs)


def test_config_inf_round_trip():
    c = ModelConfig(nu="inf")
    assert math.isinf(c.nu)
    d = c.to_dict()
    assert d["nu"] == "inf"
    assert ModelConfig.from_dict(d) == c


def test_checkpoint_round_trip(tmp_path, rng):
    model = random_model(rng, 7, 3, 2, 2)
    config = ModelConfig(nu=10.0, n_basis=2, seed=9)
    save_model(tmp_path / "m.npz", model, config)
    back, cfg = load_model(tmp_path / "m.npz")
    assert cfg == config
    np.testing.assert_array_equal(back.v, model.v)
    assert back.partition == model.partition
    for a, b in zip(back.U.groups, model.U.groups):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_without_config(tmp_path, rng):
    model = random_model(rng, 3, 2, 2, 1, scheme="single")
    save_model(tmp_path / "m.npz", model)
    _, cfg = load_model(tmp_path / "m.npz")
    assert cfg is None


def test_source_model_validation(rng):
    model = random_model(rng, 4, 3, 2, 2)
    with pytest.raises(ContractViolation):
        SourceModel(-model.v, model.U)
    with pytest.raises(ContractViolation):
        SourceModel(model.v[:1], model.U)


def test_naive_cost_agrees_with_dense_R(rng):
    # sanity check of the oracle itself on a diagonal model: R is diagonal, cost is a plain sum
    model = init_model(ModelConfig(n_basis=1, partition="single", seed=1), 3, 2, 1)
    Y = rng.standard_normal((3, 2, 1)) + 0j
    d = np.einsum("kjn,knii->jni", model.v, dense_bases(model)).real
    q = np.sum(np.abs(Y[:, :, 0].T) ** 2 / d[:, 0], axis=1)
    expected = np.sum(np.log(d)) + np.sum(q)
    W = np.ones((3, 1, 1), dtype=complex)
    assert naive_cost(W, model, Y, math.inf) == pytest.approx(expected, rel=1e-12)
