import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_model
from oracles import naive_pi, naive_S_T
from tipsdta.demix import compute_pi
from tipsdta.errors import DegenerateBasisError
from tipsdta.linalg import HermitianBlockMatrix, build_partition, psd_inv
from tipsdta.model import SourceModel, effective_covariance, normalize_bases
from tipsdta.pipeline import cost
from tipsdta.psdtf import basis_statistics, source_sweep, update_activations, update_bases


def scalar_model(v, u=1.0, n_frames=1):
    p = build_partition(1, "single")
    U = HermitianBlockMatrix(p, [np.full((1, 1, 1, 1, 1), u, dtype=complex)], psd=True)
    return SourceModel(np.full((1, n_frames, 1), float(v)), U)


def source_cost(model, Y, nu, ridge=1e-10):
    # the demixing term is constant here, so identity W is enough
    W = np.tile(np.eye(Y.shape[2], dtype=complex), (Y.shape[0], 1, 1))
    return cost(W, model, Y, nu, ridge=ridge)


def random_Y(rng, I, J, N=2):
    return rng.standard_normal((I, J, N)) + 1j * rng.standard_normal((I, J, N))


def symmetric_instance():
    # U = I/2, v = 1 and y_j = e_j, so that S = T = 4 I
    p = build_partition(2, "single")
    U = HermitianBlockMatrix(p, [np.eye(2, dtype=complex)[None, None, None] / 2], psd=True)
    model = SourceModel(np.ones((1, 2, 1)), U)
    Y = np.eye(2, dtype=complex)[:, :, None]
    return model, Y


# --- activations ------------------------------------------------------------


def test_activation_unit_ratio():
    model, Y = symmetric_instance()
    out = update_activations(model, Y, np.ones((2, 1)), ridge=0.0)
    np.testing.assert_allclose(out.v, model.v, rtol=1e-14)


@pytest.mark.parametrize("v, y", [(1.0, 2.0), (4.0, 0.5), (0.3, 3.0 - 1.0j)])
def test_activation_scalar_step(v, y):
    Y = np.full((1, 1, 1), y, dtype=complex)
    out = update_activations(scalar_model(v), Y, np.ones((1, 1)), ridge=0.0)
    assert out.v[0, 0, 0] == pytest.approx(math.sqrt(v) * abs(y), rel=1e-12)


def test_activation_scalar_fixed_point():
    y = 1.7 + 0.4j
    Y = np.full((1, 1, 1), y, dtype=complex)
    model = scalar_model(abs(y) ** 2)
    out = update_activations(model, Y, np.ones((1, 1)), ridge=0.0)
    assert abs(out.v[0, 0, 0] - abs(y) ** 2) <= 1e-10 * abs(y) ** 2
    # iterating from elsewhere converges to the same point
    model = scalar_model(10.0)
    for _ in range(60):
        model = update_activations(model, Y, np.ones((1, 1)), ridge=0.0)
    assert model.v[0, 0, 0] == pytest.approx(abs(y) ** 2, rel=1e-10)


def test_activation_zero_denominator_unchanged():
    model = scalar_model(2.0, u=0.0)
    Y = np.ones((1, 1, 1), dtype=complex)
    # a zero basis gives a zero trace in the denominator; invert with a unit R instead
    R_inv = HermitianBlockMatrix(model.partition, [np.ones((1, 1, 1, 1, 1), dtype=complex)], psd=True)
    out = update_activations(model, Y, np.ones((1, 1)), R_inv=R_inv)
    assert out.v[0, 0, 0] == 2.0


def test_activation_floor():
    Y = np.zeros((1, 1, 1), dtype=complex)
    one = np.ones((1, 1))
    # a zero numerator would send v to zero; the floor stops it
    assert update_activations(scalar_model(1.0), Y, one, ridge=0.0).v.item() == 1e-12
    # an activation already under the floor is not lifted back up
    assert update_activations(scalar_model(1e-14), Y, one, ridge=0.0).v.item() == 1e-14


@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 10.0, math.inf]), st.integers(1, 3))
def test_activation_update_descends(seed, nu, K):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 5, 6, 2, K)
    Y = random_Y(rng, 5, 6)
    before = source_cost(model, Y, nu)
    R_inv = psd_inv(effective_covariance(model), ridge=0.0)
    out = update_activations(model, Y, compute_pi(Y, model, nu, R_inv=R_inv), R_inv=R_inv)
    assert np.all(out.v > 0)
    assert source_cost(out, Y, nu) - before <= 1e-9 * abs(before)


# --- bases ------------------------------------------------------------------


@pytest.mark.parametrize("r", [1.0, 0.25, 3.5])
def test_basis_scalar_fixed_point(r):
    # v = 1, U = r and |y|^2 = r: S = T = 1/r and the update returns U = r
    model = scalar_model(1.0, u=r)
    Y = np.full((1, 1, 1), math.sqrt(r), dtype=complex)
    S, T = basis_statistics(model, Y, np.ones((1, 1)), ridge=0.0)
    assert S.groups[0].item() == pytest.approx(1 / r, rel=1e-12)
    assert T.groups[0].item() == pytest.approx(1 / r, rel=1e-12)
    out = update_bases(model, Y, np.ones((1, 1)), ridge=0.0)
    assert abs(out.U.groups[0].item() - r) <= 1e-10 * r


def test_basis_symmetric_case():
    model, Y = symmetric_instance()
    S, T = basis_statistics(model, Y, np.ones((2, 1)), ridge=0.0)
    np.testing.assert_allclose(S.to_dense(), T.to_dense(), atol=1e-14)
    out = update_bases(model, Y, np.ones((2, 1)), ridge=0.0)
    np.testing.assert_allclose(normalize_bases(out).U.to_dense(), model.U.to_dense(), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 10.0, math.inf]), st.sampled_from(["pairs", "single", 1]))
def test_basis_update_descends_and_stays_psd(seed, nu, scheme):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 6, 5, 2, 2, scheme=scheme)
    Y = random_Y(rng, 6, 5)
    before = source_cost(model, Y, nu)
    R_inv = psd_inv(effective_covariance(model), ridge=0.0)
    out = update_bases(model, Y, compute_pi(Y, model, nu, R_inv=R_inv), R_inv=R_inv)
    assert out.U.is_hermitian()
    for g in out.U.groups:
        lam = np.linalg.eigvalsh(g)
        assert np.all(lam >= -1e-10 * lam[..., -1:])
    assert source_cost(out, Y, nu) - before <= 1e-9 * abs(before)


@pytest.mark.parametrize("scheme", ["pairs", "single", 3])
def test_basis_statistics_match_dense_loops(rng, scheme):
    model = random_model(rng, 7, 4, 2, 2, scheme=scheme)
    Y = random_Y(rng, 7, 4)
    pi = naive_pi(Y, model, 3.0)
    S, T = basis_statistics(model, Y, pi, ridge=0.0)
    S_ref, T_ref = naive_S_T(model, Y, pi)
    for k in range(2):
        for n in range(2):
            # only the diagonal blocks are kept
            s = HermitianBlockMatrix.from_dense(model.partition, S_ref[k, n]).to_dense()
            t = HermitianBlockMatrix.from_dense(model.partition, T_ref[k, n]).to_dense()
            assert np.max(np.abs(S[k, n].to_dense() - s)) <= 1e-10 * np.max(np.abs(s))
            assert np.max(np.abs(T[k, n].to_dense() - t)) <= 1e-10 * np.max(np.abs(t))


def test_silent_source_is_degenerate(rng):
    model = random_model(rng, 4, 3, 2, 1)
    Y = random_Y(rng, 4, 3)
    Y[:, :, 1] = 0
    with pytest.raises(DegenerateBasisError) as err:
        source_sweep(model, Y, 1.0)
    assert err.value.index == (0, 1)


# --- full sweep -------------------------------------------------------------


@pytest.mark.parametrize("nu", [1.0, 10.0, math.inf])
def test_sweep_scalar_fixed_point(nu):
    y = 0.8 - 1.1j
    Y = np.full((1, 1, 1), y, dtype=complex)
    model = scalar_model(abs(y) ** 2)
    out = source_sweep(model, Y, nu, ridge=0.0)
    assert abs(out.v[0, 0, 0] - abs(y) ** 2) <= 1e-10 * abs(y) ** 2
    assert abs(out.U.groups[0].item() - 1.0) <= 1e-10


def test_gaussian_limit_equals_unit_weights(rng):
    model = random_model(rng, 6, 5, 2, 2)
    Y = random_Y(rng, 6, 5)
    out = source_sweep(model, Y, math.inf)
    ones = np.ones((5, 2))
    ref = update_activations(model, Y, ones)
    ref = normalize_bases(update_bases(ref, Y, ones))
    np.testing.assert_array_equal(out.v, ref.v)
    for a, b in zip(out.U.groups, ref.U.groups):
        np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 10.0, math.inf]), st.integers(1, 3))
def test_five_sweeps_monotone(seed, nu, K):
    rng = np.random.default_rng(seed)
    model = random_model(rng, 6, 8, 2, K)
    Y = random_Y(rng, 6, 8)
    costs = [source_cost(model, Y, nu)]
    for _ in range(5):
        model = source_sweep(model, Y, nu)
        costs.append(source_cost(model, Y, nu))
    for a, b in zip(costs, costs[1:]):
        assert b - a <= 1e-9 * abs(a)
    np.testing.assert_allclose(model.U.trace(), 1.0, atol=1e-9)


@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.1, 100.0),
    st.integers(1, 6),
)
def test_weighted_outer_product_is_harmonic_mean(seed, nu, I):
    rng = np.random.default_rng(seed)
    model = random_model(rng, I, 1, 1, 2, scheme="single")
    Y = random_Y(rng, I, 1, 1)
    pi = compute_pi(Y, model, nu, ridge=0.0)[0, 0]
    y = Y[:, 0, 0]
    R_tilde = I * np.einsum("k,kab->ab", model.v[:, 0, 0], model.U.groups[0][:, 0, 0])
    lam = nu / (nu + 2 * I)
    yy = np.outer(y, y.conj())
    rhs = R_tilde @ np.linalg.solve(lam * R_tilde + (1 - lam) * yy, yy)
    assert np.linalg.norm(pi * yy - rhs) <= 1e-8 * np.linalg.norm(pi * yy)
