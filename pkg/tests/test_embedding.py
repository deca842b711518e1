import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdyn import autodiff as ad
from latentdyn.embedding import (DelayConfig, MaskState, decode, delay_matrix, delay_vector,
                                 encode, fnn_fractions, loss_exp, loss_rec, mask_from_gamma,
                                 nearest_neighbor_distances, update_mask)
from latentdyn.exceptions import SamplingError, UsageError
from latentdyn.nn import NetworkSpec, init_network


# ---------------------------------------------------------------------------
# delay vectors

def test_delay_vector_linear():
    v = delay_vector(lambda t: t, 1.0, DelayConfig(3, 0.1))
    np.testing.assert_allclose(v, [1.0, 0.9, 0.8], rtol=0, atol=1e-15)


def test_delay_vector_constant():
    v = delay_vector(lambda t: np.full_like(t, 2.5), 3.0, DelayConfig(6, 0.1))
    np.testing.assert_array_equal(v, 2.5)


def test_delay_vector_sinusoid():
    v = delay_vector(lambda t: np.sin(2 * np.pi * t), 0.25, DelayConfig(2, 0.25))
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-15)


def test_delay_vector_batch_shape():
    v = delay_vector(lambda t: t, np.array([1.0, 2.0]), DelayConfig(4, 0.1))
    assert v.shape == (2, 4)


def test_delay_vector_domain_violation():
    with pytest.raises(SamplingError):
        delay_vector(lambda t: t, 0.3, DelayConfig(6, 0.1), domain=(0.0, 1.0))


def test_delay_config_validation():
    with pytest.raises(UsageError):
        DelayConfig(1, 0.1)
    with pytest.raises(UsageError):
        DelayConfig(3, 0.0)
    assert DelayConfig(6, 0.1).span == pytest.approx(0.5)


def test_delay_matrix_rows():
    D = delay_matrix(np.arange(10.0), 2, 3)
    np.testing.assert_array_equal(D[0], [4.0, 2.0, 0.0])
    np.testing.assert_array_equal(D[-1], [9.0, 7.0, 5.0])
    with pytest.raises(UsageError):
        delay_matrix(np.arange(3.0), 2, 3)


# ---------------------------------------------------------------------------
# false nearest neighbours

def brute_force_R(batch):
    """O(M^2 m) loop over pairs accumulating the same scalar operations in the same order."""
    M, m = batch.shape
    rows = [[float(x) for x in r] for r in batch]
    R = [[math.inf] * M for _ in range(m)]
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            g = si = sj = 0.0
            for k in range(m):
                g = g + rows[i][k] * rows[j][k]
                si = si + rows[i][k] * rows[i][k]
                sj = sj + rows[j][k] * rows[j][k]
                dist = math.sqrt(max((si + sj) - 2.0 * g, 0.0))
                R[k][i] = min(R[k][i], dist)
    return [np.array(r) for r in R]


def brute_force_gamma(batch, r_tol=10.0, a_tol=2.0):
    R = brute_force_R(batch)
    first = batch[:, 0]
    r_a = max(math.sqrt(float(np.mean((first - first.mean()) ** 2))), 1e-12)
    M, m = batch.shape
    gamma = [1.0]
    for d in range(1, m):
        false = 0
        for i in range(M):
            rd, rp = R[d][i], R[d - 1][i]
            growth = math.sqrt(max(rd * rd - rp * rp, 0.0) / max(rp, 1e-12) ** 2)
            false += (growth > r_tol) or (rd / r_a > a_tol)
        gamma.append(false / M)
    return np.array(gamma)


def test_matrix_distances_equal_brute_force_exactly():
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(40, 5))
    for got, want in zip(nearest_neighbor_distances(batch), brute_force_R(batch)):
        np.testing.assert_array_equal(got, want)
    np.testing.assert_array_equal(fnn_fractions(batch), brute_force_gamma(batch))


def test_first_fraction_is_one():
    rng = np.random.default_rng(1)
    assert fnn_fractions(rng.normal(size=(30, 4)))[0] == 1.0


def test_line_in_delay_space_has_no_false_neighbours():
    x = 0.7 * np.arange(200) * 0.05
    batch = delay_matrix(x, 2, 6)
    gamma = fnn_fractions(batch)
    np.testing.assert_array_equal(gamma, [1, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(gamma, brute_force_gamma(batch))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fnn_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    batch = rng.normal(size=(25, 4))
    perm = rng.permutation(25)
    np.testing.assert_array_equal(fnn_fractions(batch), fnn_fractions(batch[perm]))


def test_fnn_duplicate_rows_guarded():
    batch = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [1.0, 1.0, 1.0]])
    gamma = fnn_fractions(batch)
    assert np.all(np.isfinite(gamma))


def test_fnn_literal_ratio_never_fires():
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(50, 4)) * 0.01
    gamma = fnn_fractions(batch, a_tol=1e9, ratio_test="literal")
    np.testing.assert_array_equal(gamma[1:], 0.0)


def test_fnn_preconditions():
    with pytest.raises(UsageError):
        fnn_fractions(np.zeros((1, 3)))
    with pytest.raises(UsageError):
        fnn_fractions(np.zeros(5))
    with pytest.raises(UsageError):
        fnn_fractions(np.zeros((4, 3)), ratio_test="other")


# ---------------------------------------------------------------------------
# mask

def test_update_mask_fixed_point():
    s = MaskState.from_gamma([1, 0.5, 0.2, 0, 0, 0])
    out = update_mask(s, s.gamma)
    np.testing.assert_array_equal(out.gamma, s.gamma)
    np.testing.assert_array_equal(out.w, s.w)


def test_mask_example_two_dims():
    w, d = mask_from_gamma([1, .4, .005, .002, 0, 0], 0.01)
    np.testing.assert_array_equal(w, [1, 1, 0, 0, 0, 0])
    assert d == 2


def test_moving_average_example():
    s = MaskState(gamma=np.array([1.0, 0, 0, 0, 0, 0]), w=np.array([1.0, 0, 0, 0, 0, 0]), d=1)
    out = update_mask(s, np.ones(6))
    np.testing.assert_allclose(out.gamma, [1, .1, .1, .1, .1, .1], rtol=1e-15)
    np.testing.assert_array_equal(out.w, 1.0)
    assert out.d == 6


def test_non_contiguous_mask_becomes_prefix():
    w, d = mask_from_gamma([1, 0, 0.5, 0, 0, 0])
    np.testing.assert_array_equal(w, [1, 1, 1, 0, 0, 0])
    assert d == 3


def test_alpha_zero_keeps_mask():
    s = MaskState.from_gamma([1, 0.3, 0.02, 0, 0, 0], alpha=0.0)
    out = update_mask(s, np.ones(6))
    np.testing.assert_array_equal(out.gamma, s.gamma)
    assert out.d == s.d


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.floats(0, 0.5))
def test_mask_is_contiguous_prefix(gamma, eps):
    w, d = mask_from_gamma(gamma, eps)
    assert d >= 1
    assert d == int(w.sum())
    np.testing.assert_array_equal(w, np.r_[np.ones(d), np.zeros(len(gamma) - d)])


def test_mask_state_round_trip():
    s = MaskState.from_gamma([1, 0.3, 0.02, 0, 0, 0])
    assert s.gamma[0] == 1.0
    t = MaskState.from_dict(s.to_dict())
    np.testing.assert_array_equal(t.gamma, s.gamma)
    assert (t.d, t.epsilon, t.alpha) == (s.d, s.epsilon, s.alpha)


def test_update_mask_shape_checked():
    with pytest.raises(UsageError):
        update_mask(MaskState.initial(6), np.ones(5))


# ---------------------------------------------------------------------------
# autoencoder

def _net(seed=0):
    return init_network(NetworkSpec(6, 6, 5, 16, "tanh", 0.1), np.random.default_rng(seed))


def test_encode_single_active_coordinate():
    x = np.random.default_rng(3).normal(size=(8, 6))
    w = np.array([1.0, 0, 0, 0, 0, 0])
    u = np.asarray(encode(x, _net(), w))
    assert np.all(u[:, 1:] == 0) and np.all(u[:, 0] != 0)


def test_encode_decode_deterministic_and_bounded():
    x = np.random.default_rng(4).normal(size=(8, 6)) * 3
    w = np.ones(6)
    for f, p in ((lambda a, q: encode(a, q, w), _net(1)), (decode, _net(2))):
        a, b = np.asarray(f(x, p)), np.asarray(f(x, p))
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a) < 1)


def test_corruption_only_in_train_mode():
    x = np.random.default_rng(5).normal(size=(8, 6))
    w, p = np.ones(6), _net()
    a = np.asarray(encode(x, p, w, corruption=0.5))
    np.testing.assert_array_equal(a, np.asarray(encode(x, p, w)))
    keep = np.ones((8, 16))
    rng = np.random.default_rng(0)
    b = np.asarray(encode(x, p, w, "train", rng, dropout_mask=keep))
    c = np.asarray(encode(x, p, w, "train", rng, corruption=0.5, dropout_mask=keep))
    assert not np.array_equal(b, c)


# ---------------------------------------------------------------------------
# losses

def test_loss_rec_zero():
    x = np.random.default_rng(6).normal(size=(5, 3))
    assert float(loss_rec(x, x, 2, u=x)) == 0.0


def test_loss_rec_quadratic():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    s2 = np.array([0.5, 2.0, 1.0])
    l1 = float(loss_rec(b + (a - b), b, 2, sigma2=s2))
    l2 = float(loss_rec(b + 2 * (a - b), b, 2, sigma2=s2))
    assert l2 == pytest.approx(4 * l1, rel=1e-14)


def test_loss_rec_formula_example():
    assert float(loss_rec(np.array([[0.5]]), np.array([[0.0]]), 1, sigma2=np.array([1.0]))) == 0.25


def test_loss_rec_variance_floor():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        v = float(loss_rec(np.ones((2, 2)), np.zeros((2, 2)), 1, sigma2=np.zeros(2)))
    assert np.isfinite(v)
    assert any(issubclass(c.category, RuntimeWarning) for c in caught)


def test_loss_rec_shape_mismatch():
    with pytest.raises(UsageError):
        loss_rec(np.zeros((2, 3)), np.zeros((2, 2)), 1, sigma2=np.ones(3))


def test_loss_exp_isotropic_uncorrelated_is_zero():
    u = np.array([[1.0, 1.0, 9.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 3.0], [-1.0, -1.0, 5.0]])
    assert float(loss_exp(u, 2)) == pytest.approx(0.0, abs=1e-12)


def test_loss_exp_correlated_pair():
    rng = np.random.default_rng(8)
    x = rng.normal(size=50)
    u = np.stack([x, x], 1)
    var = np.mean((x - x.mean()) ** 2)
    assert float(loss_exp(u, 2)) == pytest.approx(var ** 2, rel=1e-12)


def test_loss_exp_equal_variance_correlated():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 200))
    a = (a - a.mean()) / a.std()
    b = (b - b.mean()) / b.std()
    y = (a + b) / np.sqrt(2.0)
    y = (y - y.mean()) / y.std()
    u = np.stack([a, y], 1)
    total = float(loss_exp(u, 2))
    K12 = np.mean(a * y)
    assert total == pytest.approx(K12 ** 2, rel=1e-9)
    assert total > 0


def test_loss_exp_single_dim_has_no_covariance_term():
    u = np.random.default_rng(10).normal(size=(10, 3))
    assert float(loss_exp(u, 1)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_loss_exp_first_term_zero_iff_decorrelated(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(64, d))
    x = x - x.mean(0)
    q, _ = np.linalg.qr(x)  # orthonormal columns: zero off-diagonal covariance
    scale = rng.uniform(0.5, 2.0, d)
    u = q * scale
    K = u.T @ u / u.shape[0]
    sig = np.sqrt(np.diag(K))
    second = np.mean((sig - sig.mean()) ** 2)
    assert float(loss_exp(u, d)) == pytest.approx(second, abs=1e-12)
    mixed = u.copy()
    mixed[:, 1] += 0.5 * u[:, 0]
    K = mixed.T @ mixed / 64
    sig = np.sqrt(np.diag(K[:d, :d]))
    assert float(loss_exp(mixed, d)) > np.mean((sig - sig.mean()) ** 2) + 1e-12


def test_loss_exp_gradient_flows():
    x = ad.Node(np.random.default_rng(11).normal(size=(6, 3)))
    (g,) = ad.reverse_grad(loss_exp(x, 3), [x])
    assert g.shape == (6, 3) and np.all(np.isfinite(g))


def test_loss_exp_needs_batch():
    with pytest.raises(UsageError):
        loss_exp(np.zeros((1, 3)), 2)
