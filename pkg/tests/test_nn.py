import numpy as np
import pytest

from latentdyn import autodiff as ad
from latentdyn.exceptions import NumericError, UsageError
from latentdyn.nn import (NetworkSpec, batch_norm, dropout_draw, init_network, load_network,
                          mlp_forward, params_from_dict, params_to_dict, residual_block,
                          save_network, update_running_stats)


def make(spec=None, seed=0):
    spec = spec or NetworkSpec(1, 1, 3, 32, "tanh", 0.1)
    return init_network(spec, np.random.default_rng(seed))


def test_spec_validation():
    with pytest.raises(UsageError):
        NetworkSpec(1, 1, 0)
    with pytest.raises(UsageError):
        NetworkSpec(1, 1, 1, width=0)
    with pytest.raises(UsageError):
        NetworkSpec(1, 1, 1, dropout_rate=1.0)
    with pytest.raises(UsageError):
        NetworkSpec(1, 1, 1, output_activation="relu")


def test_parameter_count_is_function_of_spec():
    spec = NetworkSpec(1, 1, 3, 32)
    # entry 1*32+32, per sublayer 2*32 + 32*32 + 32, six sublayers, output 32+1
    expected = 64 + 6 * (64 + 1024 + 32) + 33
    assert spec.n_parameters() == expected
    p = make(spec)
    assert sum(v.size for v in p.weights.values()) == expected


def test_same_seed_bitwise_identical():
    assert make(seed=3) == make(seed=3)


def test_different_seeds_differ():
    assert make(seed=3) != make(seed=4)


def test_init_batchnorm_identity_and_running_stats():
    p = make()
    for k, v in p.weights.items():
        if k.endswith("bn_scale"):
            np.testing.assert_array_equal(v, 1.0)
        if k.endswith("bn_shift") or k.endswith("bias"):
            np.testing.assert_array_equal(v, 0.0)
    for k, v in p.running.items():
        np.testing.assert_array_equal(v, 0.0 if k.endswith("mean") else 1.0)


def test_init_fan_in_scale():
    p = make(NetworkSpec(4, 4, 1, 400))
    w = p.weights["block1/sublayer1/weight"]
    assert abs(w.mean()) < 0.01
    assert abs(w.std() - 400 ** -0.5) < 0.005


def test_zero_sublayer_weights_give_identity():
    p = make()
    for k in p.weights:
        if k.startswith("block1/") and (k.endswith("/weight") or k.endswith("/bias")):
            p.weights[k] = np.zeros_like(p.weights[k])
    x = np.random.default_rng(1).normal(size=(10, 32))
    for mode in ("eval", "train"):
        np.testing.assert_array_equal(np.asarray(residual_block(x, p, 1, mode)), x)


def test_eval_batchnorm_is_identity_at_init():
    x = np.random.default_rng(2).normal(size=(5, 4))
    y = batch_norm(x, np.ones(4), np.zeros(4), "eval", np.zeros(4), np.ones(4))
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-15)


def test_train_batchnorm_normalizes():
    x = np.random.default_rng(3).normal(3.0, 5.0, size=(200, 6))
    y = np.asarray(batch_norm(x, np.ones(6), np.zeros(6), "train"))
    np.testing.assert_allclose(y.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(0), 1.0, atol=1e-5)


def test_batchnorm_stats_rows():
    x = np.random.default_rng(4).normal(size=(30, 3))
    y = np.asarray(batch_norm(x, np.ones(3), np.zeros(3), "train", stats_rows=10))
    mu, var = x[:10].mean(0), x[:10].var(0)
    np.testing.assert_allclose(y, (x - mu) / np.sqrt(var + 1e-5), rtol=1e-12)
    with pytest.raises(UsageError):
        batch_norm(x, np.ones(3), np.zeros(3), "train", stats_rows=1)


def test_batch_size_errors():
    p = make()
    with pytest.raises(UsageError):
        residual_block(np.zeros((0, 32)), p, 1, "eval")
    with pytest.raises(UsageError):
        residual_block(np.zeros((1, 32)), p, 1, "train")
    residual_block(np.zeros((1, 32)), p, 1, "eval")


def test_nan_input_located():
    x = np.zeros((4, 1))
    x[2, 0] = np.nan
    with pytest.raises(NumericError, match=r"\(2, 0\)"):
        mlp_forward(make(), x)


def test_input_shape_checked():
    with pytest.raises(UsageError):
        mlp_forward(make(), np.zeros((4, 2)))


def test_tanh_output_range_and_linear_unbounded():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 2, size=(500, 1))
    y = np.asarray(mlp_forward(make(), x))
    assert np.all(np.abs(y) < 1)
    x = rng.normal(0, 50, size=(500, 1))
    assert np.all(np.abs(np.asarray(mlp_forward(make(), x))) <= 1)  # float64 saturates to 1.0
    lin = make(NetworkSpec(1, 1, 1, 8, "linear", 0.0))
    lin.weights["output/weight"] *= 100.0
    assert np.abs(np.asarray(mlp_forward(lin, x))).max() > 1.0


def test_eval_deterministic_and_train_without_dropout():
    p = make(NetworkSpec(2, 3, 2, 16, "tanh", 0.0))
    x = np.random.default_rng(6).normal(size=(20, 2))
    a = np.asarray(mlp_forward(p, x))
    b = np.asarray(mlp_forward(p, x))
    np.testing.assert_array_equal(a, b)
    stats = []
    t1 = np.asarray(mlp_forward(p, x, "train", None, batch_stats=stats))
    t2 = np.asarray(mlp_forward(p, x, "train", None))
    np.testing.assert_array_equal(t1, t2)
    assert len(stats) == 4


def test_dropout_rate_statistics():
    rng = np.random.default_rng(7)
    mask = dropout_draw(rng, (10_000, 1), 0.1)
    frac = np.mean(mask == 0)
    assert abs(frac - 0.1) < 0.02
    np.testing.assert_allclose(mask[mask > 0], 1 / 0.9)


def test_dropout_only_in_train_mode():
    p = make(NetworkSpec(1, 1, 1, 16, "linear", 0.5))
    x = np.linspace(-1, 1, 10)[:, None]
    rng = np.random.default_rng(0)
    ones = np.ones((10, 16))
    a = np.asarray(mlp_forward(p, x, "train", rng, dropout_mask=ones))
    b = np.asarray(mlp_forward(p, x, "train", rng))
    assert not np.array_equal(a, b)


def test_running_stats_update():
    p = make(NetworkSpec(1, 1, 1, 4, "tanh", 0.0))
    stats = [(np.full(4, 2.0), np.full(4, 3.0)), (np.full(4, -1.0), np.full(4, 0.5))]
    update_running_stats(p, stats)
    np.testing.assert_allclose(p.running["block1/sublayer1/running_mean"], 0.2)
    np.testing.assert_allclose(p.running["block1/sublayer1/running_var"], 0.9 + 0.3)
    with pytest.raises(UsageError):
        update_running_stats(p, stats[:1])


def test_parameter_gradients_match_fd():
    spec = NetworkSpec(2, 2, 2, 6, "tanh", 0.0)
    p = make(spec, seed=11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(7, 2))
    target = rng.normal(size=(7, 2)) * 0.5

    def loss(weights, lib):
        out = mlp_forward(p, x, "train", None, weights=weights)
        r = ad.sub(out, target)
        return ad.sum(ad.mul(r, r))

    nodes = p.as_nodes()
    grads = dict(zip(nodes, ad.reverse_grad(loss(nodes, ad), list(nodes.values()))))
    for name in ("entry/weight", "block1/sublayer2/bn_scale", "block2/sublayer1/weight",
                 "output/bias"):
        base = p.weights[name]
        fd = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            wp = dict(p.weights)
            wm = dict(p.weights)
            bp, bm = base.copy(), base.copy()
            bp[i] += 1e-6
            bm[i] -= 1e-6
            wp[name], wm[name] = bp, bm
            fd[i] = (float(np.asarray(loss(wp, np))) - float(np.asarray(loss(wm, np)))) / 2e-6
        denom = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grads[name] - fd) / denom) < 1e-4, name


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = make(NetworkSpec(3, 9, 2, 8, "linear", 0.1), seed=9)
    p.running["block1/sublayer1/running_mean"] = np.random.default_rng(1).normal(size=8)
    path = tmp_path / "net.json"
    save_network(path, p)
    q = load_network(path)
    assert q == p
    assert params_from_dict(params_to_dict(p)) == p
