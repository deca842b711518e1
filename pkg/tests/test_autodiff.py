import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdyn import autodiff as ad
from latentdyn.data import lorenz_rhs
from latentdyn.exceptions import GraphError, UsageError


def grad_of(fn, *xs):
    nodes = [ad.Node(np.asarray(x, dtype=np.float64)) for x in xs]
    return ad.reverse_grad(fn(*nodes), nodes)


def central_diff(fn, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# examples

def test_square_grad():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == 6.0


def test_tanh_grad_at_zero():
    (g,) = grad_of(ad.tanh, 0.0)
    assert g == 1.0


def test_two_inputs():
    gx, gy = grad_of(lambda x, y: x * y + y, 2.0, 5.0)
    assert (gx, gy) == (5.0, 3.0)


def test_jvp_square_and_identity():
    out = ad.jvp(lambda v: ad.stack([v[0] * v[0], v[1]]), [3.0, 1.0], [1.0, 0.0])
    np.testing.assert_array_equal(out, [6.0, 0.0])


def test_jvp_zero_direction():
    out = ad.jvp(lambda v: ad.tanh(v) * ad.sin(v), [0.3, -1.2, 2.0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(out, np.zeros(3))


def test_jvp_lorenz_first_column():
    out = ad.jvp(lorenz_rhs, [1.0, 1.0, 1.0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(out, [-10.0, 27.0, 1.0], rtol=0, atol=1e-14)


def test_jvp_dimension_mismatch():
    with pytest.raises(UsageError):
        ad.jvp(lambda v: v, [1.0, 2.0], [1.0])


def test_non_scalar_output_rejected():
    x = ad.Node(np.ones(3))
    with pytest.raises(UsageError):
        ad.reverse_grad(x * 2.0, [x])


def test_cycle_detected():
    a = ad.Node(np.array(1.0))
    b = ad.add(a, 1.0)
    c = ad.mul(b, 2.0)
    a.parents = (c,)
    a.vjp = lambda g: (g,)
    with pytest.raises(GraphError):
        ad.reverse_grad(c, [a])


def test_graph_reusable_after_backward():
    x = ad.Node(np.array(1.5))
    y = ad.sin(x) * x
    g1 = ad.reverse_grad(y, [x])[0]
    g2 = ad.reverse_grad(y, [x])[0]
    assert g1 == g2


def test_ceil_stops_gradient():
    x = ad.Node(np.array([0.2, 1.7]))
    (g,) = ad.reverse_grad(ad.sum(ad.ceil(x) * x), [x])
    np.testing.assert_array_equal(g, [1.0, 2.0])  # ceil(x) treated as a constant
    (g0,) = ad.reverse_grad(ad.sum(ad.ceil(x)), [x])
    np.testing.assert_array_equal(g0, [0.0, 0.0])


def test_unreachable_input_zero():
    x, y = ad.Node(np.array(2.0)), ad.Node(np.array(3.0))
    gx, gy = ad.reverse_grad(x * x, [x, y])
    assert gx == 4.0 and gy == 0.0


def test_forward_over_reverse():
    # d/dw of (d/dt tanh(w t)) at t = 0.5, computed through a dual whose tangent is a node
    w = ad.Node(np.array(0.7))
    t = ad.Dual(np.array(0.5), np.array(1.0))
    y = ad.tanh(ad.mul(w, t))
    (g,) = ad.reverse_grad(y.tangent, [w])
    f = lambda wv: wv * (1 - np.tanh(wv * 0.5) ** 2)
    np.testing.assert_allclose(g, central_diff(f, 0.7), rtol=1e-8)


def test_multi_direction_tangent():
    x = np.array([[0.3, -0.4], [1.1, 0.2]])
    dirs = np.stack([np.eye(2)[[0, 0]], np.eye(2)[[1, 1]]])  # (2, batch, 2)
    y = ad.mul(ad.sin(ad.Dual(x, dirs, nlead=1)), ad.Dual(x, dirs, nlead=1))
    tan = np.asarray(y.tangent)
    for k in range(2):
        expected = (np.cos(x) * x + np.sin(x)) * dirs[k]
        np.testing.assert_allclose(tan[k], expected, rtol=1e-14)


# ---------------------------------------------------------------------------
# properties

UNARY = [ad.tanh, ad.sin, ad.cos, ad.exp, lambda v: ad.log(ad.add(ad.mul(v, v), 1.0)),
         lambda v: ad.sqrt(ad.add(ad.mul(v, v), 0.5)), lambda v: ad.power(v, 3),
         lambda v: ad.div(v, ad.add(ad.mul(v, v), 1.0))]
NP_UNARY = [np.tanh, np.sin, np.cos, np.exp, lambda v: np.log(v * v + 1.0),
            lambda v: np.sqrt(v * v + 0.5), lambda v: v ** 3, lambda v: v / (v * v + 1.0)]


def random_graph(rng, depth):
    """Random composite expression as paired (autodiff, numpy) closures over a 3-vector."""
    ops = []
    for _ in range(depth):
        kind = rng.integers(0, 4)
        if kind == 0:
            ops.append(("u", int(rng.integers(len(UNARY)))))
        elif kind == 1:
            ops.append(("mat", rng.normal(0, 0.6, (3, 3))))
        elif kind == 2:
            ops.append(("mix", rng.normal(0, 0.5, 3)))
        else:
            ops.append(("relu_shift", rng.normal(0, 0.5, 3)))

    def run(v, lib):
        for kind, p in ops:
            if kind == "u":
                v = UNARY[p](v) if lib is ad else NP_UNARY[p](v)
            elif kind == "mat":
                v = ad.matmul(ad.reshape(v, (1, 3)), p) if lib is ad else (v.reshape(1, 3) @ p)
                v = ad.reshape(v, (3,)) if lib is ad else v.reshape(3)
            elif kind == "mix":
                v = ad.add(ad.mul(v, p), ad.sum(v) * 0.3) if lib is ad else v * p + v.sum() * 0.3
            else:
                v = ad.add(v, ad.mul(ad.relu(ad.add(v, p)), 0.5)) if lib is ad else \
                    v + 0.5 * np.maximum(v + p, 0)
        return ad.sum(ad.mul(v, v)) if lib is ad else np.sum(v * v)
    return run


def test_random_graphs_against_central_differences():
    rng = np.random.default_rng(123)
    for _ in range(200):
        run = random_graph(rng, int(rng.integers(1, 9)))
        x = rng.uniform(-2, 2, 3)
        node = ad.Node(x.copy())
        (g,) = ad.reverse_grad(run(node, ad), [node])
        fd = central_diff(lambda v: run(v, np), x)
        scale = max(1.0, np.abs(fd).max())
        assert np.max(np.abs(g - fd)) / scale < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.floats(-3, 3), st.floats(-3, 3))
def test_jvp_linear_in_direction(p, v, w, a, b):
    out_v = ad.jvp(lorenz_rhs, p, v)
    out_w = ad.jvp(lorenz_rhs, p, w)
    out = ad.jvp(lorenz_rhs, p, a * np.array(v) + b * np.array(w))
    np.testing.assert_allclose(out, a * out_v + b * out_w, rtol=0, atol=1e-10)


def test_jvp_basis_sum_matches_fd_row_sums():
    rng = np.random.default_rng(5)

    def f(v):
        return ad.stack([ad.tanh(v[0] * v[1]), ad.sin(v[2]) * v[0], ad.exp(v[1] * 0.3)])

    def f_np(v):
        return np.array([np.tanh(v[0] * v[1]), np.sin(v[2]) * v[0], np.exp(v[1] * 0.3)])

    for _ in range(10):
        p = rng.uniform(-2, 2, 3)
        total = sum(ad.jvp(f, p, e) for e in np.eye(3))
        J = np.stack([(f_np(p + 1e-5 * e) - f_np(p - 1e-5 * e)) / 2e-5 for e in np.eye(3)], 1)
        np.testing.assert_allclose(total, J.sum(axis=1), rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("i", range(len(UNARY)))
def test_primitive_grads(i):
    x = np.linspace(-1.9, 1.9, 7)
    node = ad.Node(x.copy())
    (g,) = ad.reverse_grad(ad.sum(UNARY[i](node)), [node])
    fd = central_diff(lambda v: np.sum(NP_UNARY[i](v)), x)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_structural_ops_grads():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))

    def f(a, lib):
        if lib is ad:
            c = ad.concatenate([a, ad.mul(a, 2.0)], axis=0)
            s = ad.swapaxes(ad.reshape(c, (2, 3, 4)), 1, 2)
            m = ad.getitem(ad.matmul(ad.swapaxes(ad.getitem(s, 0), 0, 1), ad.getitem(s, 1)),
                           (slice(None), slice(0, 2)))
            return ad.add(ad.sum(ad.mul(m, m)), ad.mean(ad.matmul(a, B)))
        c = np.concatenate([a, 2 * a], 0)
        s = np.swapaxes(c.reshape(2, 3, 4), 1, 2)
        m = (s[0].T @ s[1])[:, :2]
        return np.sum(m * m) + np.mean(a @ B)

    node = ad.Node(A.copy())
    (g,) = ad.reverse_grad(f(node, ad), [node])
    np.testing.assert_allclose(g, central_diff(lambda v: f(v, np), A), rtol=1e-5, atol=1e-7)


def test_fancy_index_accumulates():
    x = ad.Node(np.array([1.0, 2.0, 3.0]))
    y = ad.sum(ad.getitem(x, np.array([0, 0, 2])))
    (g,) = ad.reverse_grad(y, [x])
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])
