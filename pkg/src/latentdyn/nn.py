"""Residual tanh MLPs with batch normalization and dropout.

Layout of one network::

    x -> [input noise] -> entry affine -> block_1 ... block_B -> dropout -> output affine -> act

    block(x) = x + S2(S1(x)),   S(h) = tanh(affine(batchnorm(h)))

The forward pass is written against :mod:`latentdyn.autodiff`, so it accepts
numpy arrays (inference), graph nodes (training) or duals (time derivatives,
Jacobian diagonals).  It never mutates the parameters: batch statistics are
appended to ``batch_stats`` and folded into the running averages by
:func:`update_running_stats`.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import NumericError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    blocks: int
    width: int = 32
    output_activation: str = "tanh"
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.width <= 0 or self.blocks < 1:
            raise UsageError(f"invalid network shape: width={self.width}, blocks={self.blocks}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise UsageError("input_dim and output_dim must be positive")
        if self.output_activation not in ("tanh", "linear"):
            raise UsageError(f"unknown output activation {self.output_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise UsageError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def parameter_shapes(self):
        """Ordered mapping of learnable parameter path -> shape."""
        w = self.width
        shapes = {"entry/weight": (self.input_dim, w), "entry/bias": (w,)}
        for b in range(1, self.blocks + 1):
            for s in (1, 2):
                p = f"block{b}/sublayer{s}/"
                shapes[p + "bn_scale"] = (w,)
                shapes[p + "bn_shift"] = (w,)
                shapes[p + "weight"] = (w, w)
                shapes[p + "bias"] = (w,)
        shapes["output/weight"] = (w, self.output_dim)
        shapes["output/bias"] = (self.output_dim,)
        return shapes

    def n_parameters(self):
        return int(sum(np.prod(s) for s in self.parameter_shapes().values()))


@dataclass
class NetworkParams:
    """Learnable weights plus batch-norm running statistics of one network."""

    spec: NetworkSpec
    weights: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)
    mode: str = "train"

    def copy(self):
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.running.items()}, self.mode)

    def as_nodes(self):
        """Fresh graph leaves for every learnable parameter."""
        return {k: ad.Node(v) for k, v in self.weights.items()}

    def __eq__(self, other):
        if not isinstance(other, NetworkParams) or self.spec != other.spec:
            return False
        return (_dict_equal(self.weights, other.weights)
                and _dict_equal(self.running, other.running))


def _dict_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def init_network(spec, rng):
    """LeCun-normal weights (std = fan_in**-0.5), zero biases, identity batch norm."""
    weights = {}
    for name, shape in spec.parameter_shapes().items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "weight":
            weights[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif leaf == "bn_scale":
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    running = {}
    for b in range(1, spec.blocks + 1):
        for s in (1, 2):
            p = f"block{b}/sublayer{s}/"
            running[p + "running_mean"] = np.zeros(spec.width)
            running[p + "running_var"] = np.ones(spec.width)
    return NetworkParams(spec, weights, running)


def batch_norm(h, scale, shift, mode, running_mean=None, running_var=None, batch_stats=None,
               stats_rows=None):
    """Normalize features over the batch axis.

    In train mode the statistics come from the batch (biased variance), or from
    its first ``stats_rows`` rows only when given; they are applied to every row.  For
    dual inputs the tangent is scaled by the same ``1/std``: the derivative
    is taken per sample with the batch statistics held at their values.
    """
    if mode == "train":
        n = ad.value_of(h).shape[0]
        if n == 0:
            raise UsageError("batch norm on an empty batch")
        if n == 1:
            raise UsageError("batch norm in train mode needs at least 2 samples")
        p = h.primal if isinstance(h, ad.Dual) else h
        if stats_rows is not None:
            if not 2 <= stats_rows <= n:
                raise UsageError(f"stats_rows must lie in [2, {n}], got {stats_rows}")
            p = ad.getitem(p, slice(0, stats_rows))
            n = stats_rows
        mu = ad.mean(p, axis=0)
        centered = ad.sub(p, mu)
        var = ad.mean(ad.mul(centered, centered), axis=0)
        if batch_stats is not None:
            batch_stats.append((np.array(ad.value_of(mu)), np.array(ad.value_of(var)) * n / (n - 1)))
        inv_std = ad.div(1.0, ad.sqrt(ad.add(var, BN_EPS)))
        xhat = ad.mul(ad.sub(h, mu), inv_std)
    else:
        xhat = ad.mul(ad.sub(h, running_mean), 1.0 / np.sqrt(running_var + BN_EPS))
    return ad.add(ad.mul(xhat, scale), shift)


def residual_block(x, params, index, mode="eval", weights=None, batch_stats=None,
                   stats_rows=None):
    """One residual block ``x + S2(S1(x))`` (``index`` counts from 1)."""
    w = params.weights if weights is None else weights
    n = ad.value_of(x).shape[0]
    if n == 0:
        raise UsageError("residual block on an empty batch")
    h = x
    for s in (1, 2):
        p = f"block{index}/sublayer{s}/"
        h = batch_norm(h, w[p + "bn_scale"], w[p + "bn_shift"], mode,
                       params.running[p + "running_mean"], params.running[p + "running_var"],
                       batch_stats, stats_rows)
        h = ad.tanh(ad.add(ad.matmul(h, w[p + "weight"]), w[p + "bias"]))
    return ad.add(x, h)


def mlp_forward(params, x, mode="eval", rng=None, weights=None, batch_stats=None,
                input_noise=0.0, dropout_mask=None, stats_rows=None):
    """Run the network on a batch ``x`` of shape ``(batch, input_dim)``.

    ``weights`` overrides ``params.weights`` (pass graph nodes to differentiate).
    ``input_noise`` adds N(0, input_noise**2) to the input in train mode.
    ``dropout_mask`` replaces the random dropout draw (train mode only).
    ``stats_rows`` restricts train-mode batch statistics to the leading rows.
    """
    spec = params.spec
    xv = ad.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != spec.input_dim:
        raise UsageError(f"expected input of shape (batch, {spec.input_dim}), got {xv.shape}")
    bad = np.argwhere(~np.isfinite(xv))
    if bad.size:
        raise NumericError(f"non-finite network input at (row, col) = {tuple(int(i) for i in bad[0])}")
    w = params.weights if weights is None else weights
    train = mode == "train"
    if train and input_noise > 0:
        x = ad.add(x, rng.normal(0.0, input_noise, size=xv.shape))
    h = ad.add(ad.matmul(x, w["entry/weight"]), w["entry/bias"])
    for b in range(1, spec.blocks + 1):
        h = residual_block(h, params, b, mode, w, batch_stats, stats_rows)
    if train and (spec.dropout_rate > 0 or dropout_mask is not None):
        if dropout_mask is None:
            dropout_mask = dropout_draw(rng, (xv.shape[0], spec.width), spec.dropout_rate)
        h = ad.mul(h, dropout_mask)
    out = ad.add(ad.matmul(h, w["output/weight"]), w["output/bias"])
    if spec.output_activation == "tanh":
        out = ad.tanh(out)
    return out


def dropout_draw(rng, shape, rate):
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled by 1/(1-rate)."""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def update_running_stats(params, batch_stats, momentum=BN_MOMENTUM):
    """Fold statistics recorded by a train-mode forward into the running averages."""
    spec = params.spec
    names = [f"block{b}/sublayer{s}/" for b in range(1, spec.blocks + 1) for s in (1, 2)]
    if len(batch_stats) != len(names):
        raise UsageError(f"expected {len(names)} batch statistics, got {len(batch_stats)}")
    for p, (mu, var) in zip(names, batch_stats):
        rm, rv = p + "running_mean", p + "running_var"
        params.running[rm] = (1 - momentum) * params.running[rm] + momentum * mu
        params.running[rv] = (1 - momentum) * params.running[rv] + momentum * np.maximum(var, 0.0)
        params.running[rv] = np.maximum(params.running[rv], 1e-12)


# ---------------------------------------------------------------------------
# checkpoints

def _encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _decode_array(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params):
    """JSON-ready map; float repr round-trips bit-exactly."""
    return {
        "spec": asdict(params.spec),
        "weights": {k: _encode_array(v) for k, v in params.weights.items()},
        "running": {k: _encode_array(v) for k, v in params.running.items()},
    }


def params_from_dict(d):
    spec = NetworkSpec(**d["spec"])
    weights = {k: _decode_array(v) for k, v in d["weights"].items()}
    running = {k: _decode_array(v) for k, v in d["running"].items()}
    expected = spec.parameter_shapes()
    for k, shape in expected.items():
        if k not in weights or weights[k].shape != tuple(shape):
            raise UsageError(f"checkpoint parameter {k!r} missing or misshapen")
    return NetworkParams(spec, weights, running, mode="eval")


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_network(path, params):
    atomic_write_text(path, json.dumps(params_to_dict(params)))


def load_network(path):
    with open(path) as fh:
        return params_from_dict(json.load(fh))
