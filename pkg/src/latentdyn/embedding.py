"""Delay vectors, false-nearest-neighbour fractions, the binary mask and the autoencoder."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .exceptions import SamplingError, UsageError
from .nn import mlp_forward

SIGMA_FLOOR = 1e-8
R_FLOOR = 1e-12


@dataclass(frozen=True)
class DelayConfig:
    m: int = 6
    tau: float = 0.1

    def __post_init__(self):
        if self.m < 2:
            raise UsageError(f"m must be >= 2, got {self.m}")
        if not self.tau > 0:
            raise UsageError(f"tau must be positive, got {self.tau}")

    @property
    def span(self):
        """Time covered by one delay vector, (m-1)*tau."""
        return (self.m - 1) * self.tau

    def lags(self):
        return self.tau * np.arange(self.m)


def delay_times(t, cfg):
    """Sampling times ``t - k*tau`` (k = 0..m-1), shape ``t.shape + (m,)``."""
    return np.asarray(t, dtype=np.float64)[..., None] - cfg.lags()


def delay_vector(u_fn, t, cfg, domain=None):
    """``[u(t), u(t - tau), ..., u(t - (m-1) tau)]`` for scalar or 1-D ``t``.

    ``u_fn`` maps an array of times to an array of values.  ``domain`` (or
    ``u_fn.domain``) bounds the admissible sampling times.
    """
    domain = domain if domain is not None else getattr(u_fn, "domain", None)
    times = delay_times(t, cfg)
    if domain is not None:
        lo, hi = domain
        if np.any(times < lo - 1e-9) or np.any(times > hi + 1e-9):
            raise SamplingError(f"delay times [{times.min():g}, {times.max():g}] "
                                f"outside domain [{lo:g}, {hi:g}]")
    return np.asarray(u_fn(times.ravel()), dtype=np.float64).reshape(times.shape)


def delay_matrix(values, lag, m):
    """Rows ``[x[k], x[k-lag], ..., x[k-(m-1)lag]]`` from an evenly sampled series."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size - (m - 1) * lag
    if n < 1:
        raise UsageError("series too short for the requested delay embedding")
    start = (m - 1) * lag
    return np.stack([values[start - j * lag: start - j * lag + n] for j in range(m)], axis=1)


# ---------------------------------------------------------------------------
# false nearest neighbours

def _prefix_distances(batch):
    """Pairwise distances for every prefix dimension d = 1..m.

    Gram matrix and squared lengths are accumulated one coordinate at a time,
    so each entry is a fixed sequence of scalar float operations.
    """
    M, m = batch.shape
    gram = np.zeros((M, M))
    sq = np.zeros(M)
    out = []
    for k in range(m):
        col = batch[:, k]
        gram = gram + np.multiply.outer(col, col)
        sq = sq + col * col
        d2 = (sq[:, None] + sq[None, :]) - 2.0 * gram
        out.append(np.sqrt(np.maximum(d2, 0.0)))
    return out


def nearest_neighbor_distances(batch):
    """R[d-1][i] = distance from row i to its nearest other row using the first d columns."""
    R = []
    for D in _prefix_distances(batch):
        np.fill_diagonal(D, np.inf)
        R.append(D.min(axis=1))
    return R


def fnn_fractions(batch, r_tol=10.0, a_tol=2.0, ratio_test="kennel"):
    """Fraction of false nearest neighbours for each prefix dimension d = 1..m.

    A row counts as false at dimension d >= 2 when its neighbour distance grows
    sharply from d-1 to d (ratio test) or when it is large relative to the
    attractor size R_A (jump test).  ``ratio_test="kennel"`` measures the growth
    relative to the (d-1)-dimensional distance; ``"literal"`` relative to the
    d-dimensional one, which can never exceed 1.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise UsageError("fnn_fractions expects an (M, m) delay matrix")
    M, m = batch.shape
    if M < 2:
        raise UsageError(f"need at least 2 delay vectors, got {M}")
    if ratio_test not in ("kennel", "literal"):
        raise UsageError(f"unknown ratio test {ratio_test!r}")
    R = nearest_neighbor_distances(batch)
    first = batch[:, 0]
    r_a = np.sqrt(np.mean((first - first.mean()) ** 2))
    r_a = max(r_a, R_FLOOR)
    gamma = np.empty(m)
    gamma[0] = 1.0
    for d in range(1, m):
        rd, rp = R[d], R[d - 1]
        den = rp if ratio_test == "kennel" else rd
        den2 = np.maximum(den, R_FLOOR) ** 2
        growth = np.sqrt(np.maximum(rd * rd - rp * rp, 0.0) / den2)
        false = (growth > r_tol) | (rd / r_a > a_tol)
        gamma[d] = false.mean()
    return gamma


# ---------------------------------------------------------------------------
# mask

def mask_from_gamma(gamma, epsilon=0.01):
    """Binary mask ``ceil(relu(gamma - epsilon))`` forced into a prefix ``1^d 0^(m-d)``."""
    gamma = np.asarray(gamma, dtype=np.float64)
    raw = np.ceil(np.maximum(gamma - epsilon, 0.0))
    on = np.flatnonzero(raw > 0)
    d = int(on[-1]) + 1 if on.size else 1
    w = np.zeros_like(gamma)
    w[:d] = 1.0
    return w, d


@dataclass(frozen=True)
class MaskState:
    gamma: np.ndarray
    w: np.ndarray
    d: int
    epsilon: float = 0.01
    alpha: float = 0.1
    r_tol: float = 10.0
    a_tol: float = 2.0

    @classmethod
    def initial(cls, m, **kw):
        """All-ones start: gamma = w = [1, ..., 1]."""
        return cls(gamma=np.ones(m), w=np.ones(m), d=m, **kw)

    @classmethod
    def from_gamma(cls, gamma, **kw):
        gamma = np.array(gamma, dtype=np.float64)
        gamma[0] = 1.0
        w, d = mask_from_gamma(gamma, kw.get("epsilon", 0.01))
        return cls(gamma=gamma, w=w, d=d, **kw)

    @property
    def m(self):
        return self.gamma.size

    def to_dict(self):
        return {"gamma": self.gamma.tolist(), "w": self.w.tolist(), "d": self.d,
                "epsilon": self.epsilon, "alpha": self.alpha,
                "r_tol": self.r_tol, "a_tol": self.a_tol}

    @classmethod
    def from_dict(cls, d):
        return cls(gamma=np.array(d["gamma"]), w=np.array(d["w"]), d=int(d["d"]),
                   epsilon=d["epsilon"], alpha=d["alpha"], r_tol=d["r_tol"], a_tol=d["a_tol"])


def update_mask(state, gamma_hat):
    """Moving-average update of gamma, then recompute the mask."""
    gamma_hat = np.asarray(gamma_hat, dtype=np.float64)
    if gamma_hat.shape != state.gamma.shape:
        raise UsageError(f"gamma_hat shape {gamma_hat.shape} != {state.gamma.shape}")
    gamma = (1.0 - state.alpha) * state.gamma + state.alpha * gamma_hat
    gamma[0] = 1.0
    w, d = mask_from_gamma(gamma, state.epsilon)
    return replace(state, gamma=gamma, w=w, d=d)


# ---------------------------------------------------------------------------
# autoencoder

def encode(u_tilde, params_e, w, mode="eval", rng=None, corruption=0.0, **forward_kw):
    """``w * N_e(u_tilde)``; ``corruption`` is the input-noise std in train mode."""
    out = mlp_forward(params_e, u_tilde, mode, rng, input_noise=corruption, **forward_kw)
    return ad.mul(out, w)


def decode(u, params_d, mode="eval", rng=None, **forward_kw):
    return mlp_forward(params_d, u, mode, rng, **forward_kw)


def batch_variance(u):
    """Per-column population variance over the batch axis."""
    c = ad.sub(u, ad.mean(u, axis=0))
    return ad.mean(ad.mul(c, c), axis=0)


def loss_rec(u_hat, u_tilde, d, u=None, sigma2=None):
    """Reconstruction loss normalized by the embedded variance.

    ``d / (M m sum_{i<=d} var(u_i)) * sum (u_hat - u_tilde)**2``.  Give either the
    encoded batch ``u`` or its per-column variances ``sigma2``.
    """
    uh = ad.value_of(u_hat)
    if uh.shape != ad.value_of(u_tilde).shape:
        raise UsageError("u_hat and u_tilde shapes differ")
    M, m = uh.shape
    if sigma2 is None:
        if u is None:
            raise UsageError("loss_rec needs the encoded batch or its variances")
        sigma2 = batch_variance(u)
    total = ad.sum(ad.getitem(sigma2, slice(0, d)))
    if ad.value_of(total) < SIGMA_FLOOR:
        warnings.warn("embedded variance below floor in loss_rec; clamped", RuntimeWarning)
        total = SIGMA_FLOOR
    r = ad.sub(u_hat, u_tilde)
    return ad.mul(ad.div(float(d) / (M * m), total), ad.sum(ad.mul(r, r)))


def loss_exp(u, d):
    """Off-diagonal covariance penalty plus spread of the standard deviations (first d columns)."""
    uv = ad.value_of(u)
    M = uv.shape[0]
    if M < 2:
        raise UsageError("loss_exp needs a batch of at least 2")
    ud = ad.getitem(u, (slice(None), slice(0, d)))
    c = ad.sub(ud, ad.mean(ud, axis=0))
    K = ad.mul(ad.matmul(ad.swapaxes(c, 0, 1), c), 1.0 / M)
    if d > 1:
        iu = np.triu_indices(d, k=1)
        off = ad.getitem(K, iu)
        first = ad.mul(ad.sum(ad.mul(off, off)), 2.0 / (d * (d - 1)))
    else:
        first = 0.0
    var = ad.getitem(K, (np.arange(d), np.arange(d)))
    sig = ad.sqrt(ad.add(var, 1e-24))
    dev = ad.sub(sig, ad.mean(sig))
    second = ad.mul(ad.sum(ad.mul(dev, dev)), 1.0 / d)
    return ad.add(first, second)
