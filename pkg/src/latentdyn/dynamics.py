"""Latent vector field ``F(u) = A(u) u`` with a masked state-dependent matrix A.

Also holds :class:`FitCurve`, the continuous parameterization u(t) of the
measurements, since the ODE residual differentiates through it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import rk4_integrate
from .embedding import delay_times, encode
from .exceptions import DivergenceError, SamplingError, UsageError
from .nn import mlp_forward


@dataclass
class FitCurve:
    """u(t) = N_u((t - center) / half_width) on the domain [t_lo, t_hi]."""

    params: object
    t_lo: float
    t_hi: float

    @property
    def domain(self):
        return (self.t_lo, self.t_hi)

    @property
    def _center(self):
        return 0.5 * (self.t_lo + self.t_hi)

    @property
    def _half(self):
        return 0.5 * (self.t_hi - self.t_lo)

    def check_domain(self, times, tol=1e-9):
        times = np.asarray(times)
        if times.size and (times.min() < self.t_lo - tol or times.max() > self.t_hi + tol):
            raise SamplingError(f"times [{times.min():g}, {times.max():g}] outside "
                                f"fitted domain [{self.t_lo:g}, {self.t_hi:g}]")

    def forward(self, times, mode="eval", rng=None, derivative=False, **forward_kw):
        """Values at ``times`` (1-D); a Dual carrying du/dt when ``derivative``."""
        times = np.asarray(times, dtype=np.float64).ravel()
        x = ((times - self._center) / self._half)[:, None]
        if derivative:
            x = ad.Dual(x, np.full_like(x, 1.0 / self._half))
        out = mlp_forward(self.params, x, mode, rng, **forward_kw)
        return ad.reshape(out, (times.size,))

    def __call__(self, times, mode="eval"):
        return np.asarray(self.forward(times, mode))

    def derivative(self, times):
        """du/dt in eval mode, by forward-mode differentiation."""
        return np.asarray(ad.value_of(self.forward(times, "eval", derivative=True).tangent))


def dyn_matrix(u, params_f, w, mode="eval", rng=None, **forward_kw):
    """A(u) = (w w^T) * reshape(N_f(u), (m, m)) for a batch (B, m) or a single state (m,)."""
    single = ad.value_of(u).ndim == 1
    if single:
        u = ad.reshape(u, (1, -1))
    m = ad.value_of(u).shape[1]
    if params_f.spec.output_dim != m * m:
        raise UsageError(f"N_f must output m*m = {m * m} values, has {params_f.spec.output_dim}")
    raw = mlp_forward(params_f, u, mode, rng, **forward_kw)
    A = ad.mul(ad.reshape(raw, (-1, m, m)), np.outer(w, w))
    return ad.reshape(A, (m, m)) if single else A


def apply_matrix(A, u):
    """Batched ``A @ u`` for A (B, m, m) and u (B, m)."""
    B, m = ad.value_of(u).shape
    return ad.sum(ad.mul(A, ad.reshape(u, (B, 1, m))), axis=-1)


def vector_field(u, params_f, w, mode="eval", rng=None, **forward_kw):
    """F(u) = A(u) u; accepts (m,) or (B, m)."""
    single = ad.value_of(u).ndim == 1
    if single:
        u = ad.reshape(u, (1, -1))
    F = apply_matrix(dyn_matrix(u, params_f, w, mode, rng, **forward_kw), u)
    return ad.reshape(F, (-1,)) if single else F


def latent_state(times, curve, cfg, w, params_e=None, mode="eval", rng=None,
                 curve_kw=None, encoder_kw=None):
    """Masked state u(t) and its time derivative as a Dual of shape (M, m).

    Delay path (``params_e`` None): u = w * u_tilde(t).
    Encoder path: u = w * N_e(u_tilde(t)); the derivative follows the chain rule
    through the encoder.
    """
    times = np.asarray(times, dtype=np.float64).ravel()
    dt_ = delay_times(times, cfg)
    curve.check_domain(dt_)
    vals = curve.forward(dt_.ravel(), mode, rng, derivative=True, **(curve_kw or {}))
    u_tilde = ad.reshape(vals, dt_.shape)
    if params_e is None:
        return ad.mul(u_tilde, w)
    return encode(u_tilde, params_e, w, mode, rng, **(encoder_kw or {}))


def residual_from_state(u, params_f, w, mode="eval", rng=None, **forward_kw):
    """e = du/dt - A(u) u from a state Dual."""
    if not isinstance(u, ad.Dual) or u.tangent is None:
        raise UsageError("residual needs a state carrying its time derivative")
    F = vector_field(u.primal, params_f, w, mode, rng, **forward_kw)
    return ad.sub(u.tangent, F)


def ode_residual(t, curve, params_f, w, cfg, params_e=None):
    """Deviation e(t) = du/dt - A(u) u in eval mode, shape (len(t), m)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    lo = curve.t_lo + cfg.span
    if t.min() < lo - 1e-9 or t.max() > curve.t_hi + 1e-9:
        raise SamplingError(f"t outside [{lo:g}, {curve.t_hi:g}]")
    u = latent_state(t, curve, cfg, w, params_e)
    return np.asarray(ad.value_of(residual_from_state(u, params_f, w)))


def loss_ode(residuals, d):
    """(1 / (M d)) * sum of squared residuals."""
    M = ad.value_of(residuals).shape[0]
    if d < 1:
        raise UsageError("embedding dimension must be >= 1")
    return ad.mul(ad.sum(ad.mul(residuals, residuals)), 1.0 / (M * d))


def field_divergence(field, u, d=None):
    """Divergence of an arbitrary field (B, m) -> (B, m) at each state of a batch.

    One forward sweep with ``d`` tangent directions (the leading coordinates).
    """
    uv = np.asarray(u, dtype=np.float64)
    single = uv.ndim == 1
    if single:
        uv = uv[None, :]
    B, m = uv.shape
    d = m if d is None else d
    eye = np.zeros((d, B, m))
    for i in range(d):
        eye[i, :, i] = 1.0
    F = field(ad.Dual(uv, eye, nlead=1))
    total = ad.getitem(F.tangent, (0, slice(None), 0))
    for i in range(1, d):
        total = ad.add(total, ad.getitem(F.tangent, (i, slice(None), i)))
    if single:
        return float(ad.value_of(total)[0])
    return total if isinstance(total, ad.Node) else np.asarray(total)


def divergence(u, params_f, w, mode="eval", rng=None, d=None, **forward_kw):
    """Divergence of F(u) = A(u) u at each state of a batch (B, m).

    Masked coordinates contribute exactly zero, so only the ``d`` unmasked
    directions are swept.  Returns (B,) values, or a graph node when
    ``forward_kw['weights']`` holds nodes.
    """
    d = int(np.sum(w)) if d is None else d
    return field_divergence(lambda v: vector_field(v, params_f, w, mode, rng, **forward_kw),
                            u, d)


def loss_div(div, d):
    """(1 / (M d)) * sum relu(div)**2; only expansion is penalized."""
    M = ad.value_of(div).shape[0]
    r = ad.relu(div)
    return ad.mul(ad.sum(ad.mul(r, r)), 1.0 / (M * d))


def forecast(u0, params_f, w, dt, n_steps, rhs=None):
    """RK4 integration of du/dt = A(u) u (eval mode); returns (n_steps + 1, m) states.

    ``rhs`` replaces the learned field (e.g. a known vector field for checks).
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if not np.all(np.isfinite(u0)):
        raise DivergenceError("non-finite initial state", step=0)
    if rhs is None:
        def rhs(u):
            return np.asarray(vector_field(u, params_f, w))
    return rk4_integrate(rhs, u0, dt, n_steps)


def measure(states, mode="delay", params_d=None):
    """Map latent states to the (scaled) measurement: first coordinate, optionally decoded."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if mode == "delay":
        return states[:, 0].copy()
    if mode == "decoder":
        if params_d is None:
            raise UsageError("decoder measurement needs decoder parameters")
        return np.asarray(mlp_forward(params_d, states, "eval"))[:, 0]
    raise UsageError(f"unknown measurement mode {mode!r}")
