"""Joint optimization of the fit curves, the autoencoder and the latent vector field.

One *iteration* is one segment update; an epoch visits every segment once and
then refreshes the false-nearest-neighbour mask.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .data import (ScalingRecord, TimeSeries, add_noise, lorenz_series, split_and_segment)
from .dynamics import (FitCurve, forecast, latent_state, loss_div, loss_ode, measure,
                       residual_from_state, vector_field)
from .embedding import (DelayConfig, MaskState, delay_times, fnn_fractions, loss_exp,
                        loss_rec, update_mask)
from .exceptions import (ConfigurationError, DegenerateError, DivergenceError, NumericError,
                         UsageError)
from .nn import (NetworkSpec, atomic_write_text, init_network, mlp_forward, params_from_dict,
                 params_to_dict, update_running_stats)

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_fit", "L_rec", "L_ode", "L_div", "L_exp")
METRIC_COLUMNS = ("epoch",) + LOSS_NAMES + ("d", "val_nmse")


# ---------------------------------------------------------------------------
# ADAM

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights, **kw):
        return cls({k: np.zeros_like(a) for k, a in weights.items()},
                   {k: np.zeros_like(a) for k, a in weights.items()}, **kw)

    def to_dict(self):
        enc = {k: a.tolist() for k, a in self.m.items()}
        return {"m": enc, "v": {k: a.tolist() for k, a in self.v.items()},
                "step": self.step, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls({k: np.array(a, dtype=np.float64) for k, a in d["m"].items()},
                   {k: np.array(a, dtype=np.float64) for k, a in d["v"].items()},
                   d["step"], d["lr"], d["beta1"], d["beta2"], d["eps"])


def adam_step(params, grads, state):
    """Bias-corrected ADAM update; returns new ``(params, state)``."""
    if params.keys() != grads.keys():
        raise UsageError("parameter and gradient keys differ")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        mk = b1 * state.m[k] + (1.0 - b1) * g
        vk = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - state.lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
        new_m[k], new_v[k] = mk, vk
    return new_p, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# losses

def loss_fit(values, predicted):
    """Squared misfit normalized by the segment's own variance."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        raise UsageError("loss_fit needs at least 2 samples")
    var = np.mean((values - values.mean()) ** 2)
    if var == 0:
        raise DegenerateError("loss_fit on a constant segment")
    r = ad.sub(values, predicted)
    return ad.mul(ad.sum(ad.mul(r, r)), 1.0 / (n * var))


# ---------------------------------------------------------------------------
# bundle

def network_specs(cfg):
    m = cfg.m
    return {
        "u": NetworkSpec(1, 1, cfg.blocks_u, cfg.width, "tanh",
                         cfg.dropout if cfg.dropout_u is None else cfg.dropout_u),
        "e": NetworkSpec(m, m, cfg.blocks_e, cfg.width, "tanh", cfg.dropout),
        "d": NetworkSpec(m, m, cfg.blocks_d, cfg.width, "tanh", cfg.dropout),
        "f": NetworkSpec(m, m * m, cfg.blocks_f, cfg.width, "linear", cfg.dropout),
    }


@dataclass
class TrainBundle:
    config: ExperimentConfig
    curves: list
    theta_e: object
    theta_d: object
    theta_f: object
    mask: MaskState
    adam: dict
    rng: np.random.Generator
    scaling: ScalingRecord | None = None
    epoch: int = 0
    phase: str = "delay"
    best_val: float = math.inf
    best_epoch: int = -1
    extra: dict = field(default_factory=dict)

    @property
    def delay_cfg(self):
        return DelayConfig(self.config.m, self.config.tau)

    @property
    def encoder(self):
        """Encoder parameters when the autoencoder path is active, else None."""
        return self.theta_e if self.phase == "autoencoder" else None

    def copy(self):
        return copy.deepcopy(self)


def init_bundle(cfg, segmented, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    specs = network_specs(cfg)
    curves = [FitCurve(init_network(specs["u"], rng), float(t[0]), float(t[-1]))
              for t, _ in segmented.segments]
    theta_e = init_network(specs["e"], rng)
    theta_d = init_network(specs["d"], rng)
    theta_f = init_network(specs["f"], rng)
    kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_adam)
    kw_u = dict(kw, lr=cfg.lr if cfg.lr_u is None else cfg.lr_u)
    adam = {f"u{i}": AdamState.zeros_like(c.params.weights, **kw_u) for i, c in enumerate(curves)}
    adam["e"] = AdamState.zeros_like(theta_e.weights, **kw)
    adam["d"] = AdamState.zeros_like(theta_d.weights, **kw)
    adam["f"] = AdamState.zeros_like(theta_f.weights, **kw)
    mask = MaskState.initial(cfg.m, epsilon=cfg.epsilon, alpha=cfg.alpha,
                             r_tol=cfg.r_tol, a_tol=cfg.a_tol)
    return TrainBundle(cfg, curves, theta_e, theta_d, theta_f, mask, adam, rng,
                       scaling=segmented.scaling)


def calibrate_curve(curve, times):
    """Set the running statistics of a fit curve to the batch statistics of its grid.

    The grid is the fixed batch the curve is normalized with during training,
    so eval mode then reproduces the train-mode curve at the current weights.
    """
    stats = []
    keep = np.ones((np.size(times), curve.params.spec.width))
    curve.forward(times, "train", batch_stats=stats, dropout_mask=keep)
    update_running_stats(curve.params, stats, momentum=1.0)


def _apply_update(params, nodes, grads, state):
    g = dict(zip(nodes.keys(), grads))
    params.weights, new_state = adam_step(params.weights, g, state)
    return new_state


def _check_finite(value, name, segment):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name} on segment {segment}: {value}")


def segment_step(bundle, i, segment, rng=None, update=True):
    """Losses and gradient updates for segment ``i``; returns (losses, U rows)."""
    cfg = bundle.config
    rng = bundle.rng if rng is None else rng
    times, values = segment
    dcfg = bundle.delay_cfg
    w, d = bundle.mask.w, bundle.mask.d
    M, m = cfg.M, cfg.m
    curve = bundle.curves[i]
    auto = bundle.phase == "autoencoder"

    t_samples = rng.uniform(times[0] + dcfg.span, times[-1], M)
    dts = delay_times(t_samples, dcfg)
    n = times.size
    wu = curve.params.as_nodes()
    # batch statistics of N_u come from the fixed measurement grid, so the
    # running averages settle on exactly what training normalizes with
    out = curve.forward(np.concatenate([times, dts.ravel()]), "train", rng, derivative=True,
                        weights=wu, stats_rows=n)
    L_fit = loss_fit(values, ad.getitem(out.primal, slice(0, n)))
    u_tilde = ad.Dual(ad.reshape(ad.getitem(out.primal, slice(n, None)), (M, m)),
                      ad.reshape(ad.getitem(out.tangent, slice(n, None)), (M, m)))
    ut_val = np.array(ad.value_of(u_tilde.primal))

    we = wd = None
    se, sd = [], []
    L_rec = L_exp = None
    if auto:
        we, wd = bundle.theta_e.as_nodes(), bundle.theta_d.as_nodes()
        enc = mlp_forward(bundle.theta_e, u_tilde, "train", rng, weights=we, batch_stats=se)
        U_rows = np.array(ad.value_of(enc.primal))
        u = ad.mul(enc, w)
        enc_noisy = mlp_forward(bundle.theta_e, ut_val, "train", rng, weights=we,
                                input_noise=cfg.corruption)
        u_hat = mlp_forward(bundle.theta_d, ad.mul(enc_noisy, w), "train", rng, weights=wd,
                            batch_stats=sd)
        L_rec = loss_rec(u_hat, ut_val, d, u=u.primal)
        L_exp = loss_exp(u.primal, d)
    else:
        U_rows = ut_val
        u = ad.mul(u_tilde, w)

    # one N_f batch: trajectory states (rows :M) and configuration-space samples (rows M:)
    samples = rng.uniform(-1.0, 1.0, (M, m)) * w
    X = ad.concatenate([u.primal, samples], axis=0)
    directions = np.zeros((d, 2 * M, m))
    for k in range(d):
        directions[k, M:, k] = 1.0
    wf, sf = bundle.theta_f.as_nodes(), []
    F = vector_field(ad.Dual(X, directions, nlead=1), bundle.theta_f, w, "train", rng,
                     weights=wf, batch_stats=sf)
    e = ad.sub(u.tangent, ad.getitem(F.primal, slice(0, M)))
    L_ode = loss_ode(e, d)
    div = ad.getitem(F.tangent, (0, slice(M, None), 0))
    for k in range(1, d):
        div = ad.add(div, ad.getitem(F.tangent, (k, slice(M, None), k)))
    L_div = loss_div(div, d)

    losses = {"L_fit": L_fit, "L_rec": L_rec, "L_ode": L_ode, "L_div": L_div, "L_exp": L_exp}
    values_out = {}
    for name, node in losses.items():
        v = float(ad.value_of(node)) if node is not None else math.nan
        if node is not None:
            _check_finite(v, name, i)
        values_out[name] = v
    if not update:
        return values_out, U_rows

    g_u = ad.reverse_grad(ad.add(L_fit, ad.mul(cfg.lambda_u, L_ode)), list(wu.values()))
    g_f = ad.reverse_grad(ad.add(L_ode, ad.mul(cfg.lambda_f, L_div)), list(wf.values()))
    if auto:
        total_e = ad.add(ad.add(L_rec, ad.mul(cfg.lambda_e1, L_ode)), ad.mul(cfg.lambda_e2, L_exp))
        g_ed = ad.reverse_grad(total_e, list(we.values()) + list(wd.values()))
        g_e, g_d = g_ed[:len(we)], g_ed[len(we):]

    bundle.adam[f"u{i}"] = _apply_update(curve.params, wu, g_u, bundle.adam[f"u{i}"])
    calibrate_curve(curve, times)
    bundle.adam["f"] = _apply_update(bundle.theta_f, wf, g_f, bundle.adam["f"])
    update_running_stats(bundle.theta_f, sf)
    if auto:
        bundle.adam["e"] = _apply_update(bundle.theta_e, we, g_e, bundle.adam["e"])
        update_running_stats(bundle.theta_e, se)
        bundle.adam["d"] = _apply_update(bundle.theta_d, wd, g_d, bundle.adam["d"])
        update_running_stats(bundle.theta_d, sd)
    return values_out, U_rows


def epoch_gamma(bundle, U):
    """FNN fractions of the states collected over an epoch (subsampled to the cap)."""
    cfg = bundle.config
    rows = np.concatenate(U, axis=0)
    if rows.shape[0] > cfg.fnn_cap:
        idx = np.sort(bundle.rng.choice(rows.shape[0], cfg.fnn_cap, replace=False))
        rows = rows[idx]
    return fnn_fractions(rows, cfg.r_tol, cfg.a_tol, cfg.ratio_test)


def train_epoch(bundle, data, rng=None, update_mask_flag=True):
    """One pass over all segments followed by the mask refresh.

    Mutates and returns ``bundle`` together with the epoch-mean losses.
    """
    U = []
    sums = {k: 0.0 for k in LOSS_NAMES}
    for i, seg in enumerate(data.segments):
        losses, rows = segment_step(bundle, i, seg, rng)
        U.append(rows)
        for k in LOSS_NAMES:
            sums[k] += losses[k]
    S = len(data.segments)
    metrics = {k: sums[k] / S for k in LOSS_NAMES}
    if update_mask_flag:
        gamma_hat = epoch_gamma(bundle, U)
        bundle.mask = update_mask(bundle.mask, gamma_hat)
        metrics["gamma_hat"] = gamma_hat
    metrics["d"] = bundle.mask.d
    bundle.epoch += 1
    return bundle, metrics


# ---------------------------------------------------------------------------
# evaluation helpers used during training

def curve_for_time(bundle, t):
    """Index of the first segment whose domain contains ``t``."""
    for i, c in enumerate(bundle.curves):
        if c.t_lo - 1e-9 <= t <= c.t_hi + 1e-9:
            return i
    raise UsageError(f"time {t:g} outside every fitted segment")


def fitted_signal(bundle, times):
    """u(t) in scaled units, each time read from the first segment containing it."""
    times = np.asarray(times, dtype=np.float64)
    out = np.empty_like(times)
    owner = np.array([curve_for_time(bundle, t) for t in times])
    for i in np.unique(owner):
        sel = owner == i
        out[sel] = bundle.curves[i](times[sel])
    return out


def state_at(bundle, curve, t0):
    """Latent state at ``t0`` from a fitted curve (eval mode)."""
    u = latent_state(np.array([t0]), curve, bundle.delay_cfg, bundle.mask.w, bundle.encoder)
    return np.array(ad.value_of(u.primal))[0]


def measurement_mode(bundle):
    return "decoder" if bundle.phase == "autoencoder" else "delay"


def forecast_signal(bundle, u0, n_steps, dt=None, pad_divergence=False):
    """Forecast from state ``u0`` mapped to scaled measurements, length n_steps + 1.

    With ``pad_divergence`` a blow-up does not raise; samples from the failing
    step on are NaN instead.
    """
    dt = bundle.config.dt if dt is None else dt
    try:
        states = forecast(u0, bundle.theta_f, bundle.mask.w, dt, n_steps)
    except DivergenceError as exc:
        if not pad_divergence or exc.step is None or exc.step < 1:
            raise
        good = forecast_signal(bundle, u0, exc.step - 1, dt)
        return np.concatenate([good, np.full(n_steps + 1 - good.size, np.nan)])
    return measure(states, measurement_mode(bundle), bundle.theta_d)


def validation_nmse(bundle, data):
    """NMSE of a forecast launched at the end of training over the validation window."""
    from .evaluation import nmse
    val = data.val
    if len(val) < 2:
        return math.nan
    t_end = data.train.times[-1]
    dt = bundle.config.dt
    n = int(math.ceil((val.times[-1] - t_end) / dt - 1e-9))
    try:
        u0 = state_at(bundle, bundle.curves[-1], t_end)
        pred = forecast_signal(bundle, u0, n, dt)
    except DivergenceError:
        return math.inf
    grid = t_end + dt * np.arange(n + 1)
    return nmse(val.values, np.interp(val.times, grid, pred))


# ---------------------------------------------------------------------------
# schedule

@dataclass
class TrainResult:
    bundle: TrainBundle
    last: TrainBundle
    history: list
    data: object
    clean: TimeSeries | None = None


def prepare_data(cfg):
    """Generate the clean and noisy Lorenz series and segment the noisy one."""
    clean, _ = lorenz_series(cfg.ic, cfg.dt, cfg.n_steps)
    noisy = add_noise(clean, cfg.eta, np.random.default_rng(cfg.data_seed))
    split = (cfg.train_end, cfg.val_end, cfg.test_end)
    return split_and_segment(noisy, cfg.S, cfg.m, cfg.tau, split), clean


def phase_epochs(cfg):
    return math.ceil(cfg.phase1_iters / cfg.S), math.ceil(cfg.phase2_iters / cfg.S)


def run_schedule(cfg, data=None, clean=None, out_dir=None, resume=None, callback=None):
    """Delay-embedding phase, then autoencoder phase; keep the best validation checkpoint.

    With ``out_dir`` the metrics log and the ``best``/``last`` checkpoints are
    written there (checkpoints after every validation).  ``resume`` continues
    from a ``last`` checkpoint written by an earlier call.
    """
    if data is None:
        data, clean = prepare_data(cfg)
    if resume is not None:
        bundle, history, best = load_checkpoint(resume, with_history=True)
        if bundle.config != cfg:
            raise ConfigurationError("checkpoint was written with a different configuration")
    else:
        bundle = init_bundle(cfg, data)
        history, best = [], None
    e1, e2 = phase_epochs(cfg)
    total = e1 + e2
    while bundle.epoch < total:
        bundle.phase = "delay" if bundle.epoch < e1 else "autoencoder"
        bundle, metrics = train_epoch(bundle, data)
        row = {"epoch": bundle.epoch, **{k: metrics[k] for k in LOSS_NAMES},
               "d": bundle.mask.d, "val_nmse": math.nan}
        last_of_phase = bundle.epoch in (e1, total)
        if bundle.epoch % cfg.val_every == 0 or last_of_phase:
            v = validation_nmse(bundle, data)
            row["val_nmse"] = v
            if np.isfinite(v) and (best is None or v < bundle.best_val):
                bundle.best_val, bundle.best_epoch = v, bundle.epoch
                best = bundle.copy()
            elif not np.isfinite(v):
                log.warning("epoch %d: non-finite validation NMSE, checkpoint skipped", bundle.epoch)
        history.append(row)
        if callback is not None:
            callback(bundle, row)
        if out_dir is not None and (not math.isnan(row["val_nmse"]) or bundle.epoch == total):
            write_metrics(os.path.join(out_dir, "metrics.csv"), history, cfg)
            save_checkpoint(os.path.join(out_dir, "last.json"), bundle, history, best)
            if best is not None:
                save_checkpoint(os.path.join(out_dir, "best.json"), best)
    if best is None:
        best = bundle.copy()
    if out_dir is not None:
        write_metrics(os.path.join(out_dir, "metrics.csv"), history, cfg)
        save_checkpoint(os.path.join(out_dir, "last.json"), bundle, history, best)
        save_checkpoint(os.path.join(out_dir, "best.json"), best)
    return TrainResult(best, bundle, history, data, clean)


def infer_initial_state(window, bundle, t0, iters=None, lambda_u=None, seed=0, return_curve=False):
    """Fit a fresh curve on ``window`` (scaled) with the trained maps frozen; return u(t0).

    Minimizes L_fit + lambda_u * L_ode over the new curve only; the encoder and
    vector field are evaluated in eval mode.
    """
    cfg = bundle.config
    iters = cfg.infer_iters if iters is None else iters
    lam = cfg.lambda_u if lambda_u is None else lambda_u
    dcfg = bundle.delay_cfg
    t, v = window.times, window.values
    if t.size < 2 or t[-1] - t[0] <= dcfg.span:
        raise ConfigurationError(f"window shorter than the delay span {dcfg.span:g}")
    if t0 - dcfg.span < t[0] - 1e-9 or t0 > t[-1] + 1e-9:
        raise ConfigurationError(f"window [{t[0]:g}, {t[-1]:g}] does not cover the delay "
                                 f"vector at t0={t0:g}")
    rng = np.random.default_rng(seed)
    curve = FitCurve(init_network(network_specs(cfg)["u"], rng), float(t[0]), float(t[-1]))
    state = AdamState.zeros_like(curve.params.weights, lr=cfg.lr if cfg.lr_u is None else cfg.lr_u,
                                 beta1=cfg.beta1,
                                 beta2=cfg.beta2, eps=cfg.eps_adam)
    w, d, enc = bundle.mask.w, bundle.mask.d, bundle.encoder
    for _ in range(iters):
        ts = rng.uniform(t[0] + dcfg.span, t[-1], cfg.M)
        dts = delay_times(ts, dcfg)
        wu = curve.params.as_nodes()
        out = curve.forward(np.concatenate([t, dts.ravel()]), "train", rng, derivative=True,
                            weights=wu, stats_rows=t.size)
        L = loss_fit(v, ad.getitem(out.primal, slice(0, t.size)))
        if lam > 0:
            ut = ad.Dual(ad.reshape(ad.getitem(out.primal, slice(t.size, None)), dts.shape),
                         ad.reshape(ad.getitem(out.tangent, slice(t.size, None)), dts.shape))
            u = ad.mul(ut, w) if enc is None else ad.mul(mlp_forward(enc, ut, "eval"), w)
            e = residual_from_state(u, bundle.theta_f, w)
            L = ad.add(L, ad.mul(lam, loss_ode(e, d)))
        grads = ad.reverse_grad(L, list(wu.values()))
        state = _apply_update(curve.params, wu, grads, state)
        calibrate_curve(curve, t)
    u0 = state_at(bundle, curve, t0)
    return (u0, curve) if return_curve else u0


# ---------------------------------------------------------------------------
# persistence

def bundle_to_dict(bundle):
    return {
        "format": "latentdyn-bundle",
        "version": 1,
        "config": bundle.config.to_dict(),
        "curves": [{"t_lo": c.t_lo, "t_hi": c.t_hi, "params": params_to_dict(c.params)}
                   for c in bundle.curves],
        "theta_e": params_to_dict(bundle.theta_e),
        "theta_d": params_to_dict(bundle.theta_d),
        "theta_f": params_to_dict(bundle.theta_f),
        "mask": bundle.mask.to_dict(),
        "adam": {k: s.to_dict() for k, s in bundle.adam.items()},
        "rng": bundle.rng.bit_generator.state,
        "scaling": None if bundle.scaling is None else
        {"shift": bundle.scaling.shift, "scale": bundle.scaling.scale},
        "epoch": bundle.epoch,
        "phase": bundle.phase,
        "best_val": bundle.best_val if np.isfinite(bundle.best_val) else None,
        "best_epoch": bundle.best_epoch,
    }


def bundle_from_dict(d):
    if d.get("format") != "latentdyn-bundle":
        raise UsageError("not a latentdyn bundle checkpoint")
    cfg = ExperimentConfig.from_dict(d["config"])
    curves = [FitCurve(params_from_dict(c["params"]), c["t_lo"], c["t_hi"]) for c in d["curves"]]
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng"]
    sc = d["scaling"]
    return TrainBundle(
        cfg, curves, params_from_dict(d["theta_e"]), params_from_dict(d["theta_d"]),
        params_from_dict(d["theta_f"]), MaskState.from_dict(d["mask"]),
        {k: AdamState.from_dict(s) for k, s in d["adam"].items()}, rng,
        None if sc is None else ScalingRecord(sc["shift"], sc["scale"]),
        d["epoch"], d["phase"],
        math.inf if d["best_val"] is None else d["best_val"], d["best_epoch"])


def save_checkpoint(path, bundle, history=None, best=None):
    """Atomic JSON checkpoint; ``history``/``best`` make it resumable."""
    d = bundle_to_dict(bundle)
    if history is not None:
        # JSON has no inf/nan literals; store them by name
        d["history"] = [{k: (repr(v) if isinstance(v, float) and not np.isfinite(v) else v)
                         for k, v in row.items()} for row in history]
    if best is not None:
        d["best"] = bundle_to_dict(best)
    atomic_write_text(path, json.dumps(d))


def load_checkpoint(path, with_history=False):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    bundle = bundle_from_dict(d)
    if not with_history:
        return bundle
    history = [{k: (float(v) if isinstance(v, str) else v) for k, v in row.items()}
               for row in d.get("history", [])]
    best = bundle_from_dict(d["best"]) if "best" in d else None
    return bundle, history, best


def format_metrics(history, cfg=None):
    from .data import format_csv
    cols = [[row[c] for row in history] for c in METRIC_COLUMNS]
    comments = () if cfg is None else (f"config {cfg.digest()}",)
    text = format_csv(list(METRIC_COLUMNS), cols, comments)
    return text


def write_metrics(path, history, cfg=None):
    atomic_write_text(path, format_metrics(history, cfg))
