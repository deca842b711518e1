"""Error metrics, the filtering report, forecast horizons and transfer experiments."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import format_csv, lorenz_series, rescale
from .dynamics import forecast
from .embedding import encode, decode
from .exceptions import DegenerateError, UsageError

TRANSFER_ICS = ((1.02, 0.05, -1.67), (3.14, -1.59, 2.65), (2.00, 3.00, 4.25))


def nmse(truth, prediction):
    """sum (truth - pred)^2 / sum (truth - mean(truth))^2."""
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.shape != prediction.shape:
        raise UsageError(f"shape mismatch {truth.shape} vs {prediction.shape}")
    if truth.size < 2:
        raise UsageError("nmse needs at least 2 samples")
    den = np.sum((truth - truth.mean()) ** 2)
    if den == 0:
        raise DegenerateError("nmse against a constant truth series")
    return float(np.sum((truth - prediction) ** 2) / den)


@dataclass
class FilterRow:
    eta: float
    nmse_raw: float
    nmse_fit: float
    nmse_decoded: float

    def __post_init__(self):
        for name in ("nmse_raw", "nmse_fit", "nmse_decoded"):
            v = getattr(self, name)
            if not (np.isnan(v) or v >= 0):
                raise UsageError(f"{name} must be >= 0, got {v}")


@dataclass
class FilterReport:
    rows: list = field(default_factory=list)

    def to_csv(self, comments=()):
        cols = [[getattr(r, c) for r in self.rows]
                for c in ("eta", "nmse_raw", "nmse_fit", "nmse_decoded")]
        return format_csv(["eta", "nmse_raw", "nmse_fit", "nmse_decoded"], cols, comments)

    def to_text(self):
        buf = io.StringIO()
        buf.write("Normalized mean square error of the two-stage filtering process\n")
        buf.write(f"{'Case':<14}{'Raw measurements':>18}{'u(t)':>12}{'N_d{N_e[u~(t)]}':>18}\n")
        for r in self.rows:
            buf.write(f"{'eta = %.2f' % r.eta:<14}{r.nmse_raw:>18.2e}{r.nmse_fit:>12.2e}"
                      f"{r.nmse_decoded:>18.2e}\n")
        return buf.getvalue()


def decoded_signal(bundle, times):
    """First component of N_d(w * N_e(u_tilde(t))) in scaled units (eval mode)."""
    from .training import curve_for_time
    cfg = bundle.delay_cfg
    times = np.asarray(times, dtype=np.float64)
    out = np.empty_like(times)
    owner = np.array([curve_for_time(bundle, t) for t in times])
    for i in np.unique(owner):
        sel = owner == i
        curve = bundle.curves[i]
        dts = times[sel][:, None] - cfg.lags()
        ut = curve(dts.ravel()).reshape(dts.shape)
        u = encode(ut, bundle.theta_e, bundle.mask.w)
        out[sel] = np.asarray(decode(u, bundle.theta_d))[:, 0]
    return out


def filtering_report(clean, noisy, bundle, eta=None, report=None):
    """Append one row comparing raw, fitted and decoded signals against the clean series.

    Comparisons use measurement units (the scaled fits are mapped back) on
    training times whose delay vector lies inside a fitted segment.
    """
    from .training import fitted_signal
    if bundle.scaling is None:
        raise UsageError("bundle carries no scaling record")
    if clean.times.shape != noisy.times.shape or not np.allclose(clean.times, noisy.times):
        raise UsageError("clean and noisy series are not aligned")
    lo = bundle.curves[0].t_lo + bundle.delay_cfg.span
    hi = bundle.curves[-1].t_hi
    sel = (clean.times >= lo - 1e-9) & (clean.times <= hi + 1e-9)
    t = clean.times[sel]
    truth = clean.values[sel]
    fit = bundle.scaling.invert(fitted_signal(bundle, t))
    dec = bundle.scaling.invert(decoded_signal(bundle, t))
    if eta is None:
        eta = float(noisy.meta.get("eta", np.nan))
    row = FilterRow(eta, nmse(truth, noisy.values[sel]), nmse(truth, fit), nmse(truth, dec))
    report = FilterReport() if report is None else report
    report.rows.append(row)
    return report


def forecast_horizon(pred, truth, tol=0.2, dt=1.0, times=None):
    """Time up to which |pred - truth| <= tol * range(truth) holds at every sample.

    Returns the elapsed time of the last sample of the leading run of
    within-tolerance samples (0 when the first sample already fails).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise UsageError("pred and truth must be aligned")
    if times is None:
        times = dt * np.arange(truth.size)
    times = np.asarray(times, dtype=np.float64)
    bound = tol * (truth.max() - truth.min())
    ok = np.abs(pred - truth) <= bound
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return float(times[-1] - times[0])
    if bad[0] == 0:
        return 0.0
    return float(times[bad[0] - 1] - times[0])


@dataclass
class TransferResult:
    ic: tuple
    times: np.ndarray
    forecast: np.ndarray
    truth: np.ndarray
    horizon: float

    def to_csv(self, comments=()):
        return format_csv(["time", "predicted", "truth"], [self.times, self.forecast, self.truth],
                          comments)


def transfer_experiment(ic, bundle=None, t_total=110.0, t0=100.0, half_window=1.0, iters=None,
                        tol=None, dt=0.05, seed=0, rhs=None):
    """Forecast a Lorenz series seeded at ``ic`` over [t0, t_total].

    With a trained ``bundle`` the state at t0 is inferred from the scaled
    window [t0 - half_window, t0 + half_window] and integrated with the learned
    field.  With ``rhs`` instead, the true state at t0 is integrated with that
    field and the first coordinate is read off (an oracle reference).
    """
    from .training import forecast_signal, infer_initial_state
    if bundle is None and rhs is None:
        raise UsageError("need a trained bundle or an oracle right-hand side")
    if bundle is not None:
        dt = bundle.config.dt
        tol = bundle.config.horizon_tol if tol is None else tol
    tol = 0.2 if tol is None else tol
    series, traj = lorenz_series(ic, dt, int(round(t_total / dt)))
    n = int(round((t_total - t0) / dt))
    k0 = int(round(t0 / dt))
    truth = series.values[k0:k0 + n + 1]
    times = series.times[k0:k0 + n + 1]
    if rhs is not None:
        pred = oracle_forecast(traj[k0], dt, n, rhs)[:, 0]
    else:
        if bundle.scaling is None:
            raise UsageError("bundle carries no scaling record")
        scaled, _ = rescale(series, bundle.scaling)
        window = scaled.window(t0 - half_window, t0 + half_window)
        u0 = infer_initial_state(window, bundle, t0, iters=iters, seed=seed)
        pred = bundle.scaling.invert(forecast_signal(bundle, u0, n, dt, pad_divergence=True))
    return TransferResult(tuple(ic), times, pred, truth, forecast_horizon(pred, truth, tol, dt))


def oracle_forecast(u0, dt, n_steps, rhs):
    """Integrate a known vector field through the same RK4 path as the learned one."""
    return forecast(u0, None, None, dt, n_steps, rhs=rhs)
