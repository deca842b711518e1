"""scikit-learn style wrappers around the training and embedding routines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ExperimentConfig
from .data import TimeSeries, split_and_segment
from .embedding import delay_matrix, fnn_fractions, mask_from_gamma
from .exceptions import ConfigurationError, UsageError
from .training import fitted_signal, forecast_signal, run_schedule, state_at


def _times_column(X, name="X"):
    X = check_array(X, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise UsageError(f"{name} must hold a single time column, got {X.shape[1]}")
        X = X[:, 0]
    return X


class LatentODEForecaster(RegressorMixin, BaseEstimator):
    """Fit a scalar series with curve fits, an embedding and a latent neural ODE.

    ``fit(X, y)`` takes sampling times ``X`` (evenly spaced, one column) and
    measurements ``y``.  The last ``val_span`` time units are held out for
    checkpoint selection.  ``predict`` returns the fitted (filtered) signal
    inside the training span and a forecast beyond it.  ``transform`` maps
    times to latent states.

    Parameters left as ``None`` take the value of ``preset``.
    """

    def __init__(self, preset="desk", S=None, m=None, tau=None, M=None, width=None,
                 phase1_iters=None, phase2_iters=None, lr=None, lr_u=None, lambda_u=None,
                 lambda_f=None, val_span=2.0, random_state=0):
        self.preset = preset
        self.S = S
        self.m = m
        self.tau = tau
        self.M = M
        self.width = width
        self.phase1_iters = phase1_iters
        self.phase2_iters = phase2_iters
        self.lr = lr
        self.lr_u = lr_u
        self.lambda_u = lambda_u
        self.lambda_f = lambda_f
        self.val_span = val_span
        self.random_state = random_state

    def _config(self, t):
        if self.preset not in ("desk", "full"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        base = ExperimentConfig.desk() if self.preset == "desk" else ExperimentConfig.full()
        dt = float(t[1] - t[0])
        t_end = float(t[-1])
        train_end = t_end - float(self.val_span)
        if not train_end > t[0]:
            raise ConfigurationError("val_span leaves no training data")
        seed = 0 if self.random_state is None else int(self.random_state)
        return base.updated(S=self.S, m=self.m, tau=self.tau, M=self.M, width=self.width,
                            phase1_iters=self.phase1_iters, phase2_iters=self.phase2_iters,
                            lr=self.lr, lr_u=self.lr_u, lambda_u=self.lambda_u,
                            lambda_f=self.lambda_f, dt=dt, n_steps=t.size - 1,
                            train_end=train_end, val_end=t_end, test_end=t_end, seed=seed)

    def fit(self, X, y):
        t = _times_column(X)
        y = check_array(y, ensure_2d=False, dtype=np.float64, input_name="y").ravel()
        if t.shape != y.shape:
            raise UsageError(f"X has {t.size} times but y has {y.size} values")
        if t.size < 3:
            raise UsageError("need at least 3 samples")
        steps = np.diff(t)
        if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9) or steps[0] <= 0:
            raise UsageError("times must be increasing and evenly spaced")
        cfg = self._config(t)
        series = TimeSeries(t, y, {})
        data = split_and_segment(series, cfg.S, cfg.m, cfg.tau,
                                 (cfg.train_end, cfg.val_end, cfg.test_end))
        result = run_schedule(cfg, data)
        self.config_ = cfg
        self.bundle_ = result.bundle
        self.history_ = result.history
        self.scaling_ = result.bundle.scaling
        self.gamma_ = result.bundle.mask.gamma.copy()
        self.embedding_dim_ = int(result.bundle.mask.d)
        self.t_end_ = float(data.train.times[-1])
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "bundle_")
        t = _times_column(X)
        b = self.bundle_
        out = np.empty_like(t)
        inside = t <= self.t_end_ + 1e-9
        if np.any(inside):
            out[inside] = fitted_signal(b, t[inside])
        if np.any(~inside):
            dt = self.config_.dt
            n = int(np.ceil((t[~inside].max() - self.t_end_) / dt - 1e-9))
            u0 = state_at(b, b.curves[-1], self.t_end_)
            pred = forecast_signal(b, u0, n, dt, pad_divergence=True)
            grid = self.t_end_ + dt * np.arange(n + 1)
            out[~inside] = np.interp(t[~inside], grid, pred)
        return self.scaling_.invert(out)

    def transform(self, X):
        """Latent states (masked, length m) at each time of ``X``."""
        check_is_fitted(self, "bundle_")
        t = _times_column(X)
        b = self.bundle_
        span = b.delay_cfg.span
        rows = []
        for ti in t:
            owner = [c for c in b.curves if c.t_lo - 1e-9 <= ti - span and ti <= c.t_hi + 1e-9]
            if not owner:
                raise UsageError(f"no fitted segment holds the delay window ending at {ti:g}")
            rows.append(state_at(b, owner[0], ti))
        return np.array(rows).reshape(t.size, -1)


class FNNDimensionEstimator(TransformerMixin, BaseEstimator):
    """Embedding dimension of an evenly sampled scalar series by false nearest neighbours.

    ``lag`` is the delay in samples.  ``transform`` returns the delay matrix
    restricted to the first ``embedding_dim_`` columns.
    """

    def __init__(self, m=6, lag=2, n_samples=2000, epsilon=0.01, r_tol=10.0, a_tol=2.0,
                 ratio_test="kennel", random_state=0):
        self.m = m
        self.lag = lag
        self.n_samples = n_samples
        self.epsilon = epsilon
        self.r_tol = r_tol
        self.a_tol = a_tol
        self.ratio_test = ratio_test
        self.random_state = random_state

    def _delays(self, X):
        x = check_array(X, ensure_2d=False, dtype=np.float64).ravel()
        if self.m < 2 or self.lag < 1:
            raise UsageError("need m >= 2 and lag >= 1")
        return delay_matrix(x, int(self.lag), int(self.m))

    def fit(self, X, y=None):
        D = self._delays(X)
        if self.n_samples is not None and D.shape[0] > self.n_samples:
            rng = np.random.default_rng(self.random_state)
            D = D[np.sort(rng.choice(D.shape[0], self.n_samples, replace=False))]
        self.gamma_ = fnn_fractions(D, self.r_tol, self.a_tol, self.ratio_test)
        self.mask_, self.embedding_dim_ = mask_from_gamma(self.gamma_, self.epsilon)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "gamma_")
        return self._delays(X)[:, :self.embedding_dim_]
