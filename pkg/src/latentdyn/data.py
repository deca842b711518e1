"""Synthetic Lorenz-63 data, measurement noise, rescaling and segmentation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import (ConfigurationError, DegenerateError, DivergenceError, NumericError,
                         UsageError)

LORENZ_PARAMS = (10.0, 28.0, 8.0 / 3.0)
DEFAULT_IC = (0.0, 1.0, 1.05)

_TIME_TOL = 1e-9


@dataclass
class TimeSeries:
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise UsageError(f"times {self.times.shape} and values {self.values.shape} "
                             "must be 1-D of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise UsageError("times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def window(self, lo, hi):
        """Samples with lo <= t <= hi (inclusive, with a small tolerance)."""
        sel = (self.times >= lo - _TIME_TOL) & (self.times <= hi + _TIME_TOL)
        return TimeSeries(self.times[sel], self.values[sel], dict(self.meta))


@dataclass(frozen=True)
class ScalingRecord:
    """Affine map ``scaled = (x - shift) / scale``."""

    shift: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateError(f"scale must be positive, got {self.scale}")

    @classmethod
    def fit(cls, values):
        lo, hi = float(np.min(values)), float(np.max(values))
        if hi <= lo:
            raise DegenerateError("cannot rescale a constant series")
        return cls(shift=0.5 * (hi + lo), scale=0.5 * (hi - lo))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.shift


@dataclass
class SegmentedSeries:
    segments: list
    overlap: float
    train: TimeSeries
    val: TimeSeries
    test: TimeSeries
    scaling: ScalingRecord | None = None

    @property
    def n_segments(self):
        return len(self.segments)


# ---------------------------------------------------------------------------
# integration

def lorenz_rhs(v, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    """Lorenz-63 vector field for a state of shape (3,) or (batch, 3)."""
    if isinstance(v, np.ndarray):
        x, y, z = v[..., 0], v[..., 1], v[..., 2]
        return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)
    batched = ad.value_of(v).ndim == 2
    x, y, z = (ad.getitem(v, (slice(None), i) if batched else i) for i in range(3))
    return ad.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def rk4_integrate(rhs, y0, dt, n_steps):
    """Classical fixed-step RK4; returns an array of ``n_steps + 1`` states.

    Raises DivergenceError (with ``.step``) on the first non-finite state.
    """
    if not dt > 0:
        raise UsageError(f"dt must be positive, got {dt}")
    if n_steps < 0:
        raise UsageError(f"n_steps must be >= 0, got {n_steps}")
    y = np.array(y0, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite initial state", step=0)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    half = 0.5 * dt
    for k in range(n_steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                k1 = rhs(y)
                k2 = rhs(y + half * k1)
                k3 = rhs(y + half * k2)
                k4 = rhs(y + dt * k3)
                y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except NumericError as exc:
            raise DivergenceError(f"integration diverged at step {k + 1}: {exc}",
                                  step=k + 1) from exc
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"integration diverged at step {k + 1}", step=k + 1)
        out[k + 1] = y
    return out


def integrate_lorenz(ic=DEFAULT_IC, dt=0.05, n_steps=10200, params=LORENZ_PARAMS):
    """RK4 trajectory of shape ``(n_steps + 1, 3)``; row k is the state at t = k*dt."""
    if n_steps < 1:
        raise UsageError(f"n_steps must be >= 1, got {n_steps}")
    sigma, rho, beta = params
    return rk4_integrate(lambda v: lorenz_rhs(v, sigma, rho, beta), ic, dt, n_steps)


def lorenz_series(ic=DEFAULT_IC, dt=0.05, n_steps=10200, params=LORENZ_PARAMS):
    """The x-coordinate of :func:`integrate_lorenz` as a TimeSeries."""
    traj = integrate_lorenz(ic, dt, n_steps, params)
    times = dt * np.arange(n_steps + 1)
    meta = {"ic": [float(c) for c in ic], "dt": dt, "n_steps": n_steps,
            "params": [float(p) for p in params]}
    return TimeSeries(times, traj[:, 0].copy(), meta), traj


def add_noise(series, eta, rng):
    """Add i.i.d. N(0, (eta * std(values))**2) noise."""
    if eta < 0:
        raise UsageError(f"eta must be >= 0, got {eta}")
    meta = dict(series.meta, eta=eta)
    if eta == 0:
        return TimeSeries(series.times.copy(), series.values.copy(), meta)
    sigma = eta * np.std(series.values, ddof=1)
    noisy = series.values + rng.normal(0.0, sigma, size=series.values.shape)
    return TimeSeries(series.times.copy(), noisy, meta)


def rescale(series, record=None):
    """Map values affinely to [-1, 1] (min -> -1, max -> 1); no clipping.

    Pass ``record`` to apply an existing map, e.g. the one fitted on the
    training split, to validation or test data.
    """
    if record is None:
        record = ScalingRecord.fit(series.values)
    scaled = TimeSeries(series.times.copy(), record.apply(series.values), dict(series.meta))
    return scaled, record


# ---------------------------------------------------------------------------
# splitting

def split_series(series, train_end, val_end, test_end, start=None):
    """Train [start, train_end], val (train_end, val_end], test (val_end, test_end]."""
    t = series.times
    start = t[0] if start is None else start
    tr = (t >= start - _TIME_TOL) & (t <= train_end + _TIME_TOL)
    va = (t > train_end + _TIME_TOL) & (t <= val_end + _TIME_TOL)
    te = (t > val_end + _TIME_TOL) & (t <= test_end + _TIME_TOL)
    parts = [TimeSeries(t[s], series.values[s], dict(series.meta)) for s in (tr, va, te)]
    return tuple(parts)


def _snap(times, target):
    return times[np.argmin(np.abs(times - target))]


def split_and_segment(series, S, m, tau, split, scale=True):
    """Split into train/val/test and cut the training part into S overlapping segments.

    ``split`` is ``(train_end, val_end, test_end)``.  Consecutive segments share
    an ``(m-1)*tau`` overlap.  With ``scale`` the series is mapped to [-1, 1]
    using the training split only.
    """
    if S < 1:
        raise ConfigurationError(f"S must be >= 1, got {S}")
    train, val, test = split_series(series, *split)
    if len(train) < 2:
        raise ConfigurationError("training split has fewer than 2 samples")
    record = None
    if scale:
        train, record = rescale(train)
        val, _ = rescale(val, record)
        test, _ = rescale(test, record)
    overlap = (m - 1) * tau
    t = train.times
    t0, t1 = t[0], t[-1]
    if not (t1 - t0) > S * overlap:
        raise ConfigurationError(
            f"training interval {t1 - t0:g} too short for {S} segments with overlap {overlap:g}")
    core = (t1 - t0 - overlap) / S
    starts = [t0] + [_snap(t, t0 + i * core) for i in range(1, S)]
    ends = [s + overlap for s in starts[1:]] + [t1]
    segments = []
    for a, b in zip(starts, ends):
        sel = (t >= a - _TIME_TOL) & (t <= b + _TIME_TOL)
        if sel.sum() < 2:
            raise ConfigurationError(f"segment [{a:g}, {b:g}] holds fewer than 2 samples")
        segments.append((t[sel].copy(), train.values[sel].copy()))
    for i in range(1, S):
        if segments[i][0][0] <= segments[i - 1][0][0]:
            raise ConfigurationError("too many segments for the sampling density")
    return SegmentedSeries(segments, overlap, train, val, test, record)


def reassemble(segmented):
    """Concatenate segments, dropping each overlap (inverse of segmentation)."""
    times, values = [segmented.segments[0][0]], [segmented.segments[0][1]]
    for t, v in segmented.segments[1:]:
        keep = t > times[-1][-1] + _TIME_TOL
        times.append(t[keep])
        values.append(v[keep])
    return np.concatenate(times), np.concatenate(values)


# ---------------------------------------------------------------------------
# CSV

def _data_lines(fh):
    return (line for line in fh if line.strip() and not line.lstrip().startswith("#"))


def read_series_csv(path_or_buf):
    """Read a ``time,value`` CSV (header required, ``#`` comment lines skipped)."""
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            return read_series_csv(io.StringIO(fh.read()))
    reader = csv.reader(_data_lines(path_or_buf))
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["time", "value"]:
        raise UsageError(f"expected CSV header 'time,value', got {header}")
    rows = [(float(r[0]), float(r[1])) for r in reader]
    if not rows:
        raise UsageError("CSV holds no data rows")
    arr = np.array(rows)
    return TimeSeries(arr[:, 0], arr[:, 1])


def format_csv(header, columns, comments=()):
    """Render columns as CSV text; floats use repr so they round-trip exactly, ints stay ints."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([str(int(x)) if isinstance(x, (int, np.integer)) else repr(float(x))
                    for x in row])
    return buf.getvalue()


def write_series_csv(path, series, comments=()):
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(["time", "value"], [series.times, series.values], comments))


def write_trajectory_csv(path, times, traj, comments=()):
    traj = np.asarray(traj)
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(["time", "x", "y", "z"],
                            [times, traj[:, 0], traj[:, 1], traj[:, 2]], comments))
