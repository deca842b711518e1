"""Experiment configuration: one flat, serializable record of every knob."""
from __future__ import annotations

import hashlib
import json
import os
from typing import Optional
from dataclasses import asdict, dataclass, fields, replace

from .exceptions import ConfigurationError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

CONFIG_ENV = "LATENTDYN_CONFIG"


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    ic: tuple = (0.0, 1.0, 1.05)
    dt: float = 0.05
    n_steps: int = 10200
    eta: float = 0.0
    data_seed: int = 7
    train_end: float = 490.0
    val_end: float = 500.0
    test_end: float = 510.0
    # embedding
    m: int = 6
    tau: float = 0.1
    epsilon: float = 0.01
    alpha: float = 0.1
    r_tol: float = 10.0
    a_tol: float = 2.0
    ratio_test: str = "kennel"
    fnn_cap: int = 4096
    # networks
    width: int = 32
    blocks_u: int = 3
    blocks_e: int = 5
    blocks_d: int = 5
    blocks_f: int = 5
    dropout: float = 0.1
    dropout_u: Optional[float] = None  # None: same as ``dropout``
    corruption: float = 0.5
    # training
    S: int = 128
    M: int = 64
    lambda_u: float = 1.0
    lambda_e1: float = 1.0
    lambda_e2: float = 1.0
    lambda_f: float = 1.0
    lr: float = 1e-3
    lr_u: Optional[float] = None  # None: same as ``lr``
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    phase1_iters: int = 15000
    phase2_iters: int = 15000
    val_every: int = 10
    seed: int = 0
    # inference / evaluation
    infer_iters: int = 500
    infer_window: float = 1.0
    horizon_tol: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ic", tuple(float(c) for c in self.ic))
        if len(self.ic) != 3:
            raise ConfigurationError("ic must have three components")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")
        for name in ("lambda_u", "lambda_e1", "lambda_e2", "lambda_f"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.M < 2:
            raise ConfigurationError("M must be >= 2")
        if self.S < 1:
            raise ConfigurationError("S must be >= 1")
        if not self.train_end < self.val_end <= self.test_end:
            raise ConfigurationError("need train_end < val_end <= test_end")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ConfigurationError("phase lengths must be >= 0")

    @classmethod
    def full(cls, **kw):
        """The long protocol: 490 training time units over 128 segments."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        """Laptop-scale protocol: 60 time units, 8 segments, about eight minutes on one core."""
        base = dict(n_steps=1400, train_end=60.0, val_end=62.0, test_end=70.0, S=8, width=48,
                    dropout=0.0, dropout_u=0.0, lr_u=1e-2, lambda_u=0.1,
                    phase1_iters=8000, phase2_iters=1500, val_every=10)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["ic"] = list(self.ic)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self):
        """Short content hash used to tag every output file."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path):
    """Read a JSON or TOML file; ``preset = "desk"`` selects the base preset."""
    path = os.fspath(path)
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    else:
        with open(path) as fh:
            d = json.load(fh)
    preset = d.pop("preset", "full")
    if preset == "desk":
        return ExperimentConfig.desk(**d)
    if preset == "full":
        return ExperimentConfig.from_dict(d)
    raise ConfigurationError(f"unknown preset {preset!r}")


def save_config(path, cfg):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
