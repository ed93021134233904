"""Experiment configuration in a flat ``key = value`` text format.

Values are JSON literals (numbers, strings, ``null``, nested lists for
vectors and matrices). ``#`` starts a comment line. The defaults reproduce
the reference simulation setup.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError

SPARSE = "sparse"
BASELINE = "baseline"


def _default_truth():
    return [[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0]]


@dataclass
class ExperimentConfig:
    m: int = 10
    horizon: int = 12
    t_end: int = 20
    n_u: int = 1
    n_y: int = 1
    w_bar: list = field(default_factory=lambda: [0.1])
    epsilon: float = 0.1
    E: list = field(default_factory=lambda: [[1.0]])
    p: list = field(default_factory=lambda: [5.0])
    C: list = field(default_factory=lambda: [[1.0], [-1.0]])
    g: list = field(default_factory=lambda: [1.0, 1.0])
    Q: list = field(default_factory=lambda: [[20.0]])
    S: list = field(default_factory=lambda: [[2.0]])
    prior_mean: list = field(default_factory=lambda: [1.0] * 10)
    prior_variance: float = 0.1
    phi0: list = field(default_factory=lambda: [0.1] * 10)
    fps_lower: float = -3.0
    fps_upper: float = 3.0
    truth: list = field(default_factory=_default_truth)
    k_bar: int = 2
    q: int | None = None
    delta_bar: float = 0.1
    c_tilde: float = 1.0
    c_bar: float = 2.0 * math.sqrt(2.0)
    offline_seed: int = 0
    run_seed_base: int = 1000
    mode: str = SPARSE
    n_runs: int = 100
    robustification: str = "dual"
    fsps_shape: str = "box"
    prune_cap: int = 120
    backend: str = "clarabel"
    check_candidate: bool = True

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------- derived

    @property
    def dim(self):
        return self.n_u * self.m

    @property
    def kappa(self):
        return math.sqrt((1.0 - self.epsilon) / self.epsilon)

    def truth_matrix(self):
        return np.atleast_2d(np.asarray(self.truth, dtype=float))

    def prior_covariance(self):
        v = np.asarray(self.prior_variance, dtype=float)
        n = self.n_y * self.dim
        return float(v) * np.eye(n) if v.ndim == 0 else v.reshape(n, n)

    def fps_bounds(self):
        n = self.n_y * self.dim
        lo = np.broadcast_to(np.asarray(self.fps_lower, dtype=float), (n,)).copy()
        hi = np.broadcast_to(np.asarray(self.fps_upper, dtype=float), (n,)).copy()
        return lo, hi

    # ---------------------------------------------------------- validation

    def validate(self):
        try:
            H = self.truth_matrix()
            if H.shape != (self.n_y, self.dim):
                raise ConfigError(f"truth has shape {H.shape}, expected {(self.n_y, self.dim)}")
            if len(self.w_bar) != self.n_y:
                raise ConfigError("w_bar needs one bound per output")
            if not 0.0 < self.epsilon < 1.0:
                raise ConfigError("epsilon must lie in (0, 1)")
            if self.horizon <= self.m:
                raise ConfigError(f"horizon {self.horizon} must exceed m = {self.m}")
            if self.t_end < 0 or self.n_runs < 1:
                raise ConfigError("t_end must be >= 0 and n_runs >= 1")
            if len(self.prior_mean) != self.n_y * self.dim or len(self.phi0) != self.dim:
                raise ConfigError("prior mean or initial regressor has the wrong length")
            if self.mode not in (SPARSE, BASELINE):
                raise ConfigError(f"mode must be {SPARSE!r} or {BASELINE!r}")
            if self.robustification not in ("dual", "vertex"):
                raise ConfigError("robustification must be 'dual' or 'vertex'")
            if self.fsps_shape not in ("box", "ball"):
                raise ConfigError("fsps_shape must be 'box' or 'ball'")
            if self.backend not in ("clarabel", "cvxopt"):
                raise ConfigError("backend must be 'clarabel' or 'cvxopt'")
            self.prior_covariance()
            self.fps_bounds()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # ---------------------------------------------------------- persistence

    def to_text(self) -> str:
        lines = ["# experiment configuration: key = JSON literal"]
        for f in fields(self):
            lines.append(f"{f.name} = {json.dumps(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"line {n}: expected 'key = value'")
            if key not in known:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            try:
                values[key] = json.loads(value.strip())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {n}: cannot parse value for {key!r}: {exc}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
        return cls.from_text(text)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
