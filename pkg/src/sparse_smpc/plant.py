"""True FIR plant, regressor shift dynamics and bounded disturbances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


@dataclass(frozen=True)
class ImpulseResponse:
    """FIR coefficient matrix of shape ``(n_y, n_u * m)``.

    Row ``i`` holds the impulse response of output ``i`` to every input,
    ordered like the regressor: ``[u_1(t-1) .. u_1(t-m), u_2(t-1) ..]``.
    ``sparsity_index`` bounds the number of nonzeros in any row.
    """

    coefficients: np.ndarray
    sparsity_index: int | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if not np.all(np.isfinite(H)):
            raise ValueError("impulse response coefficients must be finite")
        k = H.shape[1] if self.sparsity_index is None else int(self.sparsity_index)
        nnz = np.count_nonzero(H, axis=1)
        if np.any(nnz > k):
            raise ValueError(f"row with {int(nnz.max())} nonzeros exceeds sparsity index {k}")
        H.setflags(write=False)
        object.__setattr__(self, "coefficients", H)
        object.__setattr__(self, "sparsity_index", k)

    @property
    def n_y(self):
        return self.coefficients.shape[0]

    @property
    def dim(self):
        return self.coefficients.shape[1]

    def vectorized(self):
        """Row-major stacking ``[H_1, .., H_{n_y}]`` used by the estimator and the FPS."""
        return self.coefficients.reshape(-1).copy()


@dataclass(frozen=True)
class DisturbanceModel:
    """Zero-mean, componentwise bounded disturbance ``|w_j| <= bounds[j]``.

    Only the symmetric uniform law is implemented; its variance is known
    analytically and is what the chance-constraint tightening consumes.
    """

    bounds: np.ndarray
    distribution: str = "uniform"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.bounds, dtype=float))
        if np.any(w < 0):
            raise ValueError("disturbance bounds must be nonnegative")
        if self.distribution != "uniform":
            raise ValueError(f"unsupported disturbance distribution {self.distribution!r}")
        object.__setattr__(self, "bounds", w)

    @property
    def n_y(self):
        return self.bounds.size

    @property
    def variance(self):
        # U[-a, a] has variance a^2 / 3
        return np.diag(self.bounds**2 / 3.0)


@dataclass(frozen=True)
class ShiftOperators:
    W: np.ndarray
    Z: np.ndarray
    n_u: int
    m: int

    @property
    def dim(self):
        return self.n_u * self.m

    @property
    def steady_state_map(self):
        """``(I - W)^-1 Z``: the regressor that holds constant inputs forever."""
        return np.linalg.solve(np.eye(self.dim) - self.W, self.Z)


def build_shift_operators(n_u: int, m: int) -> ShiftOperators:
    if n_u < 1 or m < 1:
        raise ValueError("n_u and m must be at least 1")
    qbar = np.eye(m, k=-1)
    z = np.zeros((m, 1))
    z[0, 0] = 1.0
    W = np.kron(np.eye(n_u), qbar)
    Z = np.kron(np.eye(n_u), z)
    return ShiftOperators(W, Z, int(n_u), int(m))


def step(truth: ImpulseResponse, phi, w) -> np.ndarray:
    """Plant output ``y = H phi + w``."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    H = truth.coefficients
    if phi.size != H.shape[1]:
        raise DimensionMismatch(f"regressor length {phi.size} != {H.shape[1]}")
    if w.size != H.shape[0]:
        raise DimensionMismatch(f"disturbance length {w.size} != {H.shape[0]}")
    return H @ phi + w


def shift_regressor(ops: ShiftOperators, phi, u) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if phi.size != ops.dim or u.size != ops.n_u:
        raise DimensionMismatch(f"expected regressor {ops.dim} / input {ops.n_u}, got {phi.size} / {u.size}")
    return ops.W @ phi + ops.Z @ u


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by integers, e.g. ``(seed_base, run_index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def sample_disturbance(model: DisturbanceModel, rng: np.random.Generator, size=None) -> np.ndarray:
    """One draw of shape ``(n_y,)``, or ``(size, n_y)`` when ``size`` is given."""
    shape = (model.n_y,) if size is None else (int(size), model.n_y)
    return model.bounds * rng.uniform(-1.0, 1.0, size=shape)
