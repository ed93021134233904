"""Recursive least squares on the vectorized impulse response and its constrained projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conic import ConicProgram, SocBlock, SolverTolerances, Status, solve
from .errors import DimensionMismatch, EmptyDomain, SingularInnovation, SolverFailure
from .plant import ImpulseResponse
from .polytope import LpModel, Polytope, contains
from .sparse_recovery import Fsps


@dataclass(frozen=True)
class RlsState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        P = np.asarray(self.covariance, dtype=float)
        if P.ndim == 0:
            P = float(P) * np.eye(mu.size)
        if P.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"covariance {P.shape} does not match mean of length {mu.size}")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", P)


def lift_regressor(phi, n_y: int) -> np.ndarray:
    """Block-diagonal ``diag(phi', .., phi')`` of shape ``(n_y, n_y * len(phi))``."""
    phi = np.asarray(phi, dtype=float).reshape(1, -1)
    return np.kron(np.eye(n_y), phi)


def rls_update(state: RlsState, phi, y, noise_cov) -> RlsState:
    """One Joseph-form RLS step for ``y = lift(phi) h + w`` with ``Cov(w) = noise_cov``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    phi = np.asarray(phi, dtype=float).reshape(-1)
    n_y = y.size
    if phi.size * n_y != state.mean.size:
        raise DimensionMismatch(f"regressor {phi.size} x {n_y} outputs != state size {state.mean.size}")
    if not np.any(phi):
        return state
    R = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    Hm = lift_regressor(phi, n_y)
    P = state.covariance
    PHt = P @ Hm.T
    # Phi P Phi' is PSD in exact arithmetic; drop rounding-level negative parts
    w, V = np.linalg.eigh(0.5 * (Hm @ PHt + (Hm @ PHt).T))
    S = (V * np.maximum(w, 0.0)) @ V.T + R
    try:
        cho = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    K = np.linalg.solve(cho.T, np.linalg.solve(cho, PHt.T)).T
    mean = state.mean + K @ (y - Hm @ state.mean)
    IKH = np.eye(P.shape[0]) - K @ Hm
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return RlsState(mean, 0.5 * (P + P.T))


@dataclass(frozen=True)
class PointEstimateDomain:
    """Where the point estimate may live: the FPS, optionally cut by the sparse set.

    ``sparse_rows`` holds the informative rows of the sparse set's l-infinity
    outer box; with ``ball`` set the exact l2 balls are enforced as well.
    """

    fps: Polytope
    sparse_rows: Polytope | None = None
    fsps: Fsps | None = None
    shape: str = "box"

    @property
    def ball(self) -> Fsps | None:
        return self.fsps if self.shape == "ball" else None

    @property
    def fsps_box(self):
        """Per-row ``(lower, upper)`` intervals of the sparse set, or ``None`` in baseline mode."""
        return None if self.fsps is None else (self.fsps.box_lower, self.fsps.box_upper)

    @property
    def combined(self) -> Polytope:
        return self.fps if self.sparse_rows is None else self.fps.intersect(self.sparse_rows)

    def in_sparse_set(self, x, tol=0.0) -> bool:
        if self.sparse_rows is not None and not contains(self.sparse_rows, x, tol):
            return False
        return self.ball is None or self.ball.ball_contains(np.reshape(x, self.ball.centers.shape), tol)


def _box_rows(fsps: Fsps):
    dim = fsps.centers.size
    I = np.eye(dim)
    return np.vstack([I, -I]), np.concatenate([fsps.box_upper.reshape(-1), -fsps.box_lower.reshape(-1)])


def point_estimate_domain(fps: Polytope, fsps: Fsps | None = None, shape: str = "box") -> PointEstimateDomain:
    """``F(t)`` intersected with the sparse set (``shape`` ``"box"`` or ``"ball"``).

    Box rows already implied by the FPS are dropped, so an inactive sparse set
    leaves the domain identical to the FPS.
    """
    if shape not in ("box", "ball"):
        raise ValueError(f"unknown sparse set shape {shape!r}")
    if fsps is None:
        return PointEstimateDomain(fps)
    if fsps.centers.size != fps.dim:
        raise DimensionMismatch("sparse set and FPS live in different dimensions")
    A, b = _box_rows(fsps)
    model = LpModel(fps.A, fps.b)
    new = []
    for i in range(A.shape[0]):
        status, value, _, _ = model.maximize(A[i])
        if status == "infeasible":
            raise EmptyDomain("feasible parameter set is empty")
        if status != "optimal" or value > b[i]:
            new.append(i)
    rows = Polytope(A[new], b[new]) if new else None
    domain = PointEstimateDomain(fps, rows, fsps, shape)
    if rows is not None and domain.combined.is_empty():
        raise EmptyDomain("FPS and sparse parameter set do not intersect")
    return domain


def _weighted_projection(mu, M, poly: Polytope, ball: Fsps | None, tolerances):
    soc = []
    if ball is not None:
        d = ball.dim
        for i in range(ball.n_y):
            F = np.zeros((d, mu.size))
            F[:, i * d:(i + 1) * d] = np.eye(d)
            soc.append(SocBlock(F, -ball.centers[i], np.zeros(mu.size), ball.radii[i]))
    prog = ConicProgram(mu.size, P=M, q=-M @ mu, G=poly.A, h=poly.b, soc=soc, constant=0.5 * mu @ M @ mu)
    sol = solve(prog, tolerances)
    if sol.status is Status.INFEASIBLE:
        raise EmptyDomain("projection domain is empty")
    if not sol.optimal:
        raise SolverFailure(f"projection QP ended with status {sol.status.value}")
    return sol.primal


def project_mean(state: RlsState, domain: PointEstimateDomain,
                 tolerances: SolverTolerances | None = None) -> np.ndarray:
    """``argmin_X (X - mu)' P^-1 (X - mu)`` over the domain.

    The projection onto the FPS alone is computed first; when it already lies
    in the sparse set it is optimal for the intersection too, so the sparse
    constraints only enter the program when they bind.
    """
    mu = state.mean
    if domain.fps.contains(mu, 0.0) and domain.in_sparse_set(mu):
        return mu.copy()
    M = np.linalg.inv(state.covariance)
    M = 0.5 * (M + M.T)
    x = mu.copy() if domain.fps.contains(mu, 0.0) else _weighted_projection(mu, M, domain.fps, None, tolerances)
    if domain.in_sparse_set(x):
        return x
    return _weighted_projection(mu, M, domain.combined, domain.ball, tolerances)


def reshape_mean(vec, n_y: int, dim: int) -> ImpulseResponse:
    """Inverse of the row-major vectorization used by :func:`lift_regressor`."""
    v = np.asarray(vec, dtype=float).reshape(-1)
    if v.size != n_y * dim:
        raise DimensionMismatch(f"vector of length {v.size} cannot be reshaped to {n_y}x{dim}")
    return ImpulseResponse(v.reshape(n_y, dim))
