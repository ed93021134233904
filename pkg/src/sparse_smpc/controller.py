"""Per-step stochastic MPC with robust, distributionally tightened output constraints.

Decision vector layout: ``[U, lam]`` where ``U`` stacks the ``N`` planned inputs
and ``lam`` (dual mode only) holds one multiplier vector per prediction step
and output-constraint row. Robustness over the feasible parameter set
``{h : A_p h <= b_p}`` uses LP duality: ``max_h d(U)'h <= r`` holds iff some
``lam >= 0`` has ``A_p' lam = d(U)`` and ``b_p' lam <= r``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .conic import (ConicProgram, ResidualReport, SocBlock, SolverTolerances, Status, format_program, maybe_dump,
                    solve, verify)
from .errors import ConfigError, DimensionMismatch, InfeasibleAtRuntime, SolverFailure
from .plant import ShiftOperators
from .polytope import LpModel, Polytope, enumerate_vertices

logger = logging.getLogger(__name__)

DUAL = "dual"
VERTEX = "vertex"


def _pd(M, name):
    if M.shape[0] != M.shape[1]:
        raise ConfigError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ConfigError(f"{name} must be symmetric positive definite")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int
    Q: np.ndarray
    S: np.ndarray
    epsilon: float
    E: np.ndarray
    p: np.ndarray
    C: np.ndarray
    g: np.ndarray
    mode: str = DUAL

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        E = np.atleast_2d(np.asarray(self.E, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float)).reshape(-1)
        g = np.atleast_1d(np.asarray(self.g, dtype=float)).reshape(-1)
        _pd(Q, "Q")
        _pd(S, "S")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"violation probability must lie in (0, 1), got {self.epsilon}")
        if E.shape[0] != p.size:
            raise ConfigError(f"{E.shape[0]} output-constraint rows but {p.size} bounds")
        if E.shape[1] != Q.shape[0]:
            raise ConfigError("output constraint and output weight disagree on n_y")
        if C.shape[0] != g.size or C.shape[1] != S.shape[0]:
            raise ConfigError("input constraint shape disagrees with the input weight")
        if self.mode not in (DUAL, VERTEX):
            raise ConfigError(f"unknown robustification mode {self.mode!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        for name, val in (("Q", Q), ("S", S), ("E", E), ("C", C), ("p", p), ("g", g)):
            object.__setattr__(self, name, val)

    @property
    def kappa(self):
        return math.sqrt((1.0 - self.epsilon) / self.epsilon)

    @property
    def n_y(self):
        return self.Q.shape[0]

    @property
    def n_u(self):
        return self.S.shape[0]


@dataclass(frozen=True)
class AppendedCovariance:
    """Covariance of ``[H' e, e w, .]`` acting on ``[phi; 1; 1]``.

    Only the disturbance slot is populated by default, so the tightening
    ``kappa * sqrt(phibar' Gamma phibar)`` does not depend on the regressor.
    """

    gamma: np.ndarray
    dim: int

    @property
    def regressor_free(self):
        g = self.gamma
        d = self.dim
        return not (np.any(g[:d, :]) or np.any(g[:, :d]))

    def constant_term(self):
        """``sqrt(phibar' Gamma phibar)`` when it does not depend on ``phi``."""
        tail = self.gamma[self.dim:, self.dim:]
        return math.sqrt(max(float(np.sum(tail)), 0.0))

    def factor(self):
        """``L`` with ``L' L = Gamma``."""
        w, V = np.linalg.eigh(0.5 * (self.gamma + self.gamma.T))
        keep = w > 1e-15 * max(1.0, float(np.max(np.abs(w))))
        return (V[:, keep] * np.sqrt(w[keep])).T

    def evaluate(self, phi):
        bar = np.concatenate([np.asarray(phi, dtype=float).reshape(-1), [1.0, 1.0]])
        return math.sqrt(max(float(bar @ self.gamma @ bar), 0.0))


def build_gamma(e_row, noise_variance, dim: int, regressor_cov=None) -> AppendedCovariance:
    e = np.atleast_1d(np.asarray(e_row, dtype=float)).reshape(-1)
    sigma = np.atleast_2d(np.asarray(noise_variance, dtype=float))
    if sigma.shape != (e.size, e.size):
        raise DimensionMismatch(f"noise variance {sigma.shape} does not match constraint row of length {e.size}")
    if np.min(np.linalg.eigvalsh(0.5 * (sigma + sigma.T))) < -1e-12:
        raise ValueError("noise variance must be positive semidefinite")
    gamma = np.zeros((dim + 2, dim + 2))
    gamma[dim, dim] = float(e @ sigma @ e)
    if regressor_cov is not None:
        gamma[:dim, :dim] = np.asarray(regressor_cov, dtype=float)
    return AppendedCovariance(gamma, dim)


# ---------------------------------------------------------------- prediction


def prediction_matrices(ops: ShiftOperators, phi0, N: int):
    """``Phi(t+k|t) = A[k-1] @ U + c[k-1]`` for ``k = 1..N``.

    Returns arrays of shape ``(N, dim, N*n_u)`` and ``(N, dim)``.
    """
    phi0 = np.asarray(phi0, dtype=float).reshape(-1)
    if phi0.size != ops.dim:
        raise DimensionMismatch(f"regressor of length {phi0.size}, expected {ops.dim}")
    dim, n_u = ops.dim, ops.n_u
    A = np.zeros((N, dim, N * n_u))
    c = np.zeros((N, dim))
    A_prev = np.zeros((dim, N * n_u))
    c_prev = phi0
    for k in range(N):
        A_k = ops.W @ A_prev
        A_k[:, k * n_u:(k + 1) * n_u] += ops.Z
        A[k] = A_k
        c[k] = ops.W @ c_prev
        A_prev, c_prev = A_k, c[k]
    return A, c


def predict_regressors(phi0, U, ops: ShiftOperators, N: int) -> np.ndarray:
    U = np.asarray(U, dtype=float).reshape(-1)
    if U.size != N * ops.n_u:
        raise DimensionMismatch(f"input sequence of length {U.size}, expected {N * ops.n_u}")
    A, c = prediction_matrices(ops, phi0, N)
    return A @ U + c


def terminal_constraint_rows(ops: ShiftOperators, N: int, phi0=None):
    """Equalities ``(G_eq, h_eq)`` on ``U`` encoding ``Phi(t+N|t) = (I - W)^-1 Z u(t+N-1|t)``.

    Rows that vanish identically are dropped.
    """
    phi0 = np.zeros(ops.dim) if phi0 is None else phi0
    A, c = prediction_matrices(ops, phi0, N)
    n_u = ops.n_u
    last = np.zeros((n_u, N * n_u))
    last[:, (N - 1) * n_u:] = np.eye(n_u)
    G = A[-1] - ops.steady_state_map @ last
    h = -c[-1]
    keep = np.any(G != 0, axis=1) | (h != 0)
    return G[keep], h[keep]


# ---------------------------------------------------------------- robust rows


@dataclass
class _Block:
    """Rows to append to a program, already expressed over the full decision vector."""

    G: list = field(default_factory=list)
    h: list = field(default_factory=list)
    A: list = field(default_factory=list)
    b: list = field(default_factory=list)
    soc: list = field(default_factory=list)


def _lift_rows(e, A_k, c_k):
    """Direction ``kron(e, Phi_k)`` over ``h`` as ``D @ U + d``."""
    e = e.reshape(-1, 1)
    return np.kron(e, A_k), np.kron(e, c_k[:, None]).reshape(-1)


def robust_output_rows(fps: Polytope, gammas, kappa: float, E, p, A, c, mode: str = DUAL,
                       n_total: int | None = None, lam_offset: int | None = None) -> _Block:
    """Constraint rows robustifying ``E y(k|t) <= p`` over ``fps`` for every prediction step.

    ``A, c`` come from :func:`prediction_matrices`. In dual mode the multipliers
    occupy ``[lam_offset, lam_offset + N * n_rows(E) * fps.n_rows)`` of the
    decision vector.
    """
    E = np.atleast_2d(E)
    p = np.atleast_1d(p)
    N, dim, n_U = A.shape
    n_total = n_U if n_total is None else n_total
    blk = _Block()
    verts = enumerate_vertices(fps) if mode == VERTEX else None
    n_rows = fps.n_rows
    for k in range(N):
        for r, e in enumerate(E):
            D, d = _lift_rows(e, A[k], c[k])
            gam = gammas[r]
            if mode == DUAL:
                start = lam_offset + (k * E.shape[0] + r) * n_rows
                sl = slice(start, start + n_rows)
                eq = np.zeros((fps.dim, n_total))
                eq[:, sl] = fps.A.T
                eq[:, :n_U] -= D
                blk.A.append(eq)
                blk.b.append(d)
                lin = np.zeros(n_total)
                lin[sl] = fps.b
                _append_tightened(blk, gam, kappa, p[r], lin, 0.0, A[k], c[k], n_total)
            else:
                for v in verts:
                    lin = np.zeros(n_total)
                    lin[:n_U] = v @ D
                    _append_tightened(blk, gam, kappa, p[r], lin, float(v @ d), A[k], c[k], n_total)
    return blk


def _append_tightened(blk, gam: AppendedCovariance, kappa, p, lin, lin0, A_k, c_k, n_total):
    """``kappa * sqrt(phibar' Gamma phibar) + lin'x + lin0 <= p``."""
    if gam.regressor_free:
        blk.G.append(lin[None, :])
        blk.h.append(np.array([p - lin0 - kappa * gam.constant_term()]))
        return
    L = gam.factor()
    dim = gam.dim
    F = np.zeros((L.shape[0], n_total))
    F[:, :A_k.shape[1]] = kappa * L[:, :dim] @ A_k
    f = kappa * (L[:, :dim] @ c_k + L[:, dim] + L[:, dim + 1])
    blk.soc.append(SocBlock(F, f, -lin, p - lin0))


# ---------------------------------------------------------------- program


@dataclass
class MpcLayout:
    N: int
    n_u: int
    n_lam: int
    lam_rows: int
    n_E: int

    @property
    def n_U(self):
        return self.N * self.n_u

    @property
    def n(self):
        return self.n_U + self.n_lam


def build_mpc(mu, fps: Polytope, phi, y, config: MpcConfig, ops: ShiftOperators, gammas):
    """Assemble the per-step program; returns ``(ConicProgram, MpcLayout, (A, c))``."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    N, n_u = config.horizon, ops.n_u
    if mu.shape != (config.n_y, ops.dim):
        raise DimensionMismatch(f"point estimate {mu.shape}, expected {(config.n_y, ops.dim)}")
    if y.size != config.n_y:
        raise DimensionMismatch(f"measurement of length {y.size}, expected {config.n_y}")
    if fps.dim != config.n_y * ops.dim:
        raise DimensionMismatch("feasible parameter set has the wrong dimension")
    A, c = prediction_matrices(ops, phi, N)
    n_E = config.E.shape[0]
    n_lam = N * n_E * fps.n_rows if config.mode == DUAL else 0
    layout = MpcLayout(N, n_u, n_lam, fps.n_rows, n_E)
    n = layout.n

    Q = config.Q
    M = np.einsum("ij,kjl->kil", mu, A)
    m0 = c @ mu.T
    P = np.zeros((n, n))
    q = np.zeros(n)
    P[:N * n_u, :N * n_u] = 2.0 * (np.einsum("kia,ij,kjb->ab", M, Q, M) + np.kron(np.eye(N), config.S))
    q[:N * n_u] = 2.0 * np.einsum("kia,ij,kj->a", M, Q, m0)
    constant = float(np.einsum("ki,ij,kj->", m0, Q, m0) + y @ Q @ y)

    G_in = np.zeros((N * config.C.shape[0], n))
    G_in[:, :N * n_u] = np.kron(np.eye(N), config.C)
    h_in = np.tile(config.g, N)
    G_term, h_term = terminal_constraint_rows(ops, N, phi)
    A_term = np.zeros((G_term.shape[0], n))
    A_term[:, :N * n_u] = G_term

    blk = robust_output_rows(fps, gammas, config.kappa, config.E, config.p, A, c, config.mode,
                             n_total=n, lam_offset=N * n_u)
    G_parts = [G_in] + blk.G
    h_parts = [h_in] + blk.h
    if n_lam:
        G_parts.append(np.hstack([np.zeros((n_lam, N * n_u)), -np.eye(n_lam)]))
        h_parts.append(np.zeros(n_lam))
    prog = ConicProgram(
        n, P=P, q=q,
        G=np.vstack(G_parts), h=np.concatenate(h_parts),
        A=np.vstack([A_term] + blk.A), b=np.concatenate([h_term] + blk.b),
        soc=blk.soc, constant=constant,
    )
    return prog, layout, (A, c)


@dataclass
class ControlSolution:
    input_sequence: np.ndarray
    predicted_regressors: np.ndarray
    nominal_outputs: np.ndarray
    objective_value: float
    status: Status
    primal: np.ndarray | None = None


class SmpcController:
    """Receding-horizon controller; one instance per closed-loop run."""

    def __init__(self, config: MpcConfig, ops: ShiftOperators, noise_variance,
                 tolerances: SolverTolerances | None = None, backend: str = "clarabel",
                 regressor_cov=None):
        if config.horizon <= ops.m:
            raise ConfigError(f"horizon {config.horizon} must exceed the FIR length {ops.m}")
        if config.n_u != ops.n_u:
            raise ConfigError("input weight and shift operators disagree on n_u")
        self.config = config
        self.ops = ops
        self.tolerances = tolerances or SolverTolerances()
        self.backend = backend
        self.gammas = [build_gamma(e, noise_variance, ops.dim, regressor_cov) for e in config.E]
        self._u_center = _input_center(config.C, config.g)

    def build(self, mu, fps, phi, y):
        return build_mpc(mu, fps, phi, y, self.config, self.ops, self.gammas)

    def solve_step(self, mu, fps: Polytope, phi, y, t: int | None = None):
        """Solve at the current step; returns ``(u(t), ControlSolution)``."""
        prog, layout, (A, c) = self.build(mu, fps, phi, y)
        try:
            sol = solve(prog, self.tolerances, backend=self.backend)
        except SolverFailure:
            sol = None
        if sol is None or not sol.optimal:
            status = "solver failure" if sol is None else sol.status.value
            path = maybe_dump(prog, f"mpc_t{t}")
            raise InfeasibleAtRuntime(f"MPC problem not solved at t={t}: {status}", t=t, dump=path,
                                      program_text=format_program(prog))
        U = self._polish_terminal(sol.primal[:layout.n_U], phi).reshape(self.config.horizon, self.ops.n_u)
        U = np.vstack([self.enforce_inputs(u) for u in U])
        regs = A @ U.reshape(-1) + c
        mu = np.atleast_2d(mu)
        result = ControlSolution(U, regs, regs @ mu.T, sol.objective_value, sol.status, sol.primal)
        return U[0].copy(), result

    def _polish_terminal(self, U, phi):
        """Minimum-norm correction onto the terminal equalities (removes solver-level residue)."""
        G, h = terminal_constraint_rows(self.ops, self.config.horizon, phi)
        if G.shape[0] == 0:
            return U
        return U - np.linalg.lstsq(G, G @ U - h, rcond=None)[0]

    def enforce_inputs(self, u):
        """Make ``C u <= g`` hold exactly in floating point."""
        C, g = self.config.C, self.config.g
        u = np.asarray(u, dtype=float).copy()
        if np.all(C @ u <= g):
            return u
        for i, row in enumerate(C):
            nz = np.flatnonzero(row)
            if nz.size == 1:
                j = nz[0]
                bound = g[i] / row[j]
                u[j] = min(u[j], bound) if row[j] > 0 else max(u[j], bound)
        theta = 1.0
        while not np.all(C @ u <= g):
            # shrink toward a strictly feasible point
            theta *= 0.5 if theta < 1e-6 else (1.0 - 1e-9)
            u = self._u_center + theta * (u - self._u_center)
            if theta < 1e-12:
                return self._u_center.copy()
        return u

    def candidate_check(self, previous: ControlSolution, mu, fps: Polytope, phi, y,
                        tol: float = 1e-8) -> ResidualReport:
        """Verify the shifted previous plan with its last input repeated at the new step."""
        prog, layout, (A, c) = self.build(mu, fps, phi, y)
        U_prev = previous.input_sequence
        U = np.vstack([U_prev[1:], U_prev[-1:]]).reshape(-1)
        x = np.zeros(layout.n)
        x[:layout.n_U] = U
        if self.config.mode == DUAL:
            regs = A @ U + c
            model = LpModel(fps.A, fps.b)
            for k in range(layout.N):
                for r, e in enumerate(self.config.E):
                    _, _, lam = model.certificate(np.kron(e, regs[k]))
                    start = layout.n_U + (k * layout.n_E + r) * layout.lam_rows
                    x[start:start + layout.lam_rows] = lam
        return verify(prog, x, tol)


def _input_center(C, g):
    """Chebyshev center of ``{u : C u <= g}``; falls back to zero."""
    n = C.shape[1]
    norms = np.linalg.norm(C, axis=1)
    res = linprog(np.r_[np.zeros(n), -1.0], A_ub=np.hstack([C, norms[:, None]]), b_ub=g,
                  bounds=[(None, None)] * n + [(0, None)], method="highs")
    if res.status == 0 and res.x[-1] > 0:
        return res.x[:n]
    return np.zeros(n)
