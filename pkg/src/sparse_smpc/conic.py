"""Convex conic programs and the solver contract used across the package.

A :class:`ConicProgram` is

    minimize    1/2 x'Px + q'x + constant
    subject to  G x <= h
                A x  = b
                ||F_i x + f_i||_2 <= c_i'x + d_i   for every SOC block i

Two interior-point backends are wired in: Clarabel (default, fast) and the
dense cvxopt cone solvers. Both are driven through the same standard form
``K x + s = k, s in cone`` so residuals and statuses are computed here,
independently of the backend's own bookkeeping.
"""
from __future__ import annotations

import enum
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .errors import DimensionMismatch, NumericalBreakdown

logger = logging.getLogger(__name__)

BACKENDS = ("clarabel", "cvxopt")
DUMP_ENV = "SPARSE_SMPC_DUMP_DIR"


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True)
class SolverTolerances:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class SocBlock:
    """Second-order cone constraint ``||F x + f|| <= c'x + d``."""

    F: np.ndarray
    f: np.ndarray
    c: np.ndarray
    d: float

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        f = np.asarray(self.f, dtype=float).reshape(-1)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if F.shape[0] != f.size:
            raise DimensionMismatch(f"SOC block: F has {F.shape[0]} rows, f has {f.size}")
        if F.shape[1] != c.size:
            raise DimensionMismatch(f"SOC block: F has {F.shape[1]} cols, c has {c.size}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    @property
    def size(self):
        return self.F.shape[0] + 1


def _matrix(M, n, name):
    if M is None:
        return np.zeros((0, n))
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(1, -1) if M.size else M.reshape(0, n)
    if M.ndim != 2 or M.shape[1] != n:
        raise DimensionMismatch(f"{name} must have {n} columns, got shape {M.shape}")
    return M


def _vector(v, size, name):
    if v is None:
        return np.zeros(size)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {v.size}")
    return v


@dataclass
class ConicProgram:
    n: int
    P: np.ndarray | None = None
    q: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    soc: list = field(default_factory=list)
    constant: float = 0.0

    def __post_init__(self):
        n = self.n = int(self.n)
        if n < 1:
            raise DimensionMismatch("a program needs at least one variable")
        if self.P is None:
            self.P = np.zeros((n, n))
        else:
            P = np.asarray(self.P, dtype=float)
            if P.shape != (n, n):
                raise DimensionMismatch(f"P must be {n}x{n}, got {P.shape}")
            asym = np.max(np.abs(P - P.T)) if P.size else 0.0
            if asym > 1e-12 * max(1.0, np.max(np.abs(P))):
                raise ValueError(f"objective quadratic is not symmetric (max asymmetry {asym:.3e})")
            self.P = 0.5 * (P + P.T)
        self.q = _vector(self.q, n, "q")
        self.G = _matrix(self.G, n, "G")
        self.h = _vector(self.h, self.G.shape[0], "h")
        self.A = _matrix(self.A, n, "A")
        self.b = _vector(self.b, self.A.shape[0], "b")
        self.soc = list(self.soc)
        for blk in self.soc:
            if blk.F.shape[1] != n:
                raise DimensionMismatch(f"SOC block has {blk.F.shape[1]} columns, program has {n}")
        self.constant = float(self.constant)

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x + self.constant)

    def has_quadratic(self):
        return bool(np.any(self.P))

    def stacked(self):
        """Standard form ``K x + s = k`` with cone sizes ``(zero, nonneg, [soc...])``."""
        rows = [self.A, self.G]
        rhs = [self.b, self.h]
        for blk in self.soc:
            rows.append(np.vstack([-blk.c[None, :], -blk.F]))
            rhs.append(np.concatenate([[blk.d], blk.f]))
        K = np.vstack(rows) if rows else np.zeros((0, self.n))
        k = np.concatenate(rhs) if rhs else np.zeros(0)
        dims = (self.A.shape[0], self.G.shape[0], [blk.size for blk in self.soc])
        return K, k, dims


@dataclass
class Solution:
    status: Status
    primal: np.ndarray
    objective_value: float
    primal_residual: float
    dual_residual: float
    iterations: int = 0
    backend: str = ""

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL


@dataclass(frozen=True)
class ResidualReport:
    linear_inequality: float
    linear_equality: float
    soc: float
    tol: float

    @property
    def max_violation(self):
        return max(self.linear_inequality, self.linear_equality, self.soc)

    @property
    def passed(self):
        return self.max_violation <= self.tol


def verify(program: ConicProgram, candidate, tol: float = 1e-8) -> ResidualReport:
    """Absolute constraint violations of ``candidate``, per constraint class."""
    x = np.asarray(candidate, dtype=float).reshape(-1)
    if x.size != program.n:
        raise DimensionMismatch(f"candidate has length {x.size}, program has {program.n} variables")
    ineq = float(np.max(program.G @ x - program.h, initial=0.0))
    eq = float(np.max(np.abs(program.A @ x - program.b), initial=0.0))
    cone = 0.0
    for blk in program.soc:
        cone = max(cone, float(np.linalg.norm(blk.F @ x + blk.f) - (blk.c @ x + blk.d)))
    return ResidualReport(max(ineq, 0.0), eq, max(cone, 0.0), float(tol))


# ---------------------------------------------------------------- helpers


def _reduce_equalities(A, b, tol=1e-10):
    """Drop linearly dependent equality rows; return None if the system is inconsistent."""
    if A.shape[0] == 0:
        return A, b
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(1.0, diag[0]))) if diag.size else 0
    keep = np.sort(piv[:rank])
    Ak, bk = A[keep], b[keep]
    if rank < A.shape[0]:
        x0 = np.linalg.lstsq(Ak, bk, rcond=None)[0] if rank else np.zeros(A.shape[1])
        if np.max(np.abs(A @ x0 - b)) > 1e-9 * (1.0 + np.max(np.abs(b))):
            return None
    return Ak, bk


def _epigraph(program: ConicProgram) -> ConicProgram:
    """Rewrite 1/2 x'Px as a new variable t bounded through ||(Lx, t - 1/2)|| <= t + 1/2."""
    n = program.n
    w, V = np.linalg.eigh(program.P)
    keep = w > 1e-14 * max(1.0, np.max(np.abs(w)))
    L = (np.sqrt(w[keep])[:, None] * V[:, keep].T)
    F = np.zeros((L.shape[0] + 1, n + 1))
    F[: L.shape[0], :n] = L
    F[-1, n] = 1.0
    f = np.zeros(L.shape[0] + 1)
    f[-1] = -0.5
    c = np.zeros(n + 1)
    c[n] = 1.0
    pad = lambda M: np.hstack([M, np.zeros((M.shape[0], 1))])  # noqa: E731
    soc = [SocBlock(pad(blk.F), blk.f, np.append(blk.c, 0.0), blk.d) for blk in program.soc]
    soc.append(SocBlock(F, f, c, 0.5))
    return ConicProgram(
        n + 1,
        q=np.append(program.q, 1.0),
        G=pad(program.G),
        h=program.h,
        A=pad(program.A),
        b=program.b,
        soc=soc,
        constant=program.constant,
    )


def _epigraph_tolerances(tol):
    # An objective error e near a flat minimum moves the argmin by about sqrt(e).
    return SolverTolerances(tol.feas_tol, min(tol.gap_tol, tol.gap_tol ** 1.5), tol.max_iter)


def _residuals(program, K, k, x, z):
    viol = verify(program, x).max_violation
    primal = viol / (1.0 + np.max(np.abs(k), initial=0.0))
    if z is None:
        return primal, np.inf
    Px = program.P @ x
    Kz = K.T @ z
    r = Px + program.q + Kz
    scale = 1.0 + max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(program.q), initial=0.0),
                      np.max(np.abs(Kz), initial=0.0))
    return primal, float(np.max(np.abs(r), initial=0.0) / scale)


def _run_clarabel(program, K, k, dims, tol):
    import clarabel

    n_eq, n_lin, socs = dims
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_lin:
        cones.append(clarabel.NonnegativeConeT(n_lin))
    cones.extend(clarabel.SecondOrderConeT(s) for s in socs)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol.feas_tol
    settings.tol_gap_abs = tol.gap_tol
    settings.tol_gap_rel = tol.gap_tol
    settings.max_iter = int(tol.max_iter)
    P = sp.triu(sp.csc_matrix(program.P), format="csc")
    Ks = sp.csc_matrix(K) if K.shape[0] else sp.csc_matrix((0, program.n))
    sol = clarabel.DefaultSolver(P, program.q, Ks, k, cones, settings).solve()
    S = clarabel.SolverStatus
    if sol.status in (S.Solved, S.AlmostSolved):
        status = Status.OPTIMAL
    elif sol.status in (S.PrimalInfeasible, S.AlmostPrimalInfeasible):
        status = Status.INFEASIBLE
    elif sol.status in (S.DualInfeasible, S.AlmostDualInfeasible):
        status = Status.UNBOUNDED
    elif sol.status == S.NumericalError:
        raise NumericalBreakdown("clarabel reported a numerical error in the KKT system")
    else:
        status = Status.MAX_ITERATIONS
    return status, np.asarray(sol.x, dtype=float), np.asarray(sol.z, dtype=float), int(sol.iterations)


def _run_cvxopt(program, K, k, dims, tol):
    from cvxopt import matrix, solvers

    n_eq, n_lin, socs = dims
    options = {
        "show_progress": False,
        "abstol": tol.gap_tol,
        "reltol": tol.gap_tol,
        "feastol": tol.feas_tol,
        "maxiters": int(tol.max_iter),
    }
    A = matrix(K[:n_eq]) if n_eq else None
    b = matrix(k[:n_eq]) if n_eq else None
    G = matrix(K[n_eq:]) if K.shape[0] > n_eq else None
    h = matrix(k[n_eq:]) if K.shape[0] > n_eq else None
    cone_dims = {"l": n_lin, "q": [int(s) for s in socs], "s": []}
    quadratic = program.has_quadratic() or G is None
    free = scipy.linalg.null_space(np.vstack([program.P, K])) if program.n <= 2000 else np.zeros((program.n, 0))
    if free.shape[1]:
        if np.max(np.abs(free.T @ program.q)) > 1e-12 * (1.0 + np.max(np.abs(program.q))):
            return Status.UNBOUNDED, np.full(program.n, np.nan), None, 0
        raise NumericalBreakdown("cvxopt needs rank([P; A; G]) = n; a variable is unconstrained")
    try:
        if quadratic:
            res = solvers.coneqp(matrix(program.P), matrix(program.q), G, h, cone_dims, A, b,
                                 options=options)
        else:
            res = solvers.conelp(matrix(program.q), G, h, cone_dims, A, b, options=options)
    except (ArithmeticError, ValueError) as exc:
        if quadratic:
            # coneqp breaks down on infeasible data; the caller reclassifies via conelp.
            logger.debug("coneqp failed (%s); deferring to the epigraph form", exc)
            return Status.MAX_ITERATIONS, np.full(program.n, np.nan), None, 0
        raise NumericalBreakdown(f"cvxopt failed: {exc}") from exc
    raw = res["status"]
    status = {
        "optimal": Status.OPTIMAL,
        "primal infeasible": Status.INFEASIBLE,
        "dual infeasible": Status.UNBOUNDED,
    }.get(raw, Status.MAX_ITERATIONS)
    if status is Status.OPTIMAL or res["x"] is not None:
        x = np.array(res["x"]).reshape(-1)
    else:
        x = np.full(program.n, np.nan)
    z = None
    if res.get("z") is not None and res.get("x") is not None:
        parts = []
        if n_eq:
            parts.append(np.array(res["y"]).reshape(-1))
        if G is not None:
            parts.append(np.array(res["z"]).reshape(-1))
        z = np.concatenate(parts) if parts else np.zeros(0)
    return status, x, z, int(res.get("iterations", 0))


_RUNNERS = {"clarabel": _run_clarabel, "cvxopt": _run_cvxopt}


def solve(program: ConicProgram, tolerances: SolverTolerances | None = None, *,
          backend: str = "clarabel", native_quadratic: bool = True) -> Solution:
    """Solve ``program`` and classify the result at the given tolerances.

    ``native_quadratic=False`` moves the quadratic objective into an epigraph
    SOC constraint so that only a linear objective reaches the backend.
    """
    tol = tolerances or SolverTolerances()
    if backend not in _RUNNERS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    reduced = _reduce_equalities(program.A, program.b)
    n = program.n
    if reduced is None:
        return Solution(Status.INFEASIBLE, np.full(n, np.nan), np.nan, np.inf, np.inf, 0, backend)
    work = program
    if reduced[0].shape[0] != program.A.shape[0]:
        work = ConicProgram(n, program.P, program.q, program.G, program.h, reduced[0], reduced[1],
                            program.soc, program.constant)
    if not native_quadratic and work.has_quadratic():
        work = _epigraph(work)
        tol = _epigraph_tolerances(tol)
    K, k, dims = work.stacked()
    status, x, z, iters = _RUNNERS[backend](work, K, k, dims, tol)
    if backend == "cvxopt" and status is Status.MAX_ITERATIONS and work.has_quadratic():
        # coneqp cannot certify infeasibility; conelp on the epigraph form can.
        epi = _epigraph(work)
        Ke, ke, de = epi.stacked()
        status_e, xe, ze, it_e = _run_cvxopt(epi, Ke, ke, de, _epigraph_tolerances(tol))
        if status_e is not Status.MAX_ITERATIONS:
            work, K, k, status, x, z, iters = epi, Ke, ke, status_e, xe, ze, iters + it_e
    if status is not Status.OPTIMAL:
        primal = x[:n] if x.size >= n else np.full(n, np.nan)
        return Solution(status, primal, np.nan, np.inf, np.inf, iters, backend)
    pres, dres = _residuals(work, K, k, x, z)
    xs = x[:n]
    if pres > tol.feas_tol or dres > tol.feas_tol:
        logger.debug("backend %s claimed optimality but residuals are %.2e / %.2e", backend, pres, dres)
        status = Status.MAX_ITERATIONS
    return Solution(status, xs, program.objective(xs), pres, dres, iters, backend)


# ---------------------------------------------------------------- debugging


def format_program(program: ConicProgram) -> str:
    """Plain-text, matrix-market-style rendering of every block of ``program``."""
    out = io.StringIO()
    out.write(f"% conic program: n={program.n} eq={program.A.shape[0]} "
              f"ineq={program.G.shape[0]} soc={len(program.soc)}\n")
    out.write(f"% constant {program.constant!r}\n")

    def block(name, M):
        buf = io.BytesIO()
        scipy.io.mmwrite(buf, np.atleast_2d(M), precision=17)
        out.write(f"% --- {name}\n")
        out.write(buf.getvalue().decode())

    block("P", program.P)
    block("q", program.q[:, None])
    if program.G.shape[0]:
        block("G", program.G)
        block("h", program.h[:, None])
    if program.A.shape[0]:
        block("A", program.A)
        block("b", program.b[:, None])
    for i, blk in enumerate(program.soc):
        block(f"soc{i}.F", blk.F)
        block(f"soc{i}.f", blk.f[:, None])
        block(f"soc{i}.c", blk.c[:, None])
        out.write(f"% soc{i}.d {blk.d!r}\n")
    return out.getvalue()


def dump_program(program: ConicProgram, path) -> str:
    text = format_program(program)
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)


def maybe_dump(program: ConicProgram, tag: str):
    """Write ``program`` to ``$SPARSE_SMPC_DUMP_DIR/<tag>.mtx`` when that variable is set."""
    directory = os.environ.get(DUMP_ENV)
    if not directory:
        return None
    os.makedirs(directory, exist_ok=True)
    return dump_program(program, os.path.join(directory, f"{tag}.mtx"))
