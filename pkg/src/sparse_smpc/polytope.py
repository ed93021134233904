"""Set-membership identification on H-representation polytopes.

The feasible parameter set lives in the space of vectorized impulse
responses ``h = [H_1, .., H_{n_y}]`` (rows stacked). Each measurement adds the
two halfspaces ``|y_j - H_j phi| <= wbar_j`` per output. Linear programs go to
HiGHS, through a reusable model for repeated queries.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import highspy
import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import (DimensionMismatch, DimensionTooLarge, EmptyDomain, InvalidBounds,
                     SolverFailure, UnboundedDirection)

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-9
DEFAULT_ROW_CAP = 120
VERTEX_DIM_LIMIT = 6


@dataclass(frozen=True)
class Polytope:
    """``{h : A h <= b}``. Values are immutable; every update returns a new polytope."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.size:
            raise DimensionMismatch(f"{A.shape[0]} normals but {b.size} offsets")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_rows(self):
        return self.A.shape[0]

    def contains(self, point, tol=MEMBERSHIP_TOL):
        return contains(self, point, tol)

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.dim != self.dim:
            raise DimensionMismatch("cannot intersect polytopes of different dimension")
        return Polytope(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]))

    def is_empty(self):
        return LpModel(self.A, self.b).maximize(np.zeros(self.dim))[0] == "infeasible"


class LpModel:
    """Reusable HiGHS model of ``{x : A x <= b}`` for repeated ``max d'x`` queries.

    Successive solves warm-start from the previous basis, which is what makes
    per-step pruning and certificate checks cheap.
    """

    def __init__(self, A, b):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        self.n_rows, self.dim = A.shape
        self._A = A
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("presolve", "off")
        inf = highspy.kHighsInf
        lp = highspy.HighsLp()
        lp.num_col_ = self.dim
        lp.num_row_ = self.n_rows
        lp.col_cost_ = np.zeros(self.dim)
        lp.col_lower_ = np.full(self.dim, -inf)
        lp.col_upper_ = np.full(self.dim, inf)
        lp.row_lower_ = np.full(self.n_rows, -inf)
        lp.row_upper_ = b.copy()
        M = sparse.csc_matrix(A)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = M.indptr
        lp.a_matrix_.index_ = M.indices
        lp.a_matrix_.value_ = M.data
        lp.sense_ = highspy.ObjSense.kMaximize
        h.passModel(lp)
        self._h = h
        self._cols = np.arange(self.dim, dtype=np.int32)

    def set_row_upper(self, i, value):
        self._h.changeRowBounds(int(i), -highspy.kHighsInf, float(value))

    def maximize(self, d):
        """``(status, value, maximizer, multipliers)``; status is one of
        ``"optimal"``, ``"infeasible"``, ``"unbounded"``, ``"error"``."""
        h = self._h
        h.changeColsCost(self.dim, self._cols, np.asarray(d, dtype=float))
        h.run()
        st = h.getModelStatus()
        if st == highspy.HighsModelStatus.kOptimal:
            sol = h.getSolution()
            lam = np.maximum(np.asarray(sol.row_dual), 0.0)
            return "optimal", float(h.getInfo().objective_function_value), np.asarray(sol.col_value), lam
        if st == highspy.HighsModelStatus.kInfeasible:
            return "infeasible", np.nan, None, None
        if st in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
            # cold re-solve to separate unbounded from infeasible
            h.clearSolver()
            h.run()
            if h.getModelStatus() == highspy.HighsModelStatus.kInfeasible:
                return "infeasible", np.nan, None, None
            return "unbounded", np.inf, None, None
        return "error", np.nan, None, None

    def certificate(self, d):
        """Support value, maximizer and polished multipliers; raises on failure."""
        d = np.asarray(d, dtype=float).reshape(-1)
        if d.size != self.dim:
            raise DimensionMismatch(f"direction of length {d.size} in a {self.dim}-dimensional set")
        status, value, x, lam = self.maximize(d)
        if status == "infeasible":
            raise EmptyDomain("support function of an empty polytope")
        if status == "unbounded":
            raise UnboundedDirection("polytope is unbounded in the requested direction")
        if status != "optimal":
            raise SolverFailure("support LP failed")
        return value, x, _polish_multipliers(self._A, d, lam)


# ---------------------------------------------------------------- construction


def init_fps(lower, upper) -> Polytope:
    lower = np.asarray(lower, dtype=float).reshape(-1)
    upper = np.asarray(upper, dtype=float).reshape(-1)
    if lower.size != upper.size:
        raise DimensionMismatch("lower and upper bounds differ in length")
    if np.any(lower > upper):
        raise InvalidBounds("lower bound exceeds upper bound")
    I = np.eye(lower.size)
    return Polytope(np.vstack([I, -I]), np.concatenate([upper, -lower]))


def add_measurement_cut(fps: Polytope, phi, y, w_bar) -> Polytope:
    """Intersect with ``H_j phi <= y_j + wbar_j`` and ``-H_j phi <= -y_j + wbar_j`` for every output."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    w_bar = np.atleast_1d(np.asarray(w_bar, dtype=float))
    n_y = y.size
    if w_bar.size != n_y or phi.size * n_y != fps.dim:
        raise DimensionMismatch(f"cut for {n_y} outputs with regressor {phi.size} does not fit dim {fps.dim}")
    rows, offsets = [], []
    vacuous = not np.any(phi)
    for j in range(n_y):
        a = np.zeros(fps.dim)
        a[j * phi.size:(j + 1) * phi.size] = phi
        for sign in (1.0, -1.0):
            off = sign * y[j] + w_bar[j]
            if vacuous and off >= 0:
                continue
            rows.append(sign * a)
            offsets.append(off)
    if not rows:
        return fps
    return Polytope(np.vstack([fps.A, rows]), np.concatenate([fps.b, offsets]))


# ---------------------------------------------------------------- queries


def contains(fps: Polytope, point, tol=MEMBERSHIP_TOL) -> bool:
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.size != fps.dim:
        raise DimensionMismatch(f"point of length {x.size} in a {fps.dim}-dimensional set")
    return bool(np.all(fps.A @ x <= fps.b + tol))


def support_certificate(fps: Polytope, direction):
    """``max d'h`` over the polytope, with maximizer and nonnegative dual multipliers.

    The multipliers ``lam`` satisfy ``A' lam = d`` and ``b' lam = value``.
    """
    return LpModel(fps.A, fps.b).certificate(direction)


def _polish_multipliers(A, d, lam):
    # re-solve A_S' lam_S = d on the active support so stationarity holds to rounding
    support = np.flatnonzero(lam > 0)
    if support.size == 0:
        return lam
    sol, *_ = np.linalg.lstsq(A[support].T, d, rcond=None)
    if np.all(sol >= 0) and np.linalg.norm(A[support].T @ sol - d, np.inf) < np.linalg.norm(A.T @ lam - d, np.inf):
        lam = np.zeros_like(lam)
        lam[support] = sol
    return lam


def support_function(fps: Polytope, direction) -> float:
    d = np.asarray(direction, dtype=float).reshape(-1)
    if d.size == fps.dim and not np.any(d):
        return 0.0
    return support_certificate(fps, d)[0]


def bounding_box(fps: Polytope):
    model = LpModel(fps.A, fps.b)
    lo = np.array([-model.certificate(-e)[0] for e in np.eye(fps.dim)])
    hi = np.array([model.certificate(e)[0] for e in np.eye(fps.dim)])
    return lo, hi


def chebyshev_center(fps: Polytope):
    """Center and radius of the largest inscribed ball (radius < 0 never returned)."""
    norms = np.linalg.norm(fps.A, axis=1)
    A = np.hstack([fps.A, norms[:, None]])
    c = np.zeros(fps.dim + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A, b_ub=fps.b, bounds=[(None, None)] * fps.dim + [(0.0, None)], method="highs")
    if res.status == 2:
        raise EmptyDomain("polytope is empty")
    if res.status != 0:
        raise SolverFailure(f"Chebyshev center LP failed: {res.message}")
    return res.x[:-1], float(res.x[-1])


def enumerate_vertices(fps: Polytope, max_dim: int = VERTEX_DIM_LIMIT, tol: float = 1e-9):
    """All vertices by brute force over active sets. A test oracle for small dimensions."""
    d = fps.dim
    if d > max_dim:
        raise DimensionTooLarge(f"vertex enumeration limited to dim <= {max_dim}, got {d}")
    found = []
    for rows in itertools.combinations(range(fps.n_rows), d):
        M = fps.A[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, fps.b[list(rows)])
        if np.all(fps.A @ v <= fps.b + tol) and not any(np.allclose(v, u, atol=1e-9) for u in found):
            found.append(v)
    return found


def sample_vertices(fps: Polytope, rng: np.random.Generator, n: int = 8):
    """LP maximizers for ``n`` random directions: extreme points used as nesting probes."""
    model = LpModel(fps.A, fps.b)
    return [model.certificate(rng.normal(size=fps.dim))[1] for _ in range(n)]


# ---------------------------------------------------------------- pruning


def _axis_rows(A):
    """Mask of rows that are (positive multiples of) +-e_j."""
    nz = np.count_nonzero(A, axis=1)
    return nz == 1


def _ray_certified(A, b, rng, n_rays):
    """Rows proven irredundant by shooting rays from an interior point.

    The first hyperplane a ray hits (uniquely) supports a facet, so its row
    cannot be dropped without enlarging the set.
    """
    certified = np.zeros(A.shape[0], dtype=bool)
    try:
        x0, r = chebyshev_center(Polytope(A, b))
    except EmptyDomain:
        return certified
    if r <= 1e-9:
        return certified
    slack = b - A @ x0
    D = rng.normal(size=(n_rays, A.shape[1]))
    rate = D @ A.T
    with np.errstate(divide="ignore", invalid="ignore"):
        hit = np.where(rate > 1e-14, slack[None, :] / rate, np.inf)
    order = np.argsort(hit, axis=1)[:, :2]
    first = hit[np.arange(n_rays), order[:, 0]]
    second = hit[np.arange(n_rays), order[:, 1]]
    unique = np.isfinite(first) & (second > first * (1 + 1e-7) + 1e-12)
    certified[order[unique, 0]] = True
    return certified


def _drop_duplicates(A, b):
    """Keep the tightest copy of parallel rows; drop vacuous zero rows."""
    norms = np.linalg.norm(A, axis=1)
    keep = []
    seen = {}
    for i in range(A.shape[0]):
        if norms[i] < 1e-14:
            if b[i] >= 0:
                continue  # 0 <= b: no information
            keep.append(i)
            continue
        key = tuple(np.round(A[i] / norms[i], 12))
        off = b[i] / norms[i]
        if key in seen:
            j = seen[key]
            if off < b[j] / norms[j]:
                keep[keep.index(j)] = i
                seen[key] = i
            continue
        seen[key] = i
        keep.append(i)
    return np.array(sorted(keep), dtype=int)


@dataclass(frozen=True)
class PruneReport:
    removed: int
    merged: int


def prune_with_report(fps: Polytope, cap: int = DEFAULT_ROW_CAP, tol: float = 1e-9, seed: int = 0):
    """Exact LP redundancy removal, then a conservative box merge if still over ``cap``.

    Row order is preserved (oldest first), which the overflow merge relies on.
    """
    if cap < 2 * fps.dim:
        raise ValueError(f"row cap {cap} below the {2 * fps.dim} rows of a bounding box")
    n0 = fps.n_rows
    idx = _drop_duplicates(fps.A, fps.b)
    A, b = fps.A[idx], fps.b[idx]
    rng = np.random.default_rng(seed)
    keep = np.ones(A.shape[0], dtype=bool)
    certified = _ray_certified(A, b, rng, n_rays=40 * A.shape[1])
    model = None
    for i in range(A.shape[0]):
        if certified[i] or keep.sum() <= 1:
            continue
        model = model or LpModel(A, b)
        # relax row i; it is redundant iff the rest already keep a_i'x <= b_i
        slack = 1.0 + abs(b[i])
        model.set_row_upper(i, b[i] + slack)
        status, value, _, _ = model.maximize(A[i])
        if status == "infeasible":
            break  # empty set: nothing meaningful to prune
        if status == "optimal" and value <= b[i] + tol * max(1.0, np.linalg.norm(A[i])):
            keep[i] = False
            model.set_row_upper(i, highspy.kHighsInf)
        else:
            model.set_row_upper(i, b[i])
    A, b = A[keep], b[keep]
    removed = n0 - A.shape[0]
    merged = 0
    if A.shape[0] > cap:
        A, b, merged = _merge_into_box(Polytope(A, b), cap)
    return Polytope(A, b), PruneReport(removed=removed, merged=merged)


def _merge_into_box(fps: Polytope, cap: int):
    """Replace the oldest non-box cuts by the polytope's bounding box (a superset)."""
    lo, hi = bounding_box(fps)
    axis = _axis_rows(fps.A)
    cuts = np.flatnonzero(~axis)
    budget = cap - 2 * fps.dim
    dropped = cuts[: max(0, cuts.size - budget)]
    kept = cuts[cuts.size - budget:] if budget > 0 else np.array([], dtype=int)
    I = np.eye(fps.dim)
    A = np.vstack([I, -I, fps.A[kept]])
    b = np.concatenate([hi, -lo, fps.b[kept]])
    logger.warning("FPS row cap %d exceeded: merged %d oldest cuts into the bounding box", cap, dropped.size)
    return A, b, int(dropped.size)


def prune_redundant(fps: Polytope, cap: int = DEFAULT_ROW_CAP) -> Polytope:
    return prune_with_report(fps, cap)[0]


@dataclass(frozen=True)
class FpsHistory:
    current: Polytope
    cut_count: int = 0
    pruned_count: int = 0
    merge_count: int = 0

    def update(self, phi, y, w_bar, cap: int = DEFAULT_ROW_CAP) -> "FpsHistory":
        cut = add_measurement_cut(self.current, phi, y, w_bar)
        added = cut.n_rows - self.current.n_rows
        pruned, report = prune_with_report(cut, cap)
        return replace(self, current=pruned, cut_count=self.cut_count + added,
                       pruned_count=self.pruned_count + report.removed,
                       merge_count=self.merge_count + report.merged)
