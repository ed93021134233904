"""Offline sparse identification: Gaussian regressors, BPDN and the sparse parameter set.

Each output row of the impulse response is recovered from ``q`` noisy
measurements ``y_i = A h_i + w_i`` by basis pursuit denoising

    minimize ||x||_1   subject to   ||A x - y_i||_2 <= sqrt(q) * wbar_i

and the recovered rows become the centers of l2 balls with radius
``Cbar * sqrt(q) * wbar_i`` that contain the true rows when ``A`` has a small
restricted isometry constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, SocBlock, SolverTolerances, Status, solve
from .errors import (DimensionMismatch, InfeasibleBudget, InvalidSparsity,
                     NoiseBudgetExceeded, SolverFailure)
from .plant import DisturbanceModel, ImpulseResponse

logger = logging.getLogger(__name__)

FSPS_FORMAT_VERSION = 1
DEFAULT_CBAR = 2.0 * math.sqrt(2.0)


def required_sample_count(k_bar: int, dim: int, delta_bar: float = 0.1, c_tilde: float = 1.0) -> int:
    """Number of Gaussian regressors for ``delta_{2k} < delta_bar`` with high probability.

    ``q = ceil(2 c_tilde k log(dim / 2k) / delta_bar^2)``, never below ``dim + 1``.
    """
    if k_bar < 1 or 2 * k_bar >= dim:
        raise InvalidSparsity(f"need 1 <= 2*k_bar < dim, got k_bar={k_bar}, dim={dim}")
    if not c_tilde > 0:
        raise InvalidSparsity(f"c_tilde must be positive, got {c_tilde}")
    if not 0 < delta_bar < math.sqrt(2) - 1:
        raise InvalidSparsity(f"delta_bar must lie in (0, sqrt(2)-1), got {delta_bar}")
    q = math.ceil(2.0 * c_tilde * k_bar * math.log(dim / (2.0 * k_bar)) / delta_bar**2)
    return max(q, dim + 1)


def generate_offline_regressors(q: int, n_u: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Sensing matrix with i.i.d. ``N(0, 1/q)`` entries, one regressor per row."""
    if q < 1:
        raise ValueError("q must be at least 1")
    return rng.normal(0.0, 1.0 / math.sqrt(q), size=(int(q), n_u * m))


def collect_offline_outputs(truth: ImpulseResponse, sensing: np.ndarray, disturbance: DisturbanceModel,
                            rng: np.random.Generator, max_resample: int = 100) -> np.ndarray:
    """Outputs ``Y`` with column ``i`` equal to ``sensing @ h_i + w_i``.

    Noise columns breaking ``||w_i|| <= sqrt(q) wbar_i`` are redrawn.
    """
    q, dim = sensing.shape
    if dim != truth.dim or disturbance.n_y != truth.n_y:
        raise DimensionMismatch("sensing matrix, truth and disturbance dimensions disagree")
    clean = sensing @ truth.coefficients.T
    Y = np.empty_like(clean)
    for i in range(truth.n_y):
        budget = math.sqrt(q) * disturbance.bounds[i]
        for _ in range(max_resample):
            w = disturbance.bounds[i] * rng.uniform(-1.0, 1.0, size=q)
            if np.linalg.norm(w) <= budget:
                break
        else:
            raise NoiseBudgetExceeded(f"noise column {i} exceeded its l2 budget {max_resample} times")
        Y[:, i] = clean[:, i] + w
    return Y


def bpdn_program(sensing: np.ndarray, y, budget: float) -> ConicProgram:
    """l1 epigraph form over ``[x, s]``: minimize sum(s), -s <= x <= s, ||A x - y|| <= budget."""
    q, dim = sensing.shape
    I = np.eye(dim)
    G = np.block([[I, -I], [-I, -I]])
    c = np.concatenate([np.zeros(dim), np.ones(dim)])
    F = np.hstack([sensing, np.zeros((q, dim))])
    y = np.asarray(y, dtype=float).reshape(-1)
    if budget > 0:
        return ConicProgram(2 * dim, q=c, G=G, h=np.zeros(2 * dim),
                            soc=[SocBlock(F, -y, np.zeros(2 * dim), budget)])
    # zero budget: the cone has no interior, state it as equalities
    return ConicProgram(2 * dim, q=c, G=G, h=np.zeros(2 * dim), A=F, b=y)


def bpdn_recover(sensing: np.ndarray, y, budget: float,
                 tolerances: SolverTolerances | None = None, backend: str = "clarabel") -> np.ndarray:
    sensing = np.atleast_2d(np.asarray(sensing, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != sensing.shape[0]:
        raise DimensionMismatch(f"{y.size} outputs for {sensing.shape[0]} regressors")
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    dim = sensing.shape[1]
    sol = solve(bpdn_program(sensing, y, budget), tolerances, backend=backend)
    if sol.status is Status.INFEASIBLE:
        raise InfeasibleBudget(f"no x with ||A x - y|| <= {budget:g}")
    if not sol.optimal:
        raise SolverFailure(f"BPDN solve ended with status {sol.status.value}")
    return sol.primal[:dim]


@dataclass
class OfflineDataset:
    sensing_matrix: np.ndarray
    outputs: np.ndarray

    @property
    def q(self):
        return self.sensing_matrix.shape[0]


@dataclass
class Fsps:
    """Feasible sparse parameter set: one l2 ball per output row.

    ``box_lower``/``box_upper`` give the tight l-infinity outer box of each ball.
    """

    centers: np.ndarray
    radii: np.ndarray
    constant_Cbar: float
    q: int
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if self.radii.size != self.centers.shape[0]:
            raise DimensionMismatch("one radius per recovered row is required")
        if np.any(self.radii < 0):
            raise ValueError("radii must be nonnegative")

    @property
    def n_y(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def box_lower(self):
        return self.centers - self.radii[:, None]

    @property
    def box_upper(self):
        return self.centers + self.radii[:, None]

    def ball_contains(self, H, tol=0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return bool(np.all(np.linalg.norm(H - self.centers, axis=1) <= self.radii + tol))

    def box_contains(self, H, tol=0.0):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return bool(np.all(H >= self.box_lower - tol) and np.all(H <= self.box_upper + tol))

    # ------------------------------------------------------------ persistence

    def to_text(self) -> str:
        lines = [
            "# feasible sparse parameter set",
            f"version = {FSPS_FORMAT_VERSION}",
            f"n_y = {self.n_y}",
            f"dim = {self.dim}",
            f"q = {self.q}",
            f"seed = {'none' if self.seed is None else self.seed}",
            f"constant_Cbar = {self.constant_Cbar!r}",
            "radii = " + " ".join(repr(float(r)) for r in self.radii),
        ]
        for i, row in enumerate(self.centers):
            lines.append(f"center[{i}] = " + " ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Fsps":
        fields = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed FSPS line: {raw!r}")
            fields[key.strip()] = value.strip()
        version = int(fields.get("version", -1))
        if version != FSPS_FORMAT_VERSION:
            raise ValueError(f"unsupported FSPS file version {version}")
        n_y, dim = int(fields["n_y"]), int(fields["dim"])
        centers = np.array([[float(v) for v in fields[f"center[{i}]"].split()] for i in range(n_y)])
        if centers.shape != (n_y, dim):
            raise ValueError("FSPS centers do not match the declared dimensions")
        seed = None if fields["seed"] == "none" else int(fields["seed"])
        radii = np.array([float(v) for v in fields["radii"].split()])
        return cls(centers, radii, float(fields["constant_Cbar"]), int(fields["q"]), seed)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Fsps":
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_fsps(centers, w_bar, q: int, c_bar: float = DEFAULT_CBAR, seed=None) -> Fsps:
    w_bar = np.atleast_1d(np.asarray(w_bar, dtype=float))
    radii = c_bar * math.sqrt(q) * w_bar
    return Fsps(np.atleast_2d(centers), radii, float(c_bar), int(q), seed)


def run_offline(truth: ImpulseResponse, disturbance: DisturbanceModel, n_u: int, m: int,
                rng: np.random.Generator, q: int | None = None, delta_bar: float = 0.1,
                c_tilde: float = 1.0, c_bar: float = DEFAULT_CBAR, seed=None,
                tolerances: SolverTolerances | None = None):
    """Collect offline data and recover every output row; returns ``(fsps, dataset)``."""
    if q is None:
        q = required_sample_count(truth.sparsity_index, n_u * m, delta_bar, c_tilde)
    sensing = generate_offline_regressors(q, n_u, m, rng)
    Y = collect_offline_outputs(truth, sensing, disturbance, rng)
    centers = np.vstack([
        bpdn_recover(sensing, Y[:, i], math.sqrt(q) * disturbance.bounds[i], tolerances)
        for i in range(truth.n_y)
    ])
    fsps = build_fsps(centers, disturbance.bounds, q, c_bar, seed)
    logger.info("offline phase: q=%d, radii=%s", q, np.array2string(fsps.radii, precision=4))
    return fsps, OfflineDataset(sensing, Y)


def rip_spot_check(sensing: np.ndarray, sparsity: int, delta: float, rng: np.random.Generator,
                   trials: int = 100) -> float:
    """Fraction of random unit ``sparsity``-sparse x with ``||A x|| in [1 - delta, 1 + delta]``.

    Probabilistic evidence only; certifying RIP is NP-hard.
    """
    dim = sensing.shape[1]
    hits = 0
    for _ in range(trials):
        x = np.zeros(dim)
        support = rng.choice(dim, size=sparsity, replace=False)
        x[support] = rng.normal(size=sparsity)
        x /= np.linalg.norm(x)
        ratio = np.linalg.norm(sensing @ x)
        hits += int(1.0 - delta <= ratio <= 1.0 + delta)
    return hits / trials
