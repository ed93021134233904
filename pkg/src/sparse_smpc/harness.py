"""Closed-loop simulation, paired Monte Carlo comparison and result files."""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import BASELINE, SPARSE, ExperimentConfig
from .controller import MpcConfig, SmpcController
from .errors import EmptyDomain, InfeasibleAtRuntime, SmpcError
from .estimator import RlsState, point_estimate_domain, project_mean, rls_update
from .plant import (DisturbanceModel, ImpulseResponse, build_shift_operators, make_rng,
                    sample_disturbance, shift_regressor, step)
from .polytope import LpModel, add_measurement_cut, contains, init_fps, prune_with_report
from .sparse_recovery import Fsps, run_offline

logger = logging.getLogger(__name__)

NESTING_TOL = 1e-7
CANDIDATE_TOL = 1e-8


@dataclass
class TrajectoryLog:
    """One closed loop. Row ``t`` holds ``y(t)`` and the input applied at ``t``.

    The final row (``t = t_end``) records the last measurement only; its input is zero.
    """

    mode: str
    y: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    stage_cost: np.ndarray
    status: list
    fps_rows: np.ndarray
    estimate_error: np.ndarray
    truth_contained: np.ndarray
    nesting_ok: np.ndarray
    candidate_violation: np.ndarray
    accumulated_cost: float

    @property
    def t_end(self):
        return self.y.shape[0] - 1

    @property
    def candidate_ok(self):
        v = self.candidate_violation
        return bool(np.all(np.isnan(v) | (v <= CANDIDATE_TOL)))


def closed_loop_cost(log: TrajectoryLog, Q, S) -> float:
    Q = np.atleast_2d(Q)
    S = np.atleast_2d(S)
    terms = [float(y @ Q @ y + u @ S @ u) for y, u in zip(log.y, log.u)]
    return math.fsum(terms)


def make_controller(cfg: ExperimentConfig) -> SmpcController:
    mpc = MpcConfig(cfg.horizon, cfg.Q, cfg.S, cfg.epsilon, cfg.E, cfg.p, cfg.C, cfg.g, cfg.robustification)
    ops = build_shift_operators(cfg.n_u, cfg.m)
    noise = DisturbanceModel(cfg.w_bar)
    return SmpcController(mpc, ops, noise.variance, backend=cfg.backend)


def _nested(new, old, dropped_rows, rng):
    """Sampled and certified check that ``new`` lies inside ``old``."""
    model = LpModel(new.A, new.b)
    for _ in range(4):
        if not contains(old, model.certificate(rng.normal(size=new.dim))[1], NESTING_TOL):
            return False
    return all(model.certificate(a)[0] <= b + NESTING_TOL for a, b in dropped_rows)


def _dropped(old, new):
    kept = {tuple(r) + (o,) for r, o in zip(new.A, new.b)}
    return [(a, b) for a, b in zip(old.A, old.b) if tuple(a) + (b,) not in kept]


def run_closed_loop(cfg: ExperimentConfig, disturbances, fsps: Fsps | None = None,
                    mode: str | None = None, controller: SmpcController | None = None) -> TrajectoryLog:
    """Simulate ``t = 0..t_end`` with the given disturbance rows ``w(0..t_end)``.

    FPS and estimator updates start at ``t = 1``; the first input uses the prior.
    """
    mode = cfg.mode if mode is None else mode
    if (mode == SPARSE) != (fsps is not None):
        raise ValueError("an FSPS is required in sparse mode and only there")
    w = np.asarray(disturbances, dtype=float).reshape(-1, cfg.n_y)
    T = cfg.t_end
    if w.shape[0] < T + 1:
        raise ValueError(f"need {T + 1} disturbance samples, got {w.shape[0]}")
    truth = ImpulseResponse(cfg.truth_matrix(), cfg.k_bar)
    h_true = truth.vectorized()
    ctl = controller or make_controller(cfg)
    ops = ctl.ops
    noise_var = DisturbanceModel(cfg.w_bar).variance
    w_bar = np.asarray(cfg.w_bar, dtype=float)
    Q, S = np.atleast_2d(cfg.Q), np.atleast_2d(cfg.S)
    check_rng = make_rng(cfg.run_seed_base, 7919)

    ys = np.zeros((T + 1, cfg.n_y))
    us = np.zeros((T + 1, cfg.n_u))
    phis = np.zeros((T + 1, cfg.dim))
    stage = np.zeros(T + 1)
    fps_rows = np.zeros(T + 1, dtype=int)
    err = np.zeros(T + 1)
    contained = np.zeros(T + 1, dtype=bool)
    nested = np.ones(T + 1, dtype=bool)
    cand = np.full(T + 1, np.nan)
    status = []

    fps = init_fps(*cfg.fps_bounds())
    rls = RlsState(np.asarray(cfg.prior_mean, dtype=float), cfg.prior_covariance())
    phi = np.asarray(cfg.phi0, dtype=float)
    prev = None
    accumulated = 0.0
    for t in range(T + 1):
        y = step(truth, phi, w[t])
        if t > 0:
            cut = add_measurement_cut(fps, phi, y, w_bar)
            new, _ = prune_with_report(cut, cfg.prune_cap)
            nested[t] = _nested(new, fps, _dropped(fps, new), check_rng)
            fps = new
            rls = rls_update(rls, phi, y, noise_var)
        contained[t] = contains(fps, h_true)
        fps_rows[t] = fps.n_rows
        ys[t], phis[t] = y, phi
        domain = point_estimate_domain(fps, fsps if mode == SPARSE else None, cfg.fsps_shape)
        mu_vec = project_mean(rls, domain)
        err[t] = float(np.linalg.norm(mu_vec - h_true))
        if t == T:
            stage[t] = float(y @ Q @ y)
            status.append("measured")
            accumulated += stage[t]
            break
        mu = mu_vec.reshape(cfg.n_y, cfg.dim)
        if prev is not None and cfg.check_candidate:
            cand[t] = ctl.candidate_check(prev, mu, fps, phi, y, CANDIDATE_TOL).max_violation
        try:
            u, sol = ctl.solve_step(mu, fps, phi, y, t)
        except InfeasibleAtRuntime as exc:
            exc.t = t
            raise
        us[t] = u
        stage[t] = float(y @ Q @ y + u @ S @ u)
        accumulated += stage[t]
        status.append(sol.status.value)
        prev = sol
        phi = shift_regressor(ops, phi, u)
    return TrajectoryLog(mode, ys, us, phis, stage, status, fps_rows, err, contained, nested, cand, accumulated)


# ---------------------------------------------------------------- Monte Carlo


def run_disturbances(cfg: ExperimentConfig, run_index: int) -> np.ndarray:
    """Disturbance sequence of one run, shared by both modes."""
    rng = make_rng(cfg.run_seed_base, run_index)
    return sample_disturbance(DisturbanceModel(cfg.w_bar), rng, size=cfg.t_end + 1)


def offline_fsps(cfg: ExperimentConfig) -> Fsps:
    truth = ImpulseResponse(cfg.truth_matrix(), cfg.k_bar)
    fsps, _ = run_offline(truth, DisturbanceModel(cfg.w_bar), cfg.n_u, cfg.m, make_rng(cfg.offline_seed),
                          q=cfg.q, delta_bar=cfg.delta_bar, c_tilde=cfg.c_tilde, c_bar=cfg.c_bar,
                          seed=cfg.offline_seed)
    return fsps


@dataclass
class RunFailure:
    run: int
    mode: str
    t: int | None
    message: str


@dataclass
class RunRecord:
    run: int
    logs: dict
    failures: list


def _one_run(cfg: ExperimentConfig, fsps: Fsps | None, run: int, modes) -> RunRecord:
    w = run_disturbances(cfg, run)
    logs, failures = {}, []
    for label, mode in modes:
        try:
            logs[label] = run_closed_loop(cfg, w, fsps if mode == SPARSE else None, mode)
        except (InfeasibleAtRuntime, EmptyDomain, SmpcError) as exc:
            failures.append(RunFailure(run, label, getattr(exc, "t", None), f"{type(exc).__name__}: {exc}"))
    return RunRecord(run, logs, failures)


@dataclass
class MonteCarloSummary:
    """Paired comparison. ``delta_y[r, t-1] = |y_base(t)| - |y_sparse(t)|`` for ``t = 1..t_end``;
    ``delta_u[r, t] = |u_base(t)| - |u_sparse(t)|`` for ``t = 0..t_end-1``."""

    runs: np.ndarray
    costs: dict
    delta_y: np.ndarray
    delta_u: np.ndarray
    violations: dict
    samples: dict
    failures: list = field(default_factory=list)
    truth_contained: bool = True
    nesting_ok: bool = True
    candidate_ok: bool = True
    candidate_max_violation: float = 0.0
    logs: dict = field(default_factory=dict)

    def mean_cost(self, mode):
        return math.fsum(self.costs[mode]) / len(self.costs[mode])

    @property
    def relative_reduction(self):
        base = self.mean_cost(BASELINE)
        return (base - self.mean_cost(SPARSE)) / base

    @property
    def fraction_sparse_lower(self):
        return float(np.mean(np.asarray(self.costs[SPARSE]) < np.asarray(self.costs[BASELINE])))

    @property
    def fraction_delta_y_negative(self):
        return float(np.mean(self.delta_y < 0))

    @property
    def fraction_delta_u_negative(self):
        return float(np.mean(self.delta_u < 0))

    @property
    def violation_rate(self):
        total = sum(self.samples.values())
        return sum(self.violations.values()) / total if total else 0.0


def _magnitude(x):
    return np.linalg.norm(np.atleast_2d(x), axis=-1)


def monte_carlo(cfg: ExperimentConfig, n_runs: int | None = None, fsps: Fsps | None = None,
                workers: int = 1, keep_logs: bool = False, modes=None) -> MonteCarloSummary:
    """Paired runs: both modes see the same disturbance sequence for each run index.

    ``modes`` maps the two report labels to simulation modes; overriding it
    (e.g. sparse against sparse) gives self-comparisons.
    """
    n_runs = cfg.n_runs if n_runs is None else int(n_runs)
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    modes = tuple((modes or {BASELINE: BASELINE, SPARSE: SPARSE}).items())
    if fsps is None and any(m == SPARSE for _, m in modes):
        fsps = offline_fsps(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_run, [cfg] * n_runs, [fsps] * n_runs, range(n_runs), [modes] * n_runs))
    else:
        records = [_one_run(cfg, fsps, r, modes) for r in range(n_runs)]
    records.sort(key=lambda rec: rec.run)
    return _aggregate(cfg, records, [label for label, _ in modes], keep_logs)


def _aggregate(cfg, records, labels, keep_logs):
    Q, S = np.atleast_2d(cfg.Q), np.atleast_2d(cfg.S)
    E, p = np.atleast_2d(cfg.E), np.atleast_1d(cfg.p)
    costs = {label: [] for label in labels}
    violations = {label: 0 for label in labels}
    samples = {label: 0 for label in labels}
    dy, du, failures, runs = [], [], [], []
    contained = nested = cand_ok = True
    cand_max = 0.0
    logs = {}
    for rec in records:
        failures.extend(rec.failures)
        if len(rec.logs) != len(labels):
            continue
        runs.append(rec.run)
        for label in labels:
            log = rec.logs[label]
            costs[label].append(closed_loop_cost(log, Q, S))
            violations[label] += int(np.sum(np.any(log.y @ E.T > p, axis=1)))
            samples[label] += log.y.shape[0]
            contained &= bool(np.all(log.truth_contained))
            nested &= bool(np.all(log.nesting_ok))
            cand_ok &= log.candidate_ok
            v = log.candidate_violation[~np.isnan(log.candidate_violation)]
            cand_max = max(cand_max, float(v.max(initial=0.0)))
        base, sparse = rec.logs[labels[0]], rec.logs[labels[1]]
        dy.append(_magnitude(base.y[1:]) - _magnitude(sparse.y[1:]))
        du.append(_magnitude(base.u[:-1]) - _magnitude(sparse.u[:-1]))
        if keep_logs:
            logs[rec.run] = rec.logs
    T = cfg.t_end
    return MonteCarloSummary(
        np.asarray(runs, dtype=int), costs,
        np.asarray(dy).reshape(len(runs), T), np.asarray(du).reshape(len(runs), T),
        violations, samples, failures, contained, nested, cand_ok, cand_max, logs,
    )


# ---------------------------------------------------------------- reporting


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def report_text(summary: MonteCarloSummary) -> str:
    lines = [
        "paired Monte Carlo comparison",
        f"runs completed = {len(summary.runs)}",
        f"failed runs = {len(summary.failures)}",
    ]
    for f in summary.failures:
        lines.append(f"  failure run={f.run} mode={f.mode} t={f.t}: {f.message}")
    for mode in summary.costs:
        lines.append(f"mean cost {mode} = {summary.mean_cost(mode)!r}")
    if set(summary.costs) == {BASELINE, SPARSE}:
        lines.append(f"relative cost reduction = {summary.relative_reduction!r}")
        lines.append(f"fraction of runs with sparse cost lower = {summary.fraction_sparse_lower!r}")
    lines += [
        f"fraction of timesteps with delta |y| < 0 = {summary.fraction_delta_y_negative!r}",
        f"fraction of timesteps with delta |u| < 0 = {summary.fraction_delta_u_negative!r}",
        f"output constraint violation rate = {summary.violation_rate!r}",
        f"truth always in feasible parameter set = {summary.truth_contained}",
        f"feasible parameter sets nested = {summary.nesting_ok}",
        f"shifted candidate always feasible = {summary.candidate_ok}",
        f"largest candidate residual = {summary.candidate_max_violation!r}",
    ]
    return "\n".join(lines) + "\n"


def summarize(summary: MonteCarloSummary, out_dir) -> str:
    """Write the per-run and per-timestep CSV files plus ``report.txt``; returns the report text."""
    if len(summary.runs) == 0:
        raise ValueError("cannot summarize an empty Monte Carlo result")
    os.makedirs(out_dir, exist_ok=True)
    cost_rows = [(int(r), mode, repr(float(c))) for i, r in enumerate(summary.runs)
                 for mode, c in ((m, summary.costs[m][i]) for m in summary.costs)]
    _write_rows(os.path.join(out_dir, "costs.csv"), ["run", "mode", "cost"], cost_rows)
    T = summary.delta_y.shape[1]
    _write_rows(os.path.join(out_dir, "delta_y.csv"), ["run", "t", "delta_abs_y"],
                [(int(r), t + 1, repr(float(summary.delta_y[i, t]))) for i, r in enumerate(summary.runs) for t in range(T)])
    _write_rows(os.path.join(out_dir, "delta_u.csv"), ["run", "t", "delta_abs_u"],
                [(int(r), t, repr(float(summary.delta_u[i, t]))) for i, r in enumerate(summary.runs) for t in range(T)])
    _write_rows(os.path.join(out_dir, "violations.csv"), ["mode", "violations", "samples"],
                [(m, summary.violations[m], summary.samples[m]) for m in summary.costs])
    _write_rows(os.path.join(out_dir, "checks.csv"), ["check", "value"], [
        ("truth_contained", int(summary.truth_contained)),
        ("nesting_ok", int(summary.nesting_ok)),
        ("candidate_ok", int(summary.candidate_ok)),
        ("candidate_max_violation", repr(float(summary.candidate_max_violation))),
    ])
    _write_rows(os.path.join(out_dir, "failures.csv"), ["run", "mode", "t", "message"],
                [(f.run, f.mode, "" if f.t is None else f.t, f.message) for f in summary.failures])
    text = report_text(summary)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return text


def write_trajectory(log: TrajectoryLog, path):
    rows = []
    for t in range(log.y.shape[0]):
        rows.append([t] + [repr(float(v)) for v in log.y[t]] + [repr(float(v)) for v in log.u[t]]
                    + [repr(float(log.stage_cost[t])), log.status[t], int(log.fps_rows[t]),
                       repr(float(log.estimate_error[t]))])
    header = (["t"] + [f"y{i}" for i in range(log.y.shape[1])] + [f"u{i}" for i in range(log.u.shape[1])]
              + ["stage_cost", "status", "fps_rows", "estimate_error"])
    _write_rows(path, header, rows)


def load_summary(out_dir) -> MonteCarloSummary:
    """Rebuild a summary from the CSV files written by :func:`summarize`."""
    def read(name):
        with open(os.path.join(out_dir, name), newline="") as fh:
            return list(csv.DictReader(fh))

    cost_rows = read("costs.csv")
    runs = sorted({int(r["run"]) for r in cost_rows})
    labels = list(dict.fromkeys(r["mode"] for r in cost_rows))
    costs = {m: [float(r["cost"]) for r in cost_rows if r["mode"] == m] for m in labels}

    def grid(name, key):
        rows = read(name)
        ts = sorted({int(r["t"]) for r in rows})
        out = np.zeros((len(runs), len(ts)))
        ri = {r: i for i, r in enumerate(runs)}
        ti = {t: i for i, t in enumerate(ts)}
        for r in rows:
            out[ri[int(r["run"])], ti[int(r["t"])]] = float(r[key])
        return out

    vrows = read("violations.csv")
    violations = {r["mode"]: int(r["violations"]) for r in vrows}
    samples = {r["mode"]: int(r["samples"]) for r in vrows}
    checks = {r["check"]: r["value"] for r in read("checks.csv")}
    failures = [RunFailure(int(r["run"]), r["mode"], int(r["t"]) if r["t"] else None, r["message"])
                for r in read("failures.csv")]
    return MonteCarloSummary(
        np.asarray(runs), costs, grid("delta_y.csv", "delta_abs_y"), grid("delta_u.csv", "delta_abs_u"),
        violations, samples, failures,
        truth_contained=checks["truth_contained"] == "1", nesting_ok=checks["nesting_ok"] == "1",
        candidate_ok=checks["candidate_ok"] == "1",
        candidate_max_violation=float(checks["candidate_max_violation"]),
    )
