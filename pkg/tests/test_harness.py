import math
import os

import numpy as np
import pytest

from sparse_smpc.config import BASELINE, SPARSE, ExperimentConfig
from sparse_smpc.errors import ConfigError
from sparse_smpc.harness import (TrajectoryLog, closed_loop_cost, load_summary, monte_carlo, offline_fsps,
                                 run_closed_loop, run_disturbances, summarize, write_trajectory)

TRUTH = [-1.0, 0, 0, 0, 0, 0, 0, 0, -2.0, 0]
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def nominal_rollout(h, phi0, N, T, q, s):
    """Closed loop of the unconstrained nominal MPC with terminal equalities, via KKT solves.

    The delay-line prediction is written out directly: entry i of the regressor
    k steps ahead is u(k-1-i) if that input is planned, else the old entry i-k.
    """
    h = np.asarray(h, dtype=float)
    m = h.size
    phi = np.asarray(phi0, dtype=float)
    ys, us = [], []
    for _ in range(T):
        y = h @ phi
        rows, offs = [], []
        for k in range(1, N + 1):
            r = np.zeros(N)
            off = 0.0
            for i in range(m):
                j = k - 1 - i
                if j >= 0:
                    r[j] += h[i]
                else:
                    off += h[i] * phi[i - k]
            rows.append(r)
            offs.append(off)
        Mx, c = np.array(rows), np.array(offs)
        H = 2 * (q * Mx.T @ Mx + s * np.eye(N))
        g = 2 * q * Mx.T @ c
        Aeq = np.zeros((m - 1, N))
        for n, j in enumerate(range(N - m, N - 1)):
            Aeq[n, j], Aeq[n, N - 1] = 1.0, -1.0
        kkt = np.block([[H, Aeq.T], [Aeq, np.zeros((m - 1, m - 1))]])
        U = np.linalg.solve(kkt, np.concatenate([-g, np.zeros(m - 1)]))[:N]
        assert np.all(np.abs(U) < 1) and np.all(Mx @ U + c < 4.9)  # constraints inactive
        ys.append(y)
        us.append(U[0])
        phi = np.r_[U[0], phi[:-1]]
    ys.append(h @ phi)
    us.append(0.0)
    return np.array(ys), np.array(us)


def make_log(y, u):
    y = np.atleast_2d(np.asarray(y, dtype=float)).reshape(-1, 1)
    u = np.atleast_2d(np.asarray(u, dtype=float)).reshape(-1, 1)
    n = y.shape[0]
    return TrajectoryLog("sparse", y, u, np.zeros((n, 1)), np.zeros(n), [], np.zeros(n), np.zeros(n),
                         np.ones(n, bool), np.ones(n, bool), np.full(n, np.nan), 0.0)


def test_cost_arithmetic():
    assert closed_loop_cost(make_log([1.0], [1.0]), [[20.0]], [[2.0]]) == 22.0
    assert closed_loop_cost(make_log(np.zeros(5), np.zeros(5)), [[20.0]], [[2.0]]) == 0.0


def test_certainty_equivalence_rollout():
    # exact prior, singleton parameter set and zero realized noise: the controller is the nominal MPC
    cfg = ExperimentConfig(w_bar=[1e-4], fps_lower=TRUTH, fps_upper=TRUTH, prior_mean=TRUTH, mode=BASELINE)
    log = run_closed_loop(cfg, np.zeros((cfg.t_end + 1, 1)))
    ys, us = nominal_rollout(TRUTH, cfg.phi0, cfg.horizon, cfg.t_end, 20.0, 2.0)
    np.testing.assert_allclose(log.y[:, 0], ys, atol=1e-6)
    np.testing.assert_allclose(log.u[:, 0], us, atol=1e-6)
    ref = math.fsum(20 * ys**2 + 2 * us**2)
    assert closed_loop_cost(log, cfg.Q, cfg.S) == pytest.approx(ref, rel=1e-6)
    assert np.all(log.estimate_error == 0.0)


def test_nominal_regulation_shrinks_outputs():
    cfg = ExperimentConfig(w_bar=[1e-4], fps_lower=TRUTH, fps_upper=TRUTH, prior_mean=TRUTH, mode=BASELINE,
                           Q=[[200.0]], S=[[0.1]], t_end=40)
    log = run_closed_loop(cfg, np.zeros((41, 1)))
    assert np.abs(log.y[-1, 0]) < 0.1 * np.abs(log.y[0, 0])
    assert np.max(np.abs(log.y[25:, 0])) < np.abs(log.y[0, 0])


def test_empty_horizon_only_measures():
    cfg = ExperimentConfig(t_end=0, mode=BASELINE)
    log = run_closed_loop(cfg, run_disturbances(cfg, 0))
    assert log.t_end == 0 and log.status == ["measured"]
    assert not np.any(log.u)
    assert log.stage_cost[0] == pytest.approx(20 * log.y[0, 0] ** 2)


@pytest.fixture(scope="module")
def reference_fsps():
    return offline_fsps(ExperimentConfig())


def test_single_run_bookkeeping(reference_fsps):
    cfg = ExperimentConfig()
    log = run_closed_loop(cfg, run_disturbances(cfg, 0), reference_fsps)
    assert log.y.shape == (cfg.t_end + 1, 1)
    assert np.all(log.y @ np.atleast_2d(cfg.E).T <= cfg.p)
    assert np.all(np.abs(log.u) <= 1.0)
    assert np.all(log.stage_cost >= 0)
    assert abs(closed_loop_cost(log, cfg.Q, cfg.S) - log.accumulated_cost) <= 1e-10
    assert log.truth_contained.all() and log.nesting_ok.all() and log.candidate_ok
    assert log.status[:-1] == ["Optimal"] * cfg.t_end and log.status[-1] == "measured"


def test_mode_requires_matching_sparse_set(reference_fsps):
    cfg = ExperimentConfig()
    with pytest.raises(ValueError):
        run_closed_loop(cfg, run_disturbances(cfg, 0), None, SPARSE)
    with pytest.raises(ValueError):
        run_closed_loop(cfg, run_disturbances(cfg, 0), reference_fsps, BASELINE)
    with pytest.raises(ValueError):
        run_closed_loop(cfg, np.zeros((3, 1)), None, BASELINE)


def test_modes_share_disturbances(reference_fsps):
    cfg = ExperimentConfig(t_end=3)
    w = run_disturbances(cfg, 5)
    np.testing.assert_array_equal(w, run_disturbances(cfg, 5))
    a = run_closed_loop(cfg, w, reference_fsps, SPARSE)
    b = run_closed_loop(cfg, w, None, BASELINE)
    assert a.y[0, 0] == b.y[0, 0]


def test_self_comparison_has_zero_deltas(reference_fsps):
    cfg = ExperimentConfig(t_end=4)
    s = monte_carlo(cfg, 1, fsps=reference_fsps, modes={"first": SPARSE, "second": SPARSE})
    assert not np.any(s.delta_y) and not np.any(s.delta_u)
    assert s.delta_y.shape == (1, 4)


def test_summary_files_and_accounting(tmp_path, reference_fsps):
    cfg = ExperimentConfig(t_end=5)
    s = monte_carlo(cfg, 2, fsps=reference_fsps)
    text = summarize(s, tmp_path)
    for name in ("costs.csv", "delta_y.csv", "delta_u.csv", "violations.csv", "checks.csv", "failures.csv",
                 "report.txt"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "costs.csv").read_text().splitlines()[0] == "run,mode,cost"
    assert (tmp_path / "delta_y.csv").read_text().splitlines()[0] == "run,t,delta_abs_y"
    assert (tmp_path / "delta_u.csv").read_text().splitlines()[0] == "run,t,delta_abs_u"
    assert "fraction of timesteps with delta |y| < 0" in text
    back = load_summary(tmp_path)
    for mode in (BASELINE, SPARSE):
        assert back.mean_cost(mode) == s.mean_cost(mode)
        assert s.mean_cost(mode) == math.fsum(s.costs[mode]) / 2
    np.testing.assert_array_equal(back.delta_y, s.delta_y)
    np.testing.assert_array_equal(back.delta_u, s.delta_u)
    assert back.violation_rate == s.violation_rate
    assert back.candidate_ok and back.truth_contained and back.nesting_ok


def test_parallel_batch_matches_serial(tmp_path, reference_fsps):
    cfg = ExperimentConfig(t_end=4)
    summarize(monte_carlo(cfg, 3, fsps=reference_fsps), tmp_path / "a")
    summarize(monte_carlo(cfg, 3, fsps=reference_fsps, workers=2), tmp_path / "b")
    for name in ("costs.csv", "delta_y.csv", "delta_u.csv", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failed_runs_are_recorded():
    cfg = ExperimentConfig(t_end=2, p=[0.1])
    s = monte_carlo(cfg, 2, modes={BASELINE: BASELINE, "again": BASELINE})
    assert len(s.failures) == 4
    assert {f.t for f in s.failures} == {0}
    assert all("InfeasibleAtRuntime" in f.message for f in s.failures)
    with pytest.raises(ValueError):
        summarize(s, "unused")
    with pytest.raises(ValueError):
        monte_carlo(cfg, 0)


def test_trajectory_csv(tmp_path):
    cfg = ExperimentConfig(t_end=2, mode=BASELINE)
    log = run_closed_loop(cfg, run_disturbances(cfg, 0))
    write_trajectory(log, tmp_path / "traj.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "t,y0,u0,stage_cost,status,fps_rows,estimate_error"
    assert len(lines) == 4


def test_shipped_config_is_the_reference_setup():
    cfg = ExperimentConfig.load(os.path.join(ROOT, "tableI.cfg"))
    assert cfg == ExperimentConfig()
    assert cfg.kappa == pytest.approx(3.0, abs=1e-12)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("m = 10\nbogus = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("m = 10\nm = 11\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("epsilon = [oops\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("horizon\n")
    with pytest.raises(ConfigError):
        ExperimentConfig(horizon=10)
    with pytest.raises(ConfigError):
        ExperimentConfig(epsilon=1.5)
    with pytest.raises(ConfigError):
        ExperimentConfig(truth=[[1.0, 2.0]])
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.cfg")
