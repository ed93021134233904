"""Small random control instances shared by the controller and acceptance tests."""
import numpy as np

from sparse_smpc.controller import MpcConfig, SmpcController, prediction_matrices
from sparse_smpc.plant import build_shift_operators
from sparse_smpc.polytope import Polytope, init_fps, support_function

NOISE_VARIANCE = [[1 / 300]]


def robust_instance(seed, mode, loose=False):
    """dim 2 or 3 plant, a cut box as parameter set, and an output bound just above the
    unavoidable free-response level so U = 0 stays feasible while the bound often binds."""
    r = np.random.default_rng(seed)
    m = 2 + seed % 2
    ops = build_shift_operators(1, m)
    box = init_fps(-np.ones(m), np.ones(m))
    fps = Polytope(np.vstack([box.A, r.normal(size=(3, m))]), np.r_[box.b, r.uniform(0.2, 0.8, size=3)])
    mu = np.atleast_2d(r.uniform(-1, 1, size=m))
    phi = r.uniform(-1, 1, size=m)
    E = np.array([[1.0]]) if seed % 4 < 2 else np.array([[-1.0]])
    N = m + 2
    _, c = prediction_matrices(ops, phi, N)
    floor = max(support_function(fps, E[0, 0] * ck) for ck in c) + 3 * np.sqrt(1 / 300)
    p = 1e3 if loose else floor + r.uniform(0.02, 0.3)
    cfg = MpcConfig(N, [[20.0]], [[1.0]], 0.1, E, [p], [[1.0], [-1.0]], [2.0, 2.0], mode)
    return SmpcController(cfg, ops, NOISE_VARIANCE), mu, fps, phi, [r.uniform(-1, 1)]
