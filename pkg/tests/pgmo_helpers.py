"""Shared fixtures for deformation-graph tests: small drifting loops and Jacobian checks."""
import numpy as np

from dsgkit import synth
from dsgkit.geom import RigidTransform, exp_retract
from dsgkit.pgmo import _stack


def small_drift(seed=0, **kw):
    p = dict(n_poses=12, poses_per_lap=9, n_loops=3, yaw_bias=0.02, mesh_spacing=1.0)
    p.update(kw)
    return synth.drift_loop(seed, synth.DriftLoopParams(**p))


def with_loops(d):
    return d.noisy.without_loops().with_edges(d.noisy.odometry + d.loops)


def fd_jacobian_check(problem, rot, trans, rng, n_dirs=4, h=1e-6):
    jac = problem.jacobian(rot, trans).toarray()
    n = len(rot)
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.normal(size=6 * n)
        rp, tp = _retract_all(rot, trans, h * d)
        rm, tm = _retract_all(rot, trans, -h * d)
        fd = (problem.residuals(rp, tp) - problem.residuals(rm, tm)) / (2 * h)
        an = jac @ d
        worst = max(worst, np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-12))
    return worst


def _retract_all(rot, trans, delta):
    out = [exp_retract(RigidTransform(r, t), delta[6 * k:6 * k + 6]) for k, (r, t) in enumerate(zip(rot, trans))]
    return _stack(out)


def random_state(dg, rng, scale=0.5):
    return _stack([exp_retract(t, rng.normal(size=6) * scale) for t in dg.transforms])
