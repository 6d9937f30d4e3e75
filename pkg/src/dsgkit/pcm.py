"""Incremental pairwise-consistency outlier rejection for loop closures.

A loop is first gated against the odometry chain it closes; survivors are
tested pairwise against previously accepted loops, and the largest mutually
consistent subset (a maximum clique) is kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .geom import RigidTransform, chi2_quantile, compose, so3_log
from .pose_graph import EdgeKind, PoseGraph, RelativePoseEdge
from ._validation import check_positive, check_probability


@dataclass(frozen=True)
class PcmConfig:
    confidence: float = 0.99
    odom_sigma_rot: float = 0.01
    odom_sigma_trans: float = 0.05
    loop_sigma_rot: float = 0.02
    loop_sigma_trans: float = 0.1

    def __post_init__(self):
        check_probability(self.confidence, "confidence")
        for name in ("odom_sigma_rot", "odom_sigma_trans", "loop_sigma_rot", "loop_sigma_trans"):
            check_positive(getattr(self, name), name)

    @property
    def threshold(self) -> float:
        return chi2_quantile(6, self.confidence)


def residual_vector(t: RigidTransform) -> np.ndarray:
    """Map a cycle residual to ``(rotation log, translation)``."""
    return np.concatenate([so3_log(t.rotation), t.translation])


def cycle_mahalanobis_sq(residual: RigidTransform, n_odom: int, n_loops: int, cfg: PcmConfig) -> float:
    # per-edge diagonal variances summed along the cycle, no adjoint transport
    var_r = n_odom * cfg.odom_sigma_rot**2 + n_loops * cfg.loop_sigma_rot**2
    var_t = n_odom * cfg.odom_sigma_trans**2 + n_loops * cfg.loop_sigma_trans**2
    r = residual_vector(residual)
    return float(np.dot(r[:3], r[:3]) / var_r + np.dot(r[3:], r[3:]) / var_t)


def odometry_residual(g: PoseGraph, loop: RelativePoseEdge) -> tuple[RigidTransform, int]:
    chain, n = g.chain_transform(loop.from_id, loop.to_id)
    return compose(loop.measurement.inverse(), chain), n


def odometry_check(g: PoseGraph, loop: RelativePoseEdge, cfg: PcmConfig) -> bool:
    """True when the loop agrees with the odometry it closes (chi-square, 6 dof)."""
    res, n = odometry_residual(g, loop)
    return cycle_mahalanobis_sq(res, n, 1, cfg) <= cfg.threshold


def pairwise_residual(g: PoseGraph, a: RelativePoseEdge, b: RelativePoseEdge) -> tuple[RigidTransform, int]:
    # a.from -> a.to -> (odom) -> b.to -> (b^-1) -> b.from -> (odom) -> a.from
    c1, n1 = g.chain_transform(a.to_id, b.to_id)
    c2, n2 = g.chain_transform(b.from_id, a.from_id)
    res = compose(compose(compose(a.measurement, c1), b.measurement.inverse()), c2)
    return res, n1 + n2


def pairwise_check(g: PoseGraph, a: RelativePoseEdge, b: RelativePoseEdge, cfg: PcmConfig) -> bool:
    res, n = pairwise_residual(g, a, b)
    return cycle_mahalanobis_sq(res, n, 2, cfg) <= cfg.threshold


@dataclass(frozen=True)
class ConsistencyMatrix:
    """Loops that passed the odometry gate and their pairwise-consistency adjacency."""

    accepted_loops: tuple[RelativePoseEdge, ...] = ()
    adjacency: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))

    def __len__(self) -> int:
        return len(self.accepted_loops)


def insert_loop(m: ConsistencyMatrix, g: PoseGraph, loop: RelativePoseEdge, cfg: PcmConfig) -> ConsistencyMatrix:
    """Grow the matrix by one row/column; earlier entries are copied, never recomputed."""
    if not odometry_check(g, loop, cfg):
        return m
    n = len(m)
    adj = np.zeros((n + 1, n + 1), dtype=bool)
    adj[:n, :n] = m.adjacency
    adj[n, n] = True
    for k, prev in enumerate(m.accepted_loops):
        ok = pairwise_check(g, prev, loop, cfg)
        adj[n, k] = adj[k, n] = ok
    adj.flags.writeable = False
    return ConsistencyMatrix(m.accepted_loops + (loop,), adj)


def _color_bound(cand: int, adj: Sequence[int]) -> int:
    """Number of colors in a greedy coloring of ``cand``; bounds its clique number."""
    colors = 0
    uncolored = cand
    while uncolored:
        colors += 1
        q = uncolored
        while q:
            low = q & -q
            v = low.bit_length() - 1
            uncolored &= ~low
            q &= ~low & ~adj[v]
    return colors


def maximum_clique(adjacency: np.ndarray) -> list[int]:
    """Exact maximum clique by branch and bound with a greedy-coloring bound.

    Vertices are branched in increasing index order, so the first maximum
    clique found is the lexicographically smallest one.
    """
    a = np.asarray(adjacency, dtype=bool)
    n = a.shape[0]
    if n == 0:
        return []
    adj = []
    for i in range(n):
        row = 0
        for j in np.flatnonzero(a[i]):
            if j != i:
                row |= 1 << int(j)
        adj.append(row)

    best: list[int] = []
    cur: list[int] = []

    def expand(cand: int) -> None:
        nonlocal best
        if not cand:
            if len(cur) > len(best):
                best = cur.copy()
            return
        if len(cur) + _color_bound(cand, adj) <= len(best):
            return
        q = cand
        while q:
            if len(cur) + q.bit_count() <= len(best):
                return
            low = q & -q
            v = low.bit_length() - 1
            q &= ~low
            cur.append(v)
            expand(q & adj[v])
            cur.pop()

    expand((1 << n) - 1)
    return best


def max_consistent_set(m: ConsistencyMatrix) -> list[int]:
    """Indices into ``m.accepted_loops`` of the largest mutually consistent set."""
    return maximum_clique(m.adjacency)


def consistent_loops(g: PoseGraph, loops: Sequence[RelativePoseEdge], cfg: PcmConfig) -> tuple[list[RelativePoseEdge], ConsistencyMatrix]:
    m = ConsistencyMatrix()
    for loop in loops:
        m = insert_loop(m, g, loop, cfg)
    keep = max_consistent_set(m)
    return [m.accepted_loops[k] for k in keep], m


class PCMFilter(BaseEstimator):
    """Estimator wrapper: fit on a pose graph, keep the consistent loop closures.

    Parameters mirror :class:`PcmConfig`. After ``fit``, ``inlier_mask_``
    flags which candidate loops survived (in input order) and
    ``consistency_`` holds the final matrix.
    """

    def __init__(self, confidence=0.99, odom_sigma_rot=0.01, odom_sigma_trans=0.05,
                 loop_sigma_rot=0.02, loop_sigma_trans=0.1):
        self.confidence = confidence
        self.odom_sigma_rot = odom_sigma_rot
        self.odom_sigma_trans = odom_sigma_trans
        self.loop_sigma_rot = loop_sigma_rot
        self.loop_sigma_trans = loop_sigma_trans

    def _config(self) -> PcmConfig:
        return PcmConfig(**self.get_params())

    def fit(self, graph: PoseGraph, loops: Sequence[RelativePoseEdge] | None = None):
        if loops is None:
            loops = graph.loop_closures
        loops = list(loops)
        odo_graph = graph.without_loops()
        kept, m = consistent_loops(odo_graph, loops, self._config())
        kept_ids = {id(e) for e in kept}
        self.consistency_ = m
        self.inlier_mask_ = np.array([id(e) in kept_ids for e in loops], dtype=bool)
        self.inliers_ = kept
        return self

    def fit_predict(self, graph: PoseGraph, loops=None) -> np.ndarray:
        return self.fit(graph, loops).inlier_mask_

    def fit_transform(self, graph: PoseGraph, loops=None) -> PoseGraph:
        """Graph with odometry plus the accepted loops only."""
        self.fit(graph, loops)
        kept = [replace(e, kind=EdgeKind.LOOP_CLOSURE) for e in self.inliers_]
        return graph.with_edges(graph.odometry + kept)
