"""Simultaneous pose-graph and mesh deformation.

Pose vertices (robot poses) and mesh vertices (clusters of a simplified mesh)
share one graph of SE(3) transforms. Every edge contributes the chordal cost
``||T_i^-1 T_j - E_ij||^2_W``; mesh-to-mesh and pose-to-mesh edges carry zero
rotation weight. Optimizing with no mesh vertices reduces to robust pose-graph
optimization of the trajectory alone.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geom import EdgeWeight, RigidTransform, exp_retract_batch, skew
from .mesh_io import LabeledMesh, simplify
from .pose_graph import EdgeKind, PoseGraph, RelativePoseEdge
from ._validation import check_positive

logger = logging.getLogger(__name__)

_GENERATORS = np.array([skew(e) for e in np.eye(3)])


class DGEdgeKind(str, enum.Enum):
    ODOMETRY = "odometry"
    LOOP = "loop"
    MESH = "mesh"
    VISIBILITY = "visibility"


@dataclass(frozen=True)
class DGEdge:
    kind: DGEdgeKind
    i: int  # unified vertex index
    j: int
    measurement: RigidTransform
    weight: EdgeWeight


@dataclass(frozen=True)
class Prior:
    """Unary factor pulling a pose vertex toward an absolute pose."""

    vertex: int
    pose: RigidTransform
    weight: EdgeWeight


@dataclass
class SolverReport:
    initial_cost: float = 0.0
    final_cost: float = 0.0
    iterations: int = 0
    converged: bool = True
    cost_history: list = field(default_factory=list)


@dataclass
class PgmoConfig:
    simplification_voxel: float = 2.0
    visibility_radius: float = 3.0
    k_nearest: int = 4
    mesh_weight: float = 1.0
    visibility_weight: float = 1.0
    odom_weight: EdgeWeight | None = None  # None keeps each edge's own weight
    loop_weight: EdgeWeight | None = None
    max_iters: int = 100
    step_tolerance: float = 1e-10
    residual_tolerance: float = 1e-14

    def __post_init__(self):
        check_positive(self.simplification_voxel, "simplification_voxel")
        check_positive(self.visibility_radius, "visibility_radius")
        check_positive(self.mesh_weight, "mesh_weight", allow_zero=True)
        check_positive(self.visibility_weight, "visibility_weight", allow_zero=True)
        if int(self.k_nearest) < 1:
            raise ValueError("k_nearest must be >= 1")
        if int(self.max_iters) < 0:
            raise ValueError("max_iters must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PgmoConfig":
        d = dict(d)
        for key in ("odom_weight", "loop_weight"):
            if d.get(key) is not None and not isinstance(d[key], EdgeWeight):
                d[key] = EdgeWeight(*d[key]) if isinstance(d[key], (list, tuple)) else EdgeWeight(**d[key])
        return cls(**d)


@dataclass(eq=False)
class DeformationGraph:
    """Unified graph: ``n`` pose vertices first, then ``m`` mesh vertices.

    ``transforms`` holds the current estimate of every vertex. Mesh vertex
    ``k`` starts at ``(I, rest[k])``; pose vertices start at their odometric
    poses, kept in ``pose_initial``.
    """

    pose_ids: list[int]
    pose_stamps: list[float]
    pose_initial: list[RigidTransform]
    mesh_rest: np.ndarray
    transforms: list[RigidTransform]
    edges: list[DGEdge]
    report: SolverReport = field(default_factory=SolverReport)

    @property
    def n_poses(self) -> int:
        return len(self.pose_ids)

    @property
    def n_mesh(self) -> int:
        return len(self.mesh_rest)

    def __len__(self) -> int:
        return len(self.transforms)

    @property
    def pose_transforms(self) -> list[RigidTransform]:
        return self.transforms[: self.n_poses]

    @property
    def mesh_transforms(self) -> list[RigidTransform]:
        return self.transforms[self.n_poses:]

    def edges_of(self, kind: DGEdgeKind) -> list[DGEdge]:
        return [e for e in self.edges if e.kind is kind]

    def with_transforms(self, transforms, report=None) -> "DeformationGraph":
        return replace(self, transforms=list(transforms), report=report or SolverReport())


def _pose_edges(trajectory: PoseGraph, cfg: PgmoConfig) -> list[DGEdge]:
    out = []
    for e in trajectory.edges:
        i, j = trajectory.index_of(e.from_id), trajectory.index_of(e.to_id)
        if e.kind is EdgeKind.ODOMETRY:
            out.append(DGEdge(DGEdgeKind.ODOMETRY, i, j, e.measurement, cfg.odom_weight or e.weight))
        else:
            out.append(DGEdge(DGEdgeKind.LOOP, i, j, e.measurement, cfg.loop_weight or e.weight))
    return out


def build_deformation_graph(mesh: LabeledMesh | None, trajectory: PoseGraph, cfg: PgmoConfig) -> DeformationGraph:
    """Simplify ``mesh`` and link it to the trajectory.

    Mesh-mesh edges follow the simplified connectivity (one residual per
    direction, as in the neighbour sum of the deformation energy). A pose is
    linked to every cluster within ``cfg.visibility_radius`` of its position.
    """
    n = len(trajectory)
    poses = [node.pose for node in trajectory.nodes]
    edges = _pose_edges(trajectory, cfg)
    if mesh is None or len(mesh) == 0:
        rest = np.zeros((0, 3))
    else:
        simp = simplify(mesh, cfg.simplification_voxel)
        rest = simp.vertices
        w_mesh = EdgeWeight(0.0, cfg.mesh_weight)
        for a, b in simp.edges:
            a, b = int(a), int(b)
            edges.append(DGEdge(DGEdgeKind.MESH, n + a, n + b, RigidTransform.from_translation(rest[b] - rest[a]), w_mesh))
            edges.append(DGEdge(DGEdgeKind.MESH, n + b, n + a, RigidTransform.from_translation(rest[a] - rest[b]), w_mesh))
        if n and len(rest):
            tree = cKDTree(rest)
            w_vis = EdgeWeight(0.0, cfg.visibility_weight)
            for i, pose in enumerate(poses):
                for k in sorted(tree.query_ball_point(pose.translation, cfg.visibility_radius)):
                    local = pose.rotation.T @ (rest[k] - pose.translation)
                    edges.append(DGEdge(DGEdgeKind.VISIBILITY, i, n + k, RigidTransform.from_translation(local), w_vis))
        touched = np.zeros(len(rest), dtype=bool)
        for e in edges:
            if e.kind in (DGEdgeKind.MESH, DGEdgeKind.VISIBILITY):
                touched[e.j - n] = True
        if not touched.all():
            warnings.warn(
                f"{int((~touched).sum())} simplified mesh vertices have no mesh or visibility edge",
                RuntimeWarning,
                stacklevel=2,
            )
    transforms = list(poses) + [RigidTransform.from_translation(g) for g in rest]
    return DeformationGraph(
        pose_ids=trajectory.ids,
        pose_stamps=[node.stamp for node in trajectory.nodes],
        pose_initial=list(poses),
        mesh_rest=rest,
        transforms=transforms,
        edges=edges,
    )


def _stack(transforms: Sequence[RigidTransform]) -> tuple[np.ndarray, np.ndarray]:
    r = np.array([t.rotation for t in transforms]).reshape(-1, 3, 3)
    t = np.array([t.translation for t in transforms]).reshape(-1, 3)
    return r, t


class _Problem:
    """Vectorized residuals and Jacobians of the chordal cost."""

    def __init__(self, dg: DeformationGraph, priors: Sequence[Prior] = ()):
        edges = dg.edges
        self.n_vertices = len(dg)
        self.ei = np.array([e.i for e in edges], dtype=np.int64)
        self.ej = np.array([e.j for e in edges], dtype=np.int64)
        self.er, self.et = _stack([e.measurement for e in edges]) if edges else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
        self.swr = np.sqrt([e.weight.rotation for e in edges]) if edges else np.zeros(0)
        self.swt = np.sqrt([e.weight.translation for e in edges]) if edges else np.zeros(0)
        self.pv = np.array([p.vertex for p in priors], dtype=np.int64)
        self.pr, self.pt = _stack([p.pose for p in priors]) if priors else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
        self.pwr = np.sqrt([p.weight.rotation for p in priors]) if priors else np.zeros(0)
        self.pwt = np.sqrt([p.weight.translation for p in priors]) if priors else np.zeros(0)

    def residuals(self, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
        ri, rj = rot[self.ei], rot[self.ej]
        rrel = np.einsum("eki,ekj->eij", ri, rj)
        p = np.einsum("eki,ek->ei", ri, trans[self.ej] - trans[self.ei])
        r_edge = np.concatenate(
            [(rrel - self.er).reshape(-1, 9) * self.swr[:, None], (p - self.et) * self.swt[:, None]], axis=1
        )
        rp = rot[self.pv]
        r_prior = np.concatenate(
            [(rp - self.pr).reshape(-1, 9) * self.pwr[:, None], (trans[self.pv] - self.pt) * self.pwt[:, None]], axis=1
        )
        return np.concatenate([r_edge.reshape(-1), r_prior.reshape(-1)])

    def cost(self, rot, trans) -> float:
        r = self.residuals(rot, trans)
        return float(r @ r)

    def jacobian(self, rot: np.ndarray, trans: np.ndarray) -> sp.csr_matrix:
        """Jacobian w.r.t. right-multiplied tangent increments ``(v, w)`` of every vertex."""
        ne = len(self.ei)
        ri, rj = rot[self.ei], rot[self.ej]
        rrel = np.einsum("eki,ekj->eij", ri, rj)
        p = np.einsum("eki,ek->ei", ri, trans[self.ej] - trans[self.ei])

        ji = np.zeros((ne, 12, 6))
        jj = np.zeros((ne, 12, 6))
        for k in range(3):
            g = _GENERATORS[k]
            ji[:, :9, 3 + k] = (-np.einsum("ab,ebc->eac", g, rrel)).reshape(ne, 9)
            jj[:, :9, 3 + k] = np.einsum("eab,bc->eac", rrel, g).reshape(ne, 9)
        ji[:, 9:, :3] = -np.eye(3)
        ji[:, 9:, 3:] = np.array([skew(v) for v in p]).reshape(ne, 3, 3) if ne else 0.0
        jj[:, 9:, :3] = rrel
        ji[:, :9, :] *= self.swr[:, None, None]
        jj[:, :9, :] *= self.swr[:, None, None]
        ji[:, 9:, :] *= self.swt[:, None, None]
        jj[:, 9:, :] *= self.swt[:, None, None]

        npr = len(self.pv)
        jp = np.zeros((npr, 12, 6))
        rp = rot[self.pv]
        for k in range(3):
            jp[:, :9, 3 + k] = np.einsum("eab,bc->eac", rp, _GENERATORS[k]).reshape(npr, 9)
        jp[:, 9:, :3] = rp
        jp[:, :9, :] *= self.pwr[:, None, None]
        jp[:, 9:, :] *= self.pwt[:, None, None]

        rows_e = np.arange(ne * 12).reshape(ne, 12, 1).repeat(6, axis=2)
        rows_p = ne * 12 + np.arange(npr * 12).reshape(npr, 12, 1).repeat(6, axis=2)
        cols = np.arange(6).reshape(1, 1, 6)
        data = np.concatenate([ji.ravel(), jj.ravel(), jp.ravel()])
        rows = np.concatenate([rows_e.ravel(), rows_e.ravel(), rows_p.ravel()])
        colidx = np.concatenate([
            (6 * self.ei[:, None, None] + cols).repeat(12, axis=1).ravel(),
            (6 * self.ej[:, None, None] + cols).repeat(12, axis=1).ravel(),
            (6 * self.pv[:, None, None] + cols).repeat(12, axis=1).ravel(),
        ])
        shape = ((ne + npr) * 12, 6 * self.n_vertices)
        jac = sp.csr_matrix((data, (rows, colidx)), shape=shape)
        jac.eliminate_zeros()
        return jac


def chordal_cost(dg: DeformationGraph, transforms: Sequence[RigidTransform] | None = None, priors: Sequence[Prior] = ()) -> float:
    rot, trans = _stack(dg.transforms if transforms is None else transforms)
    return _Problem(dg, priors).cost(rot, trans)


def optimize(dg: DeformationGraph, cfg: PgmoConfig, priors: Sequence[Prior] = (), fix_first: bool | None = None) -> DeformationGraph:
    """Minimize the chordal cost by Gauss-Newton steps on the SE(3) retraction.

    The first pose vertex is held fixed unless priors anchor the problem
    (``fix_first`` overrides). A step that would raise the cost is retried
    with Levenberg damping, so the recorded cost sequence never increases.
    """
    if fix_first is None:
        fix_first = not priors
    problem = _Problem(dg, priors)
    transforms = list(dg.transforms)
    rot, trans = _stack(transforms) if transforms else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
    cost = problem.cost(rot, trans) if transforms else 0.0
    report = SolverReport(initial_cost=cost, cost_history=[cost])

    free = np.ones(6 * len(transforms), dtype=bool)
    if fix_first and dg.n_poses:
        free[:6] = False
    if not free.any() or not dg.edges and not priors:
        report.final_cost = cost
        return dg.with_transforms(transforms, report)

    lam = 0.0
    report.converged = False
    for it in range(int(cfg.max_iters)):
        if cost <= 1e-28:
            report.converged = True
            break
        r = problem.residuals(rot, trans)
        jac = problem.jacobian(rot, trans)[:, free]
        h = (jac.T @ jac).tocsc()
        g = jac.T @ r
        diag = h.diagonal()
        # tiny Tikhonov term keeps gauge-free rotations (zero rotation weight) solvable
        base = 1e-12 * max(1.0, float(diag.max(initial=0.0)))
        accepted = False
        for _ in range(30):
            damp = sp.diags(base + lam * (diag + 1e-9))
            step = spla.spsolve(h + damp, -g)
            delta = np.zeros(6 * len(transforms))
            delta[free] = step
            c_rot, c_trans = exp_retract_batch(rot, trans, delta)
            if fix_first and dg.n_poses:
                # the projection back onto SO(3) would otherwise touch the gauge bits
                c_rot[0], c_trans[0] = rot[0], trans[0]
            new_cost = problem.cost(c_rot, c_trans)
            if new_cost <= cost:
                accepted = True
                break
            lam = 1e-6 if lam == 0.0 else lam * 10.0
        report.iterations = it + 1
        if not accepted:
            report.converged = True  # no descent direction left at machine precision
            break
        decrease = cost - new_cost
        rot, trans, cost = c_rot, c_trans, new_cost
        report.cost_history.append(cost)
        lam = lam / 10.0 if lam > 1e-6 else 0.0
        if np.linalg.norm(step) < cfg.step_tolerance or decrease <= cfg.residual_tolerance * max(cost, 1e-300):
            report.converged = True
            break
    report.final_cost = cost
    if not report.converged:
        logger.warning("optimizer stopped after %d iterations without converging", report.iterations)
    return dg.with_transforms([RigidTransform(r, t) for r, t in zip(rot, trans)], report)


def reskin_weights(points: np.ndarray, rest: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Blend indices and normalized weights for each point.

    ``w_j = (1 - |v - g_j| / d_max)^2`` over the ``k`` nearest nodes, with
    ``d_max`` the distance to the ``(k+1)``-th. When every weight vanishes,
    or fewer than ``k+1`` nodes exist, the available nearest nodes share the
    weight uniformly.
    """
    m = len(rest)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if m == 0:
        return np.zeros((len(points), 0), dtype=np.int64), np.zeros((len(points), 0))
    tree = cKDTree(rest)
    if m <= k:
        _, idx = tree.query(points, k=m)
        idx = np.asarray(idx).reshape(len(points), m)
        return idx, np.full(idx.shape, 1.0 / m)
    dist, idx = tree.query(points, k=k + 1)
    dist = np.asarray(dist).reshape(len(points), k + 1)
    idx = np.asarray(idx).reshape(len(points), k + 1)
    dmax = dist[:, -1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dmax > 0, (1.0 - dist[:, :k] / dmax) ** 2, 0.0)
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] <= 0
    w[degenerate] = 1.0
    total[degenerate] = k
    return idx[:, :k], w / total


def reskin(full: LabeledMesh, dg: DeformationGraph, cfg: PgmoConfig) -> LabeledMesh:
    """Move every full-mesh vertex by a normalized blend of nearby node transforms."""
    if dg.n_mesh == 0 or len(full) == 0:
        return full.with_positions(full.positions.copy())
    idx, w = reskin_weights(full.positions, dg.mesh_rest, int(cfg.k_nearest))
    rot, trans = _stack(dg.mesh_transforms)
    v = full.positions[:, None, :]
    local = v - dg.mesh_rest[idx]
    moved = np.einsum("nkab,nkb->nka", rot[idx], local) + trans[idx]
    return full.with_positions(np.einsum("nk,nka->na", w, moved))


def _trajectory_from(dg: DeformationGraph, template: PoseGraph) -> PoseGraph:
    return template.with_poses(dg.pose_transforms)


def rpgo_optimize(g: PoseGraph, cfg: PgmoConfig, priors: Sequence[Prior] = ()) -> PoseGraph:
    """Pose-graph-only optimization: the deformation pipeline with no mesh vertices."""
    dg = build_deformation_graph(None, g, cfg)
    return _trajectory_from(optimize(dg, cfg, priors), g)


def pose_graph_priors(g: PoseGraph, priors: dict[int, tuple[RigidTransform, EdgeWeight]]) -> list[Prior]:
    return [Prior(g.index_of(nid), pose, w) for nid, (pose, w) in sorted(priors.items())]


class MeshPoseGraphOptimizer(TransformerMixin, BaseEstimator):
    """Estimator that fits a deformation graph to a trajectory (and optional mesh).

    ``fit(trajectory, mesh, loops)`` optimizes; ``transform(mesh)`` re-skins
    a full-resolution mesh with the fitted node transforms. With
    ``mesh=None`` the fit is pose-graph only.
    """

    def __init__(self, simplification_voxel=2.0, visibility_radius=3.0, k_nearest=4,
                 mesh_weight=1.0, visibility_weight=1.0, max_iters=100,
                 step_tolerance=1e-10, residual_tolerance=1e-14):
        self.simplification_voxel = simplification_voxel
        self.visibility_radius = visibility_radius
        self.k_nearest = k_nearest
        self.mesh_weight = mesh_weight
        self.visibility_weight = visibility_weight
        self.max_iters = max_iters
        self.step_tolerance = step_tolerance
        self.residual_tolerance = residual_tolerance

    def config(self) -> PgmoConfig:
        return PgmoConfig(**self.get_params())

    def fit(self, trajectory: PoseGraph, mesh: LabeledMesh | None = None, loops: Sequence[RelativePoseEdge] = ()):
        if loops:
            trajectory = trajectory.with_edges(list(trajectory.edges) + [replace(e, kind=EdgeKind.LOOP_CLOSURE) for e in loops])
        cfg = self.config()
        dg = build_deformation_graph(mesh, trajectory, cfg)
        self.initial_graph_ = dg
        self.deformation_graph_ = optimize(dg, cfg)
        self.trajectory_ = _trajectory_from(self.deformation_graph_, trajectory)
        self.report_ = self.deformation_graph_.report
        return self

    def transform(self, mesh: LabeledMesh) -> LabeledMesh:
        check_is_fitted(self, "deformation_graph_")
        return reskin(mesh, self.deformation_graph_, self.config())
