"""Pose-graph container, g2o-style text I/O and trajectory error metrics."""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .geom import EdgeWeight, RigidTransform, compose

# positions of the diagonal entries in the 21-value upper-triangular block (x y z | qx qy qz)
_TRANS_DIAG = (0, 6, 11)
_ROT_DIAG = (15, 18, 20)


class G2oFormatError(ValueError):
    """Raised for malformed g2o text; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class EdgeKind(str, enum.Enum):
    ODOMETRY = "odometry"
    LOOP_CLOSURE = "loop_closure"


@dataclass(frozen=True)
class PoseNode:
    id: int
    stamp: float
    pose: RigidTransform


@dataclass(frozen=True)
class RelativePoseEdge:
    from_id: int
    to_id: int
    measurement: RigidTransform
    weight: EdgeWeight = field(default_factory=EdgeWeight)
    kind: EdgeKind = EdgeKind.ODOMETRY

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError("edge endpoints must differ")


@dataclass
class PoseGraph:
    """Time-stamped poses plus relative-pose edges.

    Nodes are kept in odometry order. Treat instances as values: helpers
    return new graphs rather than mutating in place.
    """

    nodes: list[PoseNode] = field(default_factory=list)
    edges: list[RelativePoseEdge] = field(default_factory=list)

    def __post_init__(self):
        self._index = {n.id: i for i, n in enumerate(self.nodes)}
        if len(self._index) != len(self.nodes):
            raise ValueError("duplicate node id")
        self._odo_index = None

    def _odometry_index(self):
        if self._odo_index is None:
            odo = self.odometry
            self._odo_index = ({e.from_id: e for e in odo}, {e.to_id: e for e in odo})
        return self._odo_index

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def index_of(self, node_id: int) -> int:
        return self._index[node_id]

    def has_node(self, node_id: int) -> bool:
        return node_id in self._index

    def node(self, node_id: int) -> PoseNode:
        return self.nodes[self._index[node_id]]

    def pose(self, node_id: int) -> RigidTransform:
        return self.node(node_id).pose

    @property
    def odometry(self) -> list[RelativePoseEdge]:
        return [e for e in self.edges if e.kind is EdgeKind.ODOMETRY]

    @property
    def loop_closures(self) -> list[RelativePoseEdge]:
        return [e for e in self.edges if e.kind is EdgeKind.LOOP_CLOSURE]

    def positions(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3))
        return np.array([n.pose.translation for n in self.nodes])

    def with_poses(self, poses: Iterable[RigidTransform]) -> "PoseGraph":
        nodes = [replace(n, pose=p) for n, p in zip(self.nodes, poses, strict=True)]
        return PoseGraph(nodes, list(self.edges))

    def with_edges(self, edges: Iterable[RelativePoseEdge]) -> "PoseGraph":
        return PoseGraph(list(self.nodes), list(edges))

    def without_loops(self) -> "PoseGraph":
        return self.with_edges(self.odometry)

    def chain_transform(self, from_id: int, to_id: int) -> tuple[RigidTransform, int]:
        """Compose odometry measurements from ``from_id`` to ``to_id``.

        Returns the composed transform and the number of edges traversed.
        Walking backwards along the chain uses inverted measurements.
        """
        odo, odo_rev = self._odometry_index()
        i, j = self.index_of(from_id), self.index_of(to_id)
        t = RigidTransform.identity()
        count = 0
        if i <= j:
            cur = from_id
            while cur != to_id:
                e = odo.get(cur)
                if e is None:
                    raise ValueError(f"nodes {from_id} and {to_id} are not connected by odometry")
                t = compose(t, e.measurement)
                cur = e.to_id
                count += 1
        else:
            cur = from_id
            while cur != to_id:
                e = odo_rev.get(cur)
                if e is None:
                    raise ValueError(f"nodes {from_id} and {to_id} are not connected by odometry")
                t = compose(t, e.measurement.inverse())
                cur = e.from_id
                count += 1
        return t, count

    def dead_reckoning(self) -> "PoseGraph":
        """Poses obtained by chaining odometry from the first node."""
        if not self.nodes:
            return PoseGraph()
        poses = [self.nodes[0].pose]
        for n in self.nodes[1:]:
            rel, _ = self.chain_transform(self.nodes[0].id, n.id)
            poses.append(compose(self.nodes[0].pose, rel))
        return self.with_poses(poses)


def _diag_weight(info: list[float], idx) -> float:
    vals = [info[k] for k in idx]
    # exact when isotropic, so weights survive a save/load round trip
    return vals[0] if len(set(vals)) == 1 else float(np.mean(vals))


def load_g2o(data: bytes | str) -> PoseGraph:
    """Parse ``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` lines.

    Edges between consecutive ids are odometry (the first one per pair);
    everything else is a loop closure. Information blocks are collapsed to
    isotropic weights by averaging their translational and rotational
    diagonals.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    nodes: list[PoseNode] = []
    seen: set[int] = set()
    raw_edges = []
    for lineno, line in enumerate(io.StringIO(data), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        tag = tok[0]
        try:
            if tag == "VERTEX_SE3:QUAT":
                if len(tok) != 9:
                    raise G2oFormatError(lineno, f"expected 9 fields, got {len(tok)}")
                vid = int(tok[1])
                if vid in seen:
                    raise G2oFormatError(lineno, f"duplicate vertex id {vid}")
                vals = [float(x) for x in tok[2:]]
                pose = RigidTransform.from_quaternion(vals[3:7], vals[0:3])
                seen.add(vid)
                nodes.append(PoseNode(vid, float(vid), pose))
            elif tag == "EDGE_SE3:QUAT":
                if len(tok) != 31:
                    raise G2oFormatError(lineno, f"expected 31 fields, got {len(tok)}")
                i, j = int(tok[1]), int(tok[2])
                vals = [float(x) for x in tok[3:10]]
                info = [float(x) for x in tok[10:]]
                meas = RigidTransform.from_quaternion(vals[3:7], vals[0:3])
                w = EdgeWeight(rotation=_diag_weight(info, _ROT_DIAG), translation=_diag_weight(info, _TRANS_DIAG))
                raw_edges.append((lineno, i, j, meas, w))
            else:
                raise G2oFormatError(lineno, f"unknown record {tag!r}")
        except G2oFormatError:
            raise
        except ValueError as exc:
            raise G2oFormatError(lineno, str(exc)) from exc
    nodes.sort(key=lambda n: n.id)
    edges = []
    odo_pairs = set()
    for lineno, i, j, meas, w in raw_edges:
        if i == j:
            raise G2oFormatError(lineno, "self edge")
        kind = EdgeKind.LOOP_CLOSURE
        if j == i + 1 and (i, j) not in odo_pairs:
            kind = EdgeKind.ODOMETRY
            odo_pairs.add((i, j))
        edges.append(RelativePoseEdge(i, j, meas, w, kind))
    return PoseGraph(nodes, edges)


def _fmt(x: float) -> str:
    return repr(float(x))


def edge_line(e: RelativePoseEdge) -> str:
    info = [0.0] * 21
    for k in _TRANS_DIAG:
        info[k] = e.weight.translation
    for k in _ROT_DIAG:
        info[k] = e.weight.rotation
    t = e.measurement.translation
    q = e.measurement.quaternion()
    fields = ["EDGE_SE3:QUAT", str(e.from_id), str(e.to_id)]
    fields += [_fmt(v) for v in (*t, *q)] + [_fmt(v) for v in info]
    return " ".join(fields)


def save_g2o(g: PoseGraph) -> bytes:
    lines = []
    for n in g.nodes:
        t = n.pose.translation
        q = n.pose.quaternion()
        lines.append(" ".join(["VERTEX_SE3:QUAT", str(n.id)] + [_fmt(v) for v in (*t, *q)]))
    lines.extend(edge_line(e) for e in g.edges)
    return "".join(line + "\n" for line in lines).encode("utf-8")


def save_edges_g2o(edges: Iterable[RelativePoseEdge]) -> bytes:
    return "".join(edge_line(e) + "\n" for e in edges).encode("utf-8")


def load_edges_g2o(data: bytes | str) -> list[RelativePoseEdge]:
    """Read an edge-only file (e.g. candidate loop closures); every edge is a loop."""
    g = load_g2o(data)
    return [replace(e, kind=EdgeKind.LOOP_CLOSURE) for e in g.edges]


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``source`` onto ``target``."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, mu_t - r @ mu_s


def ate_rmse(estimate: PoseGraph, reference: PoseGraph) -> float:
    """RMSE of translations after the best rigid alignment of ``estimate`` onto ``reference``."""
    if estimate.ids != reference.ids:
        if sorted(estimate.ids) != sorted(reference.ids):
            raise ValueError("estimate and reference have different node ids")
    ref = np.array([reference.pose(i).translation for i in estimate.ids])
    est = estimate.positions()
    if len(est) == 0:
        raise ValueError("cannot evaluate an empty trajectory")
    r, t = align_rigid(est, ref)
    res = est @ r.T + t - ref
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
