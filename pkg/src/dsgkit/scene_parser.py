"""Layers above the mesh: objects, places, rooms and wall structures.

* objects — single-linkage Euclidean clusters of object-labeled vertices;
* places — ridge points of the ESDF (a cheap medial-axis sample) greedily
  thinned to a minimum spacing, linked by clear straight segments;
* rooms — connected components of a horizontal ESDF section cut below the
  ceiling and truncated near obstacles, propagated to the remaining places
  by majority voting over the place graph;
* walls — each wall vertex votes for the rooms of places in front of it.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from . import labels as L
from .geom import Aabb
from .mesh_io import EsdfGrid, LabeledMesh
from ._validation import check_positive

UNASSIGNED = -1


# --------------------------------------------------------------------------- objects

@dataclass(eq=False)
class ObjectNode:
    id: int
    label: int
    centroid: np.ndarray
    aabb: Aabb
    member_vertices: np.ndarray

    @property
    def class_name(self) -> str:
        return L.class_name(self.label)


def _single_linkage(points: np.ndarray, dist: float) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(dist, output_type="ndarray")
    n = len(points)
    adj = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else sp.coo_matrix((n, n))
    _, comp = connected_components(adj, directed=False)
    return comp


def extract_objects(mesh: LabeledMesh, object_classes: Iterable[int] | None = None, cluster_dist: float = 0.1) -> list[ObjectNode]:
    """One node per same-class cluster; clusters are ordered (and numbered) by smallest member vertex id."""
    check_positive(cluster_dist, "cluster_dist")
    classes = sorted(L.OBJECT_CLASSES) if object_classes is None else sorted({int(c) for c in object_classes})
    clusters = []
    for cls in classes:
        idx = np.flatnonzero(mesh.labels == cls)
        if len(idx) == 0:
            continue
        comp = _single_linkage(mesh.positions[idx], cluster_dist)
        for c in np.unique(comp):
            clusters.append((cls, np.sort(idx[comp == c])))
    clusters.sort(key=lambda item: int(item[1][0]))
    out = []
    for k, (cls, members) in enumerate(clusters):
        pts = mesh.positions[members]
        out.append(ObjectNode(k, cls, pts.mean(axis=0), Aabb.from_points(pts), members))
    return out


# --------------------------------------------------------------------------- places

@dataclass(eq=False)
class PlaceGraph:
    """Free-space samples; an edge asserts a straight path with clearance between its ends."""

    positions: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    distances: np.ndarray = None  # ESDF value at each place
    ids: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            e = np.unique(np.sort(e, axis=1), axis=0)
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self edge in place graph")
        self.edges = e
        n = len(self.positions)
        self.distances = np.zeros(n) if self.distances is None else np.asarray(self.distances, dtype=float)
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric sparse matrix of Euclidean edge lengths."""
        n = len(self)
        if not len(self.edges):
            return sp.csr_matrix((n, n))
        a, b = self.edges[:, 0], self.edges[:, 1]
        w = np.linalg.norm(self.positions[a] - self.positions[b], axis=1)
        m = sp.coo_matrix((np.r_[w, w], (np.r_[a, b], np.r_[b, a])), shape=(n, n))
        return m.tocsr()

    def neighbors(self) -> list[list[int]]:
        nb = [[] for _ in range(len(self))]
        for a, b in self.edges:
            nb[a].append(int(b))
            nb[b].append(int(a))
        return [sorted(x) for x in nb]

    def components(self) -> np.ndarray:
        n = len(self)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        _, comp = connected_components(self.adjacency(), directed=False)
        return comp


def _column_peaks(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per (x, y) column: max distance and the z index in the middle of the first maximal run."""
    dmax = d.max(axis=2)
    at_max = d >= dmax[:, :, None] - 1e-6
    first = np.argmax(at_max, axis=2)
    nz = d.shape[2]
    z = np.arange(nz)[None, None, :]
    after = (~at_max) & (z > first[:, :, None])
    end = np.where(after.any(axis=2), np.argmax(after, axis=2), nz)
    return dmax, (first + end - 1) // 2


_DIRECTIONS = ((1, 0), (0, 1), (1, 1), (1, -1))


def _shifted(pad: np.ndarray, dx: int, dy: int) -> np.ndarray:
    return pad[1 + dx: pad.shape[0] - 1 + dx, 1 + dy: pad.shape[1] - 1 + dy]


def _ridge_mask(d2: np.ndarray) -> np.ndarray:
    """Cells that are a (non-strict) maximum along at least one of four line directions."""
    pad = np.pad(d2, 1, constant_values=-np.inf)
    c = pad[1:-1, 1:-1]
    ridge = np.zeros(d2.shape, dtype=bool)
    for dx, dy in _DIRECTIONS:
        ridge |= (c >= _shifted(pad, dx, dy)) & (c >= _shifted(pad, -dx, -dy))
    return ridge


def _saddles(d2: np.ndarray) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Bottleneck cells: a maximum across some direction and a minimum along the perpendicular one.

    Returns one ``(mask, passage_axis)`` pair per direction pair. Doors and
    narrow passages show up here; flat plateaus do not (both comparisons
    must be strict on at least one side).
    """
    pad = np.pad(d2, 1, constant_values=-np.inf)
    c = pad[1:-1, 1:-1]
    out = []
    for (ax, ay), (px, py) in (((1, 0), (0, 1)), ((0, 1), (1, 0)), ((1, 1), (1, -1)), ((1, -1), (1, 1))):
        a, b = _shifted(pad, px, py), _shifted(pad, -px, -py)
        f, r = _shifted(pad, ax, ay), _shifted(pad, -ax, -ay)
        across_max = (c >= a) & (c >= b) & ((c > a) | (c > b))
        along_min = (c <= f) & (c <= r) & ((c < f) | (c < r)) & np.isfinite(f) & np.isfinite(r)
        out.append((across_max & along_min, (ax, ay)))
    return out


class _SpacingIndex:
    """Bucket grid answering 'is any chosen point closer than r' in 2D."""

    def __init__(self, r: float):
        self.r = r
        self.r2 = r * r
        self.buckets: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def _key(self, x, y):
        return int(np.floor(x / self.r)), int(np.floor(y / self.r))

    def free(self, x: float, y: float) -> bool:
        cx, cy = self._key(x, y)
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for qx, qy in self.buckets.get((gx, gy), ()):
                    if (x - qx) ** 2 + (y - qy) ** 2 < self.r2:
                        return False
        return True

    def add(self, x: float, y: float) -> None:
        self.buckets.setdefault(self._key(x, y), []).append((x, y))


def extract_places(esdf: EsdfGrid, clearance: float = 0.1, sample_spacing: float = 1.0) -> PlaceGraph:
    """Sample free space at ESDF ridge points and link mutually visible neighbours.

    Bottleneck cells (doors, narrow passages) are placed first, each with an
    approach place half a spacing away on both sides of the passage axis so
    the crossing is always a pair of straight, clear segments. The remaining
    ridge cells of the column-wise maximum distance with ``d >= clearance``
    are then taken greedily by decreasing distance, rejecting any within
    ``sample_spacing`` (horizontally) of one already chosen. Each place sits
    at the middle of its column's maximal run. Places closer than
    ``2 * sample_spacing`` are linked when the straight segment keeps
    ``d >= clearance`` (sampled at half-voxel steps).
    """
    check_positive(clearance, "clearance")
    check_positive(sample_spacing, "sample_spacing")
    d = esdf.distances.astype(float)
    d2, zmid = _column_peaks(d)
    ok = d2 >= clearance
    nx, ny = d2.shape
    vs = esdf.voxel_size

    def xy_of(i, j):
        return esdf.origin[0] + (i + 0.5) * vs, esdf.origin[1] + (j + 0.5) * vs

    index = _SpacingIndex(sample_spacing)
    chosen: list[tuple[int, int]] = []

    saddle_cells = []
    for mask, axis in _saddles(d2):
        for i, j in zip(*np.nonzero(mask & ok)):
            saddle_cells.append((-d2[i, j], int(i), int(j), axis))
    saddle_cells.sort(key=lambda c: (c[0], c[1], c[2]))
    step = max(1, int(round(0.5 * sample_spacing / vs)))
    for _, i, j, (ax, ay) in saddle_cells:
        x, y = xy_of(i, j)
        if not index.free(x, y):
            continue
        index.add(x, y)
        chosen.append((i, j))
        for sgn in (1, -1):
            ai, aj = i + sgn * step * ax, j + sgn * step * ay
            if 0 <= ai < nx and 0 <= aj < ny and ok[ai, aj]:
                index.add(*xy_of(ai, aj))
                chosen.append((ai, aj))

    ix, iy = np.nonzero(ok & _ridge_mask(d2))
    order = np.lexsort((iy, ix, -d2[ix, iy]))
    for i, j in zip(ix[order], iy[order]):
        x, y = xy_of(i, j)
        if index.free(x, y):
            index.add(x, y)
            chosen.append((int(i), int(j)))
    if not chosen:
        return PlaceGraph(np.zeros((0, 3)))
    chosen = list(dict.fromkeys(chosen))
    gx = np.array([c[0] for c in chosen])
    gy = np.array([c[1] for c in chosen])
    gz = zmid[gx, gy]
    pos = esdf.index_to_world(np.stack([gx, gy, gz], 1))
    dist = d2[gx, gy]
    edges = []
    if len(pos) > 1:
        for a, b in cKDTree(pos).query_pairs(2.0 * sample_spacing, output_type="ndarray"):
            if esdf.segment_clear(pos[a], pos[b], clearance):
                edges.append((int(a), int(b)))
    return PlaceGraph(pos, np.array(edges, dtype=np.int64).reshape(-1, 2), dist)


# --------------------------------------------------------------------------- rooms

@dataclass(eq=False)
class Room:
    id: int
    place_ids: np.ndarray
    aabb: Aabb


@dataclass(eq=False)
class RoomSegmentation:
    rooms: list[Room]
    place_room: np.ndarray  # room id per place (-1 never happens after voting)
    adjacency: list[tuple[int, int]]

    def room_of(self, place: int) -> int:
        return int(self.place_room[place])


@dataclass
class RoomConfig:
    cut_below_ceiling: float = 0.3
    truncation: float = 0.2
    connectivity: int = 4

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def section_components(esdf: EsdfGrid, ceiling_height: float, cfg: RoomConfig | None = None) -> tuple[np.ndarray, int] | None:
    """Labelled components of the truncated ESDF section, or ``None`` if the cut misses the grid."""
    cfg = cfg or RoomConfig()
    z = ceiling_height - cfg.cut_below_ceiling
    iz = int(np.floor((z - esdf.origin[2]) / esdf.voxel_size))
    if iz < 0 or iz >= esdf.dims[2]:
        return None
    section = esdf.distances[:, :, iz].astype(float)
    structure = ndimage.generate_binary_structure(2, 1 if cfg.connectivity == 4 else 2)
    comp, n = ndimage.label(section > cfg.truncation, structure=structure)
    return comp, n


def _majority_vote(labels: np.ndarray, neighbors: list[list[int]]) -> np.ndarray:
    labels = labels.copy()
    while True:
        updates = {}
        for i in np.flatnonzero(labels < 0):
            votes = Counter(int(labels[j]) for j in neighbors[i] if labels[j] >= 0)
            if votes:
                best = max(votes.values())
                updates[i] = min(r for r, c in votes.items() if c == best)
        if not updates:
            return labels
        for i, r in updates.items():
            labels[i] = r


def segment_rooms(esdf: EsdfGrid, places: PlaceGraph, ceiling_height: float, cfg: RoomConfig | None = None) -> RoomSegmentation:
    """Rooms from the ESDF section below the ceiling, completed by place-graph voting."""
    cfg = cfg or RoomConfig()
    n = len(places)
    labels = np.full(n, -1, dtype=np.int64)
    comps = section_components(esdf, ceiling_height, cfg)
    comp_boxes: dict[int, Aabb] = {}
    if comps is None or comps[1] == 0:
        labels[:] = 0
    else:
        comp, _ = comps
        idx = esdf.world_to_index(places.positions)[:, :2] if n else np.zeros((0, 2), dtype=np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(esdf.dims[:2])), axis=1)
        labels[inside] = comp[idx[inside, 0], idx[inside, 1]] - 1  # background 0 -> -1
        for c, sl in enumerate(ndimage.find_objects(comp)):
            if sl is None:
                continue
            lo = esdf.origin[:2] + np.array([sl[0].start, sl[1].start]) * esdf.voxel_size
            hi = esdf.origin[:2] + np.array([sl[0].stop, sl[1].stop]) * esdf.voxel_size
            comp_boxes[c] = Aabb([lo[0], lo[1], esdf.origin[2]], [hi[0], hi[1], ceiling_height])
        labels = _majority_vote(labels, places.neighbors())
        # places never reached by a vote: each connected leftover group becomes a room
        rest = np.flatnonzero(labels < 0)
        if len(rest):
            sub = places.adjacency()[rest][:, rest]
            _, cc = connected_components(sub, directed=False)
            base = int(labels.max()) + 1 if (labels >= 0).any() else 0
            base = max(base, comps[1])
            labels[rest] = base + cc
    used = sorted(set(labels.tolist()))
    renum = {old: new for new, old in enumerate(used)}
    labels = np.array([renum[v] for v in labels], dtype=np.int64)
    rooms = []
    for old, new in renum.items():
        members = np.flatnonzero(labels == new)
        box = Aabb.from_points(places.positions[members])
        if old in comp_boxes:
            box = box.union(comp_boxes[old])
        rooms.append(Room(new, members, box))
    adj = set()
    for a, b in places.edges:
        ra, rb = int(labels[a]), int(labels[b])
        if ra != rb:
            adj.add((min(ra, rb), max(ra, rb)))
    return RoomSegmentation(rooms, labels, sorted(adj))


# --------------------------------------------------------------------------- walls

def assign_walls(mesh: LabeledMesh, wall_class: int, places: PlaceGraph, rooms: RoomSegmentation,
                 search_radius: float = 0.5) -> np.ndarray:
    """Room id per mesh vertex (``UNASSIGNED`` for non-wall vertices and vertices without votes).

    Places within ``search_radius`` in front of the vertex (``n.d > 0``) vote
    for their room with weight ``n.d / |d|^2``; ties go to the lowest room id.
    """
    check_positive(search_radius, "search_radius")
    out = np.full(len(mesh), UNASSIGNED, dtype=np.int64)
    walls = np.flatnonzero(mesh.labels == wall_class)
    if len(walls) == 0 or len(places) == 0:
        return out
    labeled = np.flatnonzero(rooms.place_room >= 0)
    if len(labeled) == 0:
        return out
    tree = cKDTree(places.positions[labeled])
    hits = tree.query_ball_point(mesh.positions[walls], search_radius)
    n_rooms = max(r.id for r in rooms.rooms) + 1
    for v, cand in zip(walls, hits):
        if not cand:
            continue
        cand = labeled[np.asarray(cand)]
        d = places.positions[cand] - mesh.positions[v]
        nd = d @ mesh.normals[v]
        sq = np.einsum("ij,ij->i", d, d)
        ok = (nd > 0) & (sq > 0)
        if not ok.any():
            continue
        score = np.bincount(rooms.place_room[cand[ok]], weights=nd[ok] / sq[ok], minlength=n_rooms)
        out[v] = int(np.argmax(score))
    return out


# --------------------------------------------------------------------------- estimators

class RoomSegmenter(BaseEstimator):
    """``fit(esdf)`` extracts places and segments rooms; ``predict(points)`` gives the room of the nearest place."""

    def __init__(self, clearance=0.1, sample_spacing=1.0, ceiling_height=None,
                 cut_below_ceiling=0.3, truncation=0.2, connectivity=4):
        self.clearance = clearance
        self.sample_spacing = sample_spacing
        self.ceiling_height = ceiling_height
        self.cut_below_ceiling = cut_below_ceiling
        self.truncation = truncation
        self.connectivity = connectivity

    def fit(self, esdf: EsdfGrid, mesh: LabeledMesh | None = None):
        ceiling = self.ceiling_height
        if ceiling is None:
            ceiling = detect_ceiling(mesh) if mesh is not None else None
        if ceiling is None:
            raise ValueError("ceiling_height is required when no mesh with ceiling labels is given")
        self.ceiling_height_ = float(ceiling)
        self.places_ = extract_places(esdf, self.clearance, self.sample_spacing)
        cfg = RoomConfig(self.cut_below_ceiling, self.truncation, self.connectivity)
        self.segmentation_ = segment_rooms(esdf, self.places_, self.ceiling_height_, cfg)
        self.n_rooms_ = len(self.segmentation_.rooms)
        return self

    def predict(self, points) -> np.ndarray:
        if len(self.places_) == 0:
            return np.full(len(np.atleast_2d(points)), UNASSIGNED)
        _, idx = cKDTree(self.places_.positions).query(np.atleast_2d(points))
        return self.segmentation_.place_room[idx]


class ObjectExtractor(TransformerMixin, BaseEstimator):
    """``transform(mesh)`` returns the object nodes found in a labeled mesh."""

    def __init__(self, object_classes=None, cluster_dist=0.1):
        self.object_classes = object_classes
        self.cluster_dist = cluster_dist

    def fit(self, mesh=None, y=None):
        check_positive(self.cluster_dist, "cluster_dist")
        return self

    def transform(self, mesh: LabeledMesh) -> list[ObjectNode]:
        return extract_objects(mesh, self.object_classes, self.cluster_dist)


def detect_ceiling(mesh: LabeledMesh | None) -> float | None:
    """Highest ceiling-labeled vertex, if any."""
    if mesh is None:
        return None
    z = mesh.positions[mesh.labels == L.CEILING, 2]
    return float(z.max()) if len(z) else None


def place_precision_recall(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Place-level precision/recall of a room labelling against ground-truth rooms.

    Each predicted room is matched to the true room most of its places
    belong to (precision) and vice versa (recall). Places with a negative
    true label (doors, walls) are ignored.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    keep = truth >= 0
    pred, truth = pred[keep], truth[keep]
    if len(pred) == 0:
        return 1.0, 1.0

    def matched(a, b):
        hit = 0
        for r in np.unique(a):
            hit += Counter(b[a == r].tolist()).most_common(1)[0][1]
        return hit / len(a)

    return matched(pred, truth), matched(truth, pred)
