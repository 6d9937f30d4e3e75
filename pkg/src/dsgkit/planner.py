"""Hierarchical semantic path planning on a scene graph and the volumetric A* baseline.

The hierarchical planner runs A* three times, each time on a smaller slice
of the graph: buildings, then the rooms of the chosen buildings, then the
places of the chosen rooms. The place path is shortened by straight-line
shortcuts that keep ESDF clearance. The baseline is A* over 26-connected
free voxels.
"""
from __future__ import annotations

import csv
import heapq
import io
import math
import re
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from . import labels as L
from ._validation import check_point, check_positive
from .dsg_core import NodeKind, SceneGraph, _natural
from .mesh_io import EsdfGrid


class NoSuchTarget(LookupError):
    """No object in the scene graph matches the query."""


class Unreachable(RuntimeError):
    """No path connects start and goal."""


@dataclass
class SemanticQuery:
    """"Get near any object of a class (or a given object), optionally in room y of building z"."""

    start: np.ndarray
    object_class: str | None = None
    object_id: str | None = None
    room_id: str | None = None
    building_id: str | None = None

    def __post_init__(self):
        self.start = check_point(self.start, "start")
        if self.object_class is None and self.object_id is None:
            raise ValueError("query needs object_class or object_id")


_QUERY_KEYS = {"class": "object_class", "object": "object_id", "room": "room_id", "building": "building_id"}


def parse_query(text: str, start) -> SemanticQuery:
    """Parse ``"near class=cup room=R2 building=B0"`` (ids are case-insensitive)."""
    tokens = text.split()
    if tokens and tokens[0].lower() == "near":
        tokens = tokens[1:]
    kw = {}
    for tok in tokens:
        m = re.fullmatch(r"(\w+)=(\S+)", tok)
        if not m or m.group(1).lower() not in _QUERY_KEYS:
            raise ValueError(f"bad query token {tok!r}")
        key = _QUERY_KEYS[m.group(1).lower()]
        val = m.group(2)
        kw[key] = val if key == "object_class" else val.lower()
    return SemanticQuery(start=start, **kw)


@dataclass
class PlanResult:
    waypoints: np.ndarray
    cost: float
    visited: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    fallback: bool = False
    expanded: int = 0
    raw_cost: float | None = None  # place polyline length before shortcutting

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)


def polyline_length(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


# --------------------------------------------------------------------------- generic A*

def astar(adjacency: dict, positions: dict, start, goal, allowed=None):
    """A* with a Euclidean heuristic over ``adjacency[node] -> [(neighbour, cost), ...]``.

    Edge costs must be at least the Euclidean distance between endpoint
    positions, which makes the heuristic consistent. Returns ``(path, cost,
    expanded)`` or ``None`` when ``goal`` is unreachable. Ties break on the
    natural order of node ids, so results are deterministic. ``allowed``
    optionally restricts the search to a node subset.
    """
    goal_pos = positions[goal]

    def h(n):
        return float(math.dist(positions[n], goal_pos))

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), _natural(start), start)]
    closed = set()
    expanded = 0
    while heap:
        _, _, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1], g[goal], expanded
        closed.add(node)
        expanded += 1
        for nb, c in adjacency.get(node, ()):
            if nb in closed or (allowed is not None and nb not in allowed):
                continue
            cand = g[node] + c
            if cand < g.get(nb, math.inf):
                g[nb] = cand
                parent[nb] = node
                heapq.heappush(heap, (cand + h(nb), _natural(nb), nb))
    return None


def _euclid_graph(g: SceneGraph, nodes, edges) -> tuple[dict, dict]:
    pos = {n: np.asarray(g.nodes[n].position, dtype=float) for n in nodes}
    adj: dict = {n: [] for n in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            c = float(np.linalg.norm(pos[a] - pos[b]))
            adj[a].append((b, c))
            adj[b].append((a, c))
    for n in adj:
        adj[n].sort(key=lambda t: _natural(t[0]))
    return adj, pos


# --------------------------------------------------------------------------- graph slices

def room_of(g: SceneGraph, nid: str) -> str | None:
    rooms = g.parents_of(nid, NodeKind.ROOM)
    return min(rooms, key=_natural) if rooms else None


def building_of(g: SceneGraph, room: str | None) -> str | None:
    if room is None:
        return None
    bs = g.parents_of(room, NodeKind.BUILDING)
    return min(bs, key=_natural) if bs else None


def _place_edges(g: SceneGraph):
    return [(a, b) for a, b in g.intra if g.nodes[a].kind is NodeKind.PLACE]


def _room_edges(g: SceneGraph):
    return [(a, b) for a, b in g.intra if g.nodes[a].kind is NodeKind.ROOM]


def building_edges(g: SceneGraph) -> list[tuple[str, str]]:
    """Explicit building-building edges plus those implied by rooms adjacent across buildings."""
    out = {(a, b) for a, b in g.intra if g.nodes[a].kind is NodeKind.BUILDING}
    for a, b in _room_edges(g):
        ba, bb = building_of(g, a), building_of(g, b)
        if ba is not None and bb is not None and ba != bb:
            out.add((min(ba, bb), max(ba, bb)))
    return sorted(out)


def snap_to_place(g: SceneGraph, point) -> str:
    """Nearest place within the room whose box contains ``point``, else the globally nearest place."""
    point = check_point(point, "point")
    places = g.of_kind(NodeKind.PLACE)
    if not places:
        raise Unreachable("scene graph has no places")
    for room in g.of_kind(NodeKind.ROOM):
        if room.aabb is not None and room.aabb.contains_point(point):
            cand = g.children_of(room.id, NodeKind.PLACE)
            if cand:
                places = [g.nodes[c] for c in sorted(cand, key=_natural)]
                break
    d = [float(np.linalg.norm(n.position - point)) for n in places]
    return places[int(np.argmin(d))].id


def _place_distances(g: SceneGraph, source: str) -> dict[str, float]:
    ids, pos, edges = g.place_graph()
    index = {p: k for k, p in enumerate(ids)}
    n = len(ids)
    if edges:
        e = np.array(edges)
        w = np.linalg.norm(pos[e[:, 0]] - pos[e[:, 1]], axis=1)
        m = sp.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    else:
        m = sp.csr_matrix((n, n))
    dist = dijkstra(m, directed=False, indices=index[source])
    return {p: float(dist[k]) for p, k in index.items()}


def matching_objects(g: SceneGraph, q: SemanticQuery) -> list[str]:
    out = []
    cls = None
    if q.object_class is not None:
        try:
            cls = L.class_id(q.object_class)
        except KeyError:
            raise NoSuchTarget(f"unknown class {q.object_class!r}") from None
    for obj in g.of_kind(NodeKind.OBJECT):
        if q.object_id is not None and obj.id != q.object_id:
            continue
        if cls is not None and int(obj.attributes.get("label", -1)) != cls:
            continue
        room = room_of(g, obj.id)
        if q.room_id is not None and room != q.room_id:
            continue
        if q.building_id is not None and building_of(g, room) != q.building_id:
            continue
        if g.parents_of(obj.id, NodeKind.PLACE):
            out.append(obj.id)
    return out


def resolve_query(g: SceneGraph, q: SemanticQuery) -> str:
    """Place linked to a matching object, nearest by place-graph distance to the start's place.

    Ties (including all-unreachable) break on the lowest place id.
    """
    objects = matching_objects(g, q)
    if not objects:
        raise NoSuchTarget(f"no object matches {q}")
    start = snap_to_place(g, q.start)
    dist = _place_distances(g, start)
    goals = sorted({g.parents_of(o, NodeKind.PLACE)[0] for o in objects}, key=_natural)
    return min(goals, key=lambda p: (dist[p], _natural(p)))


# --------------------------------------------------------------------------- hierarchical planning

def shortcut(points: np.ndarray, esdf: EsdfGrid, clearance: float) -> np.ndarray:
    """Greedy shortcutting: from each kept waypoint jump to the farthest one reachable in a straight clear line."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) <= 2:
        return pts
    keep = [0]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not esdf.segment_clear(pts[i], pts[j], clearance):
            j -= 1
        keep.append(j)
        i = j
    return pts[keep]


class HierarchicalPlanner:
    """Per-layer adjacency of a scene graph, indexed once and queried many times.

    ``plan`` runs A* over buildings, then over the rooms of the chosen
    buildings, then over the places of the chosen rooms (places without a
    room stay available). All levels use Euclidean edge costs between node
    positions (room and building positions are centroids) and a Euclidean
    heuristic. If the restricted place search fails, it is repeated on the
    full place graph and the result is flagged ``fallback``.
    """

    def __init__(self, g: SceneGraph, esdf: EsdfGrid | None = None, clearance: float = 0.1):
        self.g = g
        self.esdf = esdf
        self.clearance = check_positive(clearance, "clearance")
        self.place_room = {p.id: room_of(g, p.id) for p in g.of_kind(NodeKind.PLACE)}
        self.room_building = {r.id: building_of(g, r.id) for r in g.of_kind(NodeKind.ROOM)}
        self.room_places: dict[str, list[str]] = {r: [] for r in self.room_building}
        for p, r in self.place_room.items():
            if r is not None:
                self.room_places[r].append(p)
        buildings = [b.id for b in g.of_kind(NodeKind.BUILDING) if b.position is not None]
        self.b_adj, self.b_pos = _euclid_graph(g, buildings, building_edges(g))
        self.r_adj, self.r_pos = _euclid_graph(g, list(self.room_building), _room_edges(g))
        self.p_adj, self.p_pos = _euclid_graph(g, list(self.place_room), _place_edges(g))
        self.unroomed = {p for p, r in self.place_room.items() if r is None}
        self.room_boxes = [(r.id, r.aabb) for r in g.of_kind(NodeKind.ROOM) if r.aabb is not None]

    def level_sizes(self) -> dict[str, tuple[int, int]]:
        """(nodes, edges) per level, as reported in the benchmark table."""
        def count(adj):
            return len(adj), sum(len(v) for v in adj.values()) // 2
        return {"places": count(self.p_adj), "rooms": count(self.r_adj), "buildings": count(self.b_adj)}

    def snap(self, point) -> str:
        """Nearest place in the room whose box contains ``point``, else the globally nearest place."""
        point = check_point(point, "point")
        if not self.p_pos:
            raise Unreachable("scene graph has no places")
        cand = None
        for rid, box in self.room_boxes:
            if box.contains_point(point) and self.room_places[rid]:
                cand = self.room_places[rid]
                break
        if cand is None:
            cand = list(self.p_pos)
        return min(cand, key=lambda p: (float(np.linalg.norm(self.p_pos[p] - point)), _natural(p)))

    def plan(self, start, goal_place: str) -> PlanResult:
        start = check_point(start, "start")
        if goal_place not in self.p_pos:
            raise KeyError(f"no place {goal_place!r}")
        t0 = time.perf_counter()
        timings = {}
        start_place = self.snap(start)
        start_room, goal_room = self.place_room[start_place], self.place_room[goal_place]
        start_b = self.room_building.get(start_room)
        goal_b = self.room_building.get(goal_room)

        t = time.perf_counter()
        buildings = None
        if start_b in self.b_adj and goal_b in self.b_adj:
            found = astar(self.b_adj, self.b_pos, start_b, goal_b)
            buildings = found[0] if found else None
        timings["buildings"] = time.perf_counter() - t

        t = time.perf_counter()
        rooms = None
        if buildings is not None:
            chosen = set(buildings)
            allowed = {r for r, b in self.room_building.items() if b in chosen}
            found = astar(self.r_adj, self.r_pos, start_room, goal_room, allowed)
            rooms = found[0] if found else None
        timings["rooms"] = time.perf_counter() - t

        t = time.perf_counter()
        found = None
        if rooms is not None:
            allowed = set(self.unroomed)
            for r in rooms:
                allowed.update(self.room_places[r])
            found = astar(self.p_adj, self.p_pos, start_place, goal_place, allowed)
        fallback = found is None and rooms is not None
        if found is None:
            found = astar(self.p_adj, self.p_pos, start_place, goal_place)
        timings["places"] = time.perf_counter() - t
        if found is None:
            raise Unreachable(f"no place path from {start_place} to {goal_place}")
        path, _, expanded = found

        t = time.perf_counter()
        raw = np.vstack([start[None], [self.p_pos[p] for p in path]])
        if np.allclose(raw[0], raw[1]):
            raw = raw[1:]
        wps = shortcut(raw, self.esdf, self.clearance) if self.esdf is not None else raw
        timings["smoothing"] = time.perf_counter() - t
        timings["total"] = time.perf_counter() - t0
        visited = {"buildings": list(buildings or []), "rooms": list(rooms or []), "places": list(path)}
        return PlanResult(wps, polyline_length(wps), visited, timings, fallback, expanded, polyline_length(raw))


def plan_hierarchical(g: SceneGraph, start, goal_place: str, esdf: EsdfGrid | None = None,
                      clearance: float = 0.1) -> PlanResult:
    """One-shot :class:`HierarchicalPlanner` query (shortcutting only when an ESDF is given)."""
    return HierarchicalPlanner(g, esdf, clearance).plan(start, goal_place)


# --------------------------------------------------------------------------- volumetric baseline

_SQRT = (0.0, 1.0, math.sqrt(2.0), math.sqrt(3.0))


def _offsets(connectivity: int):
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                k = abs(dx) + abs(dy) + abs(dz)
                if k == 0 or (connectivity == 6 and k > 1) or (connectivity == 18 and k > 2):
                    continue
                out.append((dx, dy, dz, k))
    return out


def grid_path_cost(cells: np.ndarray, voxel_size: float) -> float:
    """Canonical cost of a voxel path: ``v * (n1 + n2 sqrt2 + n3 sqrt3)`` from its step counts.

    Because 1, sqrt2 and sqrt3 are rationally independent, two optimal grid
    paths have equal step counts and therefore bit-identical canonical costs.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) < 2:
        return 0.0
    k = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    n = np.bincount(k, minlength=4)
    return float(voxel_size * (n[1] + n[2] * _SQRT[2] + n[3] * _SQRT[3]))


def grid_distortion(connectivity: int = 26, samples: int = 801) -> float:
    """Worst ratio of shortest grid-path length to straight-line length over all directions.

    Directions are sampled as ``(1, a, b)`` with ``1 >= a >= b >= 0`` (all
    others follow by symmetry); the grid length of a direction has a closed
    form per neighbourhood.
    """
    t = np.linspace(0.0, 1.0, samples)
    a, b = np.meshgrid(t, t, indexing="ij")
    a, b = a[b <= a], b[b <= a]
    if connectivity == 26:
        grid = (1 - a) + (a - b) * _SQRT[2] + b * _SQRT[3]
    elif connectivity == 18:
        grid = np.where(1 >= a + b, (1 - a - b) + (a + b) * _SQRT[2], 0.5 * (1 + a + b) * _SQRT[2])
    elif connectivity == 6:
        grid = 1 + a + b
    else:
        raise ValueError("connectivity must be 6, 18 or 26")
    return float((grid / np.sqrt(1 + a ** 2 + b ** 2)).max())


class EsdfPlanner:
    """A* over free voxels (``d >= clearance``) with Euclidean step costs and heuristic.

    The free mask is padded by one solid voxel so neighbour offsets never
    leave the array; the search works on flat indices.
    """

    def __init__(self, esdf: EsdfGrid, clearance: float = 0.1, connectivity: int = 26):
        self.esdf = esdf
        self.clearance = check_positive(clearance, "clearance")
        if connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")
        nx, ny, nz = esdf.dims
        free = np.zeros((nx + 2, ny + 2, nz + 2), dtype=np.uint8)
        free[1:-1, 1:-1, 1:-1] = esdf.distances >= clearance
        self.sy, self.sz = (ny + 2) * (nz + 2), nz + 2
        self.free = free.tobytes()
        vs = float(esdf.voxel_size)
        self.nbrs = [(dx * self.sy + dy * self.sz + dz, vs * _SQRT[k])
                     for dx, dy, dz, k in _offsets(connectivity)]

    def _flat(self, point, name):
        idx = self.esdf.world_to_index(check_point(point, name))
        if not self.esdf.in_bounds(idx) or self.esdf.distances[tuple(idx)] < self.clearance:
            raise ValueError(f"{name} is not in free space")
        return int((idx[0] + 1) * self.sy + (idx[1] + 1) * self.sz + idx[2] + 1)

    def plan(self, start, goal) -> PlanResult:
        t0 = time.perf_counter()
        s, goal_f = self._flat(start, "start"), self._flat(goal, "goal")
        sy, sz, freeb, nbrs = self.sy, self.sz, self.free, self.nbrs
        vs = float(self.esdf.voxel_size)
        gx, rem = divmod(goal_f, sy)
        gy, gz = divmod(rem, sz)
        gscore = {s: 0.0}
        parent = {s: -1}
        closed = bytearray(len(freeb))
        sqrt = math.sqrt
        heap = [(0.0, s)]
        expanded = 0
        found = False
        while heap:
            _, i = heapq.heappop(heap)
            if closed[i]:
                continue
            if i == goal_f:
                found = True
                break
            closed[i] = 1
            expanded += 1
            gi = gscore[i]
            for off, c in nbrs:
                j = i + off
                if not freeb[j] or closed[j]:
                    continue
                cand = gi + c
                if cand < gscore.get(j, math.inf):
                    gscore[j] = cand
                    parent[j] = i
                    x, r = divmod(j, sy)
                    y, z = divmod(r, sz)
                    heapq.heappush(heap, (cand + vs * sqrt((x - gx) ** 2 + (y - gy) ** 2 + (z - gz) ** 2), j))
        if not found:
            raise Unreachable("no free-voxel path between start and goal")
        chain = []
        i = goal_f
        while i != -1:
            chain.append(i)
            i = parent[i]
        chain = np.array(chain[::-1], dtype=np.int64)
        x, r = np.divmod(chain, sy)
        y, z = np.divmod(r, sz)
        cells = np.stack([x - 1, y - 1, z - 1], axis=1)
        total = time.perf_counter() - t0
        return PlanResult(self.esdf.index_to_world(cells), grid_path_cost(cells, vs), {"voxels": len(cells)},
                          {"total": total}, False, expanded)


def plan_esdf(esdf: EsdfGrid, start, goal, clearance: float = 0.1, connectivity: int = 26) -> PlanResult:
    """One-shot :class:`EsdfPlanner` query; the returned path is optimal on the voxel graph."""
    return EsdfPlanner(esdf, clearance, connectivity).plan(start, goal)


# --------------------------------------------------------------------------- benchmark

BENCH_COLUMNS = [
    "dataset", "scene", "query", "buildings",
    "time_esdf_s", "time_places_s", "time_rooms_s", "time_buildings_s", "time_total_s",
    "places_nodes", "places_edges", "rooms_nodes", "rooms_edges", "buildings_nodes", "buildings_edges",
    "length_esdf_m", "length_hierarchical_m",
    "speedup", "length_ratio", "fallback",
]
TIMING_COLUMNS = ("time_esdf_s", "time_places_s", "time_rooms_s", "time_buildings_s", "time_total_s", "speedup")


def far_queries(g: SceneGraph, n: int = 3) -> list[SemanticQuery]:
    """Deterministic long-range queries: from the corner place of the first building to the
    ``n`` objects of the last building farthest from it (object class + its room + building)."""
    buildings = [b.id for b in g.of_kind(NodeKind.BUILDING)]
    first, last = buildings[0], buildings[-1]
    starts = [p for p in g.of_kind(NodeKind.PLACE) if building_of(g, room_of(g, p.id)) == first]
    if not starts:
        raise NoSuchTarget("first building has no places")
    start = min(starts, key=lambda p: (float(p.position[0] + p.position[1]), _natural(p.id))).position
    objs = [o for o in g.of_kind(NodeKind.OBJECT)
            if building_of(g, room_of(g, o.id)) == last and g.parents_of(o.id, NodeKind.PLACE)]
    objs.sort(key=lambda o: (-float(np.linalg.norm(o.position - start)), _natural(o.id)))
    out, seen = [], set()
    for o in objs:
        key = (o.attributes["class"], room_of(g, o.id))
        if key not in seen and len(out) < n:
            seen.add(key)
            out.append(SemanticQuery(start.copy(), object_class=key[0], room_id=key[1], building_id=last))
    return out


def format_query(q: SemanticQuery) -> str:
    parts = ["near"]
    for key, name in (("object_class", "class"), ("object_id", "object"), ("room_id", "room"),
                      ("building_id", "building")):
        v = getattr(q, key)
        if v is not None:
            parts.append(f"{name}={v}")
    return " ".join(parts)


def bench(g: SceneGraph, esdf: EsdfGrid, queries, replicate: int, clearance: float = 0.1,
          connectivity: int = 26, dataset: str = "synthetic", scene: str = "office") -> list[dict]:
    """Run both planners on every query of an already tiled scene (``replicate`` buildings).

    One row per query, columns :data:`BENCH_COLUMNS`: per-level and total
    hierarchical timings, volumetric A* time, level sizes (nodes / edges),
    both path lengths and the speed and length ratios. Each planner is
    indexed once; only the query itself is timed.
    """
    if int(replicate) < 1:
        raise ValueError("replicate must be >= 1")
    hier = HierarchicalPlanner(g, esdf, clearance)
    grid = EsdfPlanner(esdf, clearance, connectivity)
    sizes = hier.level_sizes()
    rows = []
    for q in queries:
        goal = resolve_query(g, q)
        h = hier.plan(q.start, goal)
        e = grid.plan(q.start, hier.p_pos[goal])
        t = h.timings
        rows.append({
            "dataset": dataset, "scene": scene, "query": format_query(q), "buildings": int(replicate),
            "time_esdf_s": e.timings["total"], "time_places_s": t["places"], "time_rooms_s": t["rooms"],
            "time_buildings_s": t["buildings"], "time_total_s": t["total"],
            "places_nodes": sizes["places"][0], "places_edges": sizes["places"][1],
            "rooms_nodes": sizes["rooms"][0], "rooms_edges": sizes["rooms"][1],
            "buildings_nodes": sizes["buildings"][0], "buildings_edges": sizes["buildings"][1],
            "length_esdf_m": e.cost, "length_hierarchical_m": h.cost,
            "speedup": e.timings["total"] / max(t["total"], 1e-12),
            "length_ratio": h.cost / e.cost if e.cost > 0 else 1.0,
            "fallback": bool(h.fallback),
        })
    return rows


def bench_csv(rows: list[dict], timings: bool = True) -> str:
    """CSV text with a fixed column order; ``timings=False`` blanks wall-clock columns."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        out = {}
        for k in BENCH_COLUMNS:
            v = r[k]
            if k in TIMING_COLUMNS and not timings:
                v = ""
            elif isinstance(v, float):
                v = f"{v:.6f}" if k in TIMING_COLUMNS else f"{v:.4f}"
            out[k] = v
        w.writerow(out)
    return buf.getvalue()
