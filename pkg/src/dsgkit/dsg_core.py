"""Layered scene graph: typed nodes, intra-/inter-layer edges, containment queries and JSON I/O.

Inter-layer edges point from the higher-layer parent to the lower-layer
child; a reverse index answers "who are my parents" without scanning.
"""
from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import labels as L
from .geom import Aabb
from .mesh_io import LabeledMesh

SCHEMA_NAME = "dsgkit.scene_graph"
SCHEMA_VERSION = 1


class Layer(enum.IntEnum):
    MESH = 1
    OBJECTS_AGENTS = 2
    PLACES_STRUCTURES = 3
    ROOMS = 4
    BUILDING = 5


class NodeKind(str, enum.Enum):
    MESH_SEGMENT = "mesh_segment"
    OBJECT = "object"
    AGENT = "agent"
    PLACE = "place"
    STRUCTURE = "structure"
    ROOM = "room"
    BUILDING = "building"

    @property
    def layer(self) -> Layer:
        return _LAYER_OF[self]


_LAYER_OF = {
    NodeKind.MESH_SEGMENT: Layer.MESH,
    NodeKind.OBJECT: Layer.OBJECTS_AGENTS,
    NodeKind.AGENT: Layer.OBJECTS_AGENTS,
    NodeKind.PLACE: Layer.PLACES_STRUCTURES,
    NodeKind.STRUCTURE: Layer.PLACES_STRUCTURES,
    NodeKind.ROOM: Layer.ROOMS,
    NodeKind.BUILDING: Layer.BUILDING,
}

_PREFIX = {
    NodeKind.MESH_SEGMENT: "m", NodeKind.OBJECT: "o", NodeKind.AGENT: "a", NodeKind.PLACE: "p",
    NodeKind.STRUCTURE: "s", NodeKind.ROOM: "r", NodeKind.BUILDING: "b",
}


def node_id(kind: NodeKind, index: int) -> str:
    return f"{_PREFIX[kind]}{int(index)}"


@dataclass(eq=False)
class Node:
    id: str
    kind: NodeKind
    position: np.ndarray | None = None
    aabb: Aabb | None = None
    attributes: dict = field(default_factory=dict)

    @property
    def layer(self) -> Layer:
        return self.kind.layer

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return _node_doc(self) == _node_doc(other)


class SceneGraph:
    """Mutable single-writer container; :meth:`snapshot` returns an independent copy."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.intra: set[tuple[str, str]] = set()
        self.children: dict[str, set[str]] = {}
        self.parents: dict[str, set[str]] = {}

    # -- construction -------------------------------------------------------
    def add_node(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node
        self.children.setdefault(node.id, set())
        self.parents.setdefault(node.id, set())
        return node

    def add_edge(self, a: str, b: str) -> None:
        """Intra-layer edges are undirected; inter-layer edges are stored parent -> child."""
        na, nb = self.nodes[a], self.nodes[b]
        if a == b:
            raise ValueError("self edge")
        if na.layer == nb.layer:
            self.intra.add((min(a, b), max(a, b)))
        else:
            parent, child = (a, b) if na.layer > nb.layer else (b, a)
            self.children[parent].add(child)
            self.parents[child].add(parent)

    def remove_node(self, nid: str) -> None:
        for c in self.children.pop(nid, set()):
            self.parents[c].discard(nid)
        for p in self.parents.pop(nid, set()):
            self.children[p].discard(nid)
        self.intra = {e for e in self.intra if nid not in e}
        del self.nodes[nid]

    def snapshot(self) -> "SceneGraph":
        return copy.deepcopy(self)

    # -- queries ------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, nid: str) -> bool:
        return nid in self.nodes

    def __eq__(self, other):
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return _document(self) == _document(other)

    def of_kind(self, kind: NodeKind) -> list[Node]:
        return sorted((n for n in self.nodes.values() if n.kind is kind), key=lambda n: _natural(n.id))

    def inter_edges(self) -> list[tuple[str, str]]:
        return sorted((p, c) for p, cs in self.children.items() for c in cs)

    def parents_of(self, nid: str, kind: NodeKind | None = None) -> list[str]:
        return sorted(p for p in self.parents.get(nid, ()) if kind is None or self.nodes[p].kind is kind)

    def children_of(self, nid: str, kind: NodeKind | None = None) -> list[str]:
        return sorted(c for c in self.children.get(nid, ()) if kind is None or self.nodes[c].kind is kind)

    def neighbors(self, nid: str) -> list[str]:
        out = [b if a == nid else a for a, b in self.intra if nid in (a, b)]
        return sorted(out)

    def place_graph(self) -> tuple[list[str], np.ndarray, list[tuple[int, int]]]:
        """Place ids, their positions and index pairs of place-place edges."""
        places = [n.id for n in self.of_kind(NodeKind.PLACE)]
        index = {p: k for k, p in enumerate(places)}
        pos = np.array([self.nodes[p].position for p in places]).reshape(-1, 3)
        edges = sorted((index[a], index[b]) for a, b in self.intra if a in index and b in index)
        return places, pos, edges

    def stats(self) -> dict:
        counts = {k.value: 0 for k in NodeKind}
        for n in self.nodes.values():
            counts[n.kind.value] += 1
        return {
            "nodes": len(self.nodes),
            "intra_edges": len(self.intra),
            "inter_edges": sum(len(c) for c in self.children.values()),
            "by_kind": counts,
        }


def _natural(nid: str):
    head = nid.rstrip("0123456789")
    tail = nid[len(head):]
    return (head, int(tail) if tail else -1, nid)


# --------------------------------------------------------------------------- assembly

@dataclass(eq=False)
class AgentInput:
    """An agent trajectory to attach: stamps, 4x4-free poses as (position, quaternion xyzw)."""

    id: int
    stamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray
    agent_class: str = "human"
    betas: np.ndarray | None = None


def _nearest(points: np.ndarray, q: np.ndarray, candidates: np.ndarray) -> int:
    d = np.linalg.norm(points[candidates] - q, axis=1)
    best = d.min()
    return int(candidates[np.flatnonzero(d == best)[0]])


def assemble(mesh: LabeledMesh | None = None, objects: Sequence | None = None, places=None, rooms=None,
             walls: np.ndarray | None = None, agents: Sequence[AgentInput] | None = None,
             room_building: Sequence[int] | None = None) -> SceneGraph:
    """Wire Layers 1-5 from parser/tracker outputs.

    * place -> object: the nearest place (Euclidean, ties to the lowest
      index) among places in the same place-graph component as the room
      containing the object centroid; objects outside every room use the
      globally nearest place and carry ``unreachable=True``;
    * room -> place, room -> object (the linked place's room), room ->
      structure (one wall structure per room with assigned wall vertices);
    * building -> room for every room; object -> mesh segment;
    * place -> agent for the place nearest the agent's latest pose, with all
      per-pose nearest places kept as an attribute.

    Room and building boxes are unions of their children's boxes.
    """
    g = SceneGraph()
    objects = list(objects or [])
    agents = list(agents or [])
    n_buildings = 1 if not room_building else max(room_building) + 1
    for b in range(n_buildings):
        g.add_node(Node(node_id(NodeKind.BUILDING, b), NodeKind.BUILDING))

    place_pos = np.zeros((0, 3))
    place_room = np.zeros(0, dtype=np.int64)
    comp = np.zeros(0, dtype=np.int64)
    if places is not None and len(places):
        place_pos = places.positions
        comp = places.components()
        for k in range(len(places)):
            g.add_node(Node(node_id(NodeKind.PLACE, k), NodeKind.PLACE, place_pos[k].copy(),
                            Aabb(place_pos[k], place_pos[k]), {"distance": float(places.distances[k])}))
        for a, b in places.edges:
            g.add_edge(node_id(NodeKind.PLACE, a), node_id(NodeKind.PLACE, b))
    if rooms is not None and len(place_pos):
        place_room = rooms.place_room
        for r in rooms.rooms:
            rid = node_id(NodeKind.ROOM, r.id)
            g.add_node(Node(rid, NodeKind.ROOM, place_pos[r.place_ids].mean(axis=0), r.aabb,
                            {"places": int(len(r.place_ids))}))
            b = room_building[r.id] if room_building else 0
            g.add_edge(node_id(NodeKind.BUILDING, b), rid)
            for p in r.place_ids:
                g.add_edge(rid, node_id(NodeKind.PLACE, p))
        for a, b in rooms.adjacency:
            g.add_edge(node_id(NodeKind.ROOM, a), node_id(NodeKind.ROOM, b))

    room_nodes = g.of_kind(NodeKind.ROOM)
    for obj in objects:
        oid = node_id(NodeKind.OBJECT, obj.id)
        attrs = {"label": int(obj.label), "class": L.class_name(obj.label)}
        g.add_node(Node(oid, NodeKind.OBJECT, np.asarray(obj.centroid, dtype=float), obj.aabb, attrs))
        sid = node_id(NodeKind.MESH_SEGMENT, obj.id)
        g.add_node(Node(sid, NodeKind.MESH_SEGMENT, np.asarray(obj.centroid, dtype=float), obj.aabb,
                        {"vertices": [int(v) for v in obj.member_vertices]}))
        g.add_edge(oid, sid)
        if len(place_pos) == 0:
            attrs["unreachable"] = True
            continue
        containing = [r for r in room_nodes if r.aabb is not None and r.aabb.contains_point(obj.centroid)]
        if containing:
            rid = int(containing[0].id[1:])
            comps = set(comp[place_room == rid].tolist())
            candidates = np.flatnonzero(np.isin(comp, list(comps)))
        else:
            candidates = np.arange(len(place_pos))
            attrs["unreachable"] = True
        p = _nearest(place_pos, obj.centroid, candidates)
        g.add_edge(node_id(NodeKind.PLACE, p), oid)
        if len(place_room) and place_room[p] >= 0 and node_id(NodeKind.ROOM, place_room[p]) in g:
            g.add_edge(node_id(NodeKind.ROOM, place_room[p]), oid)

    if walls is not None and mesh is not None and len(place_room):
        walls = np.asarray(walls)
        for r in sorted(set(walls[walls >= 0].tolist())):
            rid = node_id(NodeKind.ROOM, r)
            if rid not in g:
                continue
            verts = np.flatnonzero(walls == r)
            pts = mesh.positions[verts]
            sid = node_id(NodeKind.STRUCTURE, r)
            g.add_node(Node(sid, NodeKind.STRUCTURE, pts.mean(axis=0), Aabb.from_points(pts),
                            {"label": L.WALL, "class": "wall", "vertices": [int(v) for v in verts]}))
            g.add_edge(rid, sid)

    for ag in agents:
        aid = node_id(NodeKind.AGENT, ag.id)
        pos = np.asarray(ag.positions, dtype=float).reshape(-1, 3)
        attrs = {
            "class": ag.agent_class,
            "stamps": [float(s) for s in ag.stamps],
            "positions": pos.tolist(),
            "quaternions": np.asarray(ag.quaternions, dtype=float).reshape(-1, 4).tolist(),
        }
        if ag.betas is not None:
            attrs["betas"] = [float(b) for b in ag.betas]
        node = g.add_node(Node(aid, NodeKind.AGENT, pos[-1].copy(), Aabb.from_points(pos), attrs))
        if len(place_pos):
            every = np.arange(len(place_pos))
            links = [_nearest(place_pos, q, every) for q in pos]
            node.attributes["place_links"] = [node_id(NodeKind.PLACE, k) for k in links]
            g.add_edge(node_id(NodeKind.PLACE, links[-1]), aid)
    refresh_boxes(g)
    return g


def refresh_boxes(g: SceneGraph) -> None:
    """Recompute room boxes from children and building boxes from rooms (containment by construction)."""
    for room in g.of_kind(NodeKind.ROOM):
        boxes = [g.nodes[c].aabb for c in g.children_of(room.id) if g.nodes[c].aabb is not None]
        if room.aabb is not None:
            boxes.append(room.aabb)
        if boxes:
            room.aabb = Aabb.union_of(boxes)
    for b in g.of_kind(NodeKind.BUILDING):
        boxes = [g.nodes[c].aabb for c in g.children_of(b.id) if g.nodes[c].aabb is not None]
        b.aabb = Aabb.union_of(boxes) if boxes else None
        if b.aabb is not None:
            b.position = b.aabb.center.copy()


# --------------------------------------------------------------------------- pruning

def descendants(g: SceneGraph, nid: str) -> set[str]:
    """Strictly-lower-layer nodes reachable through inter-layer edges (agents excluded)."""
    out: set[str] = set()
    stack = [nid]
    while stack:
        cur = stack.pop()
        for c in g.children.get(cur, ()):
            node = g.nodes[c]
            if node.kind is NodeKind.AGENT or c in out:
                continue
            out.add(c)
            stack.append(c)
    return out


def prune(g: SceneGraph, nid: str) -> SceneGraph:
    """Copy of ``g`` without ``nid`` and its descendants.

    Agents are attachments rather than owned children: an agent whose place
    disappears is re-linked to the nearest surviving place.
    """
    if nid not in g:
        raise KeyError(f"no node {nid!r}")
    if g.nodes[nid].kind is NodeKind.BUILDING:
        raise ValueError("cannot prune the building; build a new graph instead")
    out = g.snapshot()
    doomed = {nid} | descendants(g, nid)
    for d in sorted(doomed):
        out.remove_node(d)
    places, pos, _ = out.place_graph()
    for agent in out.of_kind(NodeKind.AGENT):
        links = agent.attributes.get("place_links")
        if links is None:
            continue
        if places:
            every = np.arange(len(places))
            fixed = [l if l in out else places[_nearest(pos, np.asarray(q), every)]
                     for l, q in zip(links, agent.attributes["positions"])]
            agent.attributes["place_links"] = fixed
            if not out.parents_of(agent.id, NodeKind.PLACE):
                out.add_edge(fixed[-1], agent.id)
        else:
            del agent.attributes["place_links"]
    refresh_boxes(out)
    return out


# --------------------------------------------------------------------------- containment

def collide(g: SceneGraph, box: Aabb) -> set[str]:
    """Objects and structures whose box intersects ``box``, descending building -> room -> node."""
    hits: set[str] = set()
    seen: set[str] = set()
    targets = (NodeKind.OBJECT, NodeKind.STRUCTURE)
    for b in g.of_kind(NodeKind.BUILDING):
        if b.aabb is None or not b.aabb.intersects(box):
            continue
        for rid in g.children_of(b.id, NodeKind.ROOM):
            room = g.nodes[rid]
            if room.aabb is None or not room.aabb.intersects(box):
                continue
            for c in g.children_of(rid):
                node = g.nodes[c]
                if node.kind in targets:
                    seen.add(c)
                    if node.aabb is not None and node.aabb.intersects(box):
                        hits.add(c)
    # nodes without a room parent are not covered by the hierarchy
    for node in g.nodes.values():
        if node.kind in targets and not g.parents_of(node.id, NodeKind.ROOM):
            if node.aabb is not None and node.aabb.intersects(box):
                hits.add(node.id)
    return hits


def collide_flat(g: SceneGraph, box: Aabb) -> set[str]:
    return {n.id for n in g.nodes.values()
            if n.kind in (NodeKind.OBJECT, NodeKind.STRUCTURE) and n.aabb is not None and n.aabb.intersects(box)}


# --------------------------------------------------------------------------- validation

def validate(g: SceneGraph) -> list[str]:
    """Violated structural rules, one message each; empty when the graph is well formed."""
    bad = []
    for p, cs in g.children.items():
        for c in cs:
            if p not in g.nodes or c not in g.nodes:
                bad.append(f"dangling inter-layer edge {p}->{c}")
            elif g.nodes[p].layer <= g.nodes[c].layer:
                bad.append(f"inter-layer edge {p}->{c} does not descend")
            elif p not in g.parents.get(c, ()):
                bad.append(f"reverse index missing {p}->{c}")
    for a, b in g.intra:
        if a not in g.nodes or b not in g.nodes:
            bad.append(f"dangling intra-layer edge {a}-{b}")
        elif g.nodes[a].layer != g.nodes[b].layer:
            bad.append(f"intra-layer edge {a}-{b} crosses layers")
    has_places = bool(g.of_kind(NodeKind.PLACE))
    has_rooms = bool(g.of_kind(NodeKind.ROOM))
    for n in g.nodes.values():
        if n.kind in (NodeKind.OBJECT, NodeKind.AGENT) and has_places and not g.parents_of(n.id, NodeKind.PLACE):
            bad.append(f"{n.id} has no place")
        if n.kind is NodeKind.PLACE and has_rooms:
            rooms = g.parents_of(n.id, NodeKind.ROOM)
            if len(rooms) != 1:
                bad.append(f"{n.id} has {len(rooms)} room parents")
        if n.kind is NodeKind.ROOM and not g.parents_of(n.id, NodeKind.BUILDING):
            bad.append(f"{n.id} has no building")
        if n.kind is NodeKind.AGENT:
            st = n.attributes.get("stamps", [])
            if any(b <= a for a, b in zip(st, st[1:])):
                bad.append(f"{n.id} stamps not strictly increasing")
    for p, cs in g.children.items():
        pk = g.nodes[p].kind if p in g.nodes else None
        for c in cs:
            if c not in g.nodes:
                continue
            ck = g.nodes[c].kind
            if (pk, ck) in ((NodeKind.ROOM, NodeKind.OBJECT), (NodeKind.BUILDING, NodeKind.ROOM)):
                pb, cb = g.nodes[p].aabb, g.nodes[c].aabb
                if cb is not None and (pb is None or not pb.contains(cb)):
                    bad.append(f"box of {p} does not contain {c}")
    return bad


# --------------------------------------------------------------------------- JSON

def _node_doc(n: Node) -> dict:
    return {
        "id": n.id,
        "kind": n.kind.value,
        "layer": int(n.layer),
        "position": None if n.position is None else [float(v) for v in n.position],
        "aabb": None if n.aabb is None else n.aabb.to_list(),
        "attributes": n.attributes,
    }


def _document(g: SceneGraph) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "nodes": [_node_doc(g.nodes[k]) for k in sorted(g.nodes, key=_natural)],
        "edges": {
            "intra": [list(e) for e in sorted(g.intra)],
            "inter": [list(e) for e in g.inter_edges()],
        },
    }


def save_json(g: SceneGraph) -> bytes:
    return json.dumps(_document(g), sort_keys=True, indent=1).encode("utf-8") + b"\n"


def load_json(data: bytes | str) -> SceneGraph:
    doc = json.loads(data)
    if doc.get("schema") != SCHEMA_NAME:
        raise ValueError(f"not a scene-graph document (schema={doc.get('schema')!r})")
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('version')!r}; expected {SCHEMA_VERSION}")
    g = SceneGraph()
    for nd in doc["nodes"]:
        kind = NodeKind(nd["kind"])
        if "layer" in nd and int(nd["layer"]) != int(kind.layer):
            raise ValueError(f"node {nd['id']} has layer {nd['layer']} but kind {kind.value}")
        pos = None if nd.get("position") is None else np.asarray(nd["position"], dtype=float)
        box = None if nd.get("aabb") is None else Aabb(*nd["aabb"])
        g.add_node(Node(nd["id"], kind, pos, box, dict(nd.get("attributes", {}))))
    for a, b in doc.get("edges", {}).get("intra", []):
        g.add_edge(a, b)
    for p, c in doc.get("edges", {}).get("inter", []):
        if g.nodes[p].layer <= g.nodes[c].layer:
            raise ValueError(f"inter-layer edge {p}->{c} must point from higher to lower layer")
        g.add_edge(p, c)
    return g


# --------------------------------------------------------------------------- tiling

def tile(g: SceneGraph, copies: int, offset: Iterable[float]) -> SceneGraph:
    """``copies`` translated copies of ``g``; copy ``k`` is shifted by ``k * offset``.

    Integer suffixes are shifted per kind so ids stay unique; each copy keeps
    its own building node. Cross-copy links are left to the caller.
    """
    off = np.asarray(list(offset), dtype=float)
    counts: dict[NodeKind, int] = {}
    for n in g.nodes.values():
        counts[n.kind] = max(counts.get(n.kind, 0), int(n.id[1:]) + 1)
    out = SceneGraph()

    def rename(nid: str, k: int) -> str:
        kind = g.nodes[nid].kind
        return node_id(kind, int(nid[1:]) + k * counts[kind])

    for k in range(copies):
        shift = k * off
        for nid in sorted(g.nodes, key=_natural):
            n = g.nodes[nid]
            attrs = copy.deepcopy(n.attributes)
            if "positions" in attrs:
                attrs["positions"] = (np.asarray(attrs["positions"]) + shift).tolist()
            if "place_links" in attrs:
                attrs["place_links"] = [rename(p, k) for p in attrs["place_links"]]
            box = None if n.aabb is None else Aabb(n.aabb.min_corner + shift, n.aabb.max_corner + shift)
            pos = None if n.position is None else n.position + shift
            out.add_node(Node(rename(nid, k), n.kind, pos, box, attrs))
        for a, b in sorted(g.intra):
            out.add_edge(rename(a, k), rename(b, k))
        for p, c in g.inter_edges():
            out.add_edge(rename(p, k), rename(c, k))
    return out


def place_components(g: SceneGraph) -> dict[str, int]:
    places, _, edges = g.place_graph()
    if not places:
        return {}
    n = len(places)
    if edges:
        e = np.array(edges)
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    else:
        adj = sp.coo_matrix((n, n))
    _, comp = connected_components(adj, directed=False)
    return {p: int(c) for p, c in zip(places, comp)}
