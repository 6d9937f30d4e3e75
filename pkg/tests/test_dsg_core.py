import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsgkit.dsg_core import (AgentInput, Layer, Node, NodeKind, SceneGraph, assemble, collide, collide_flat,
                             descendants, load_json, place_components, prune, save_json, tile, validate)
from dsgkit.geom import Aabb
from dsgkit.pipeline import tiled_office
from dsgkit.scene_parser import ObjectNode, PlaceGraph, Room, RoomSegmentation


@pytest.fixture(scope="module")
def office():
    g, fp = tiled_office(0, 1)
    return g


def small_scene(n_places=1, with_room=True, objects=None, edges=()):
    pos = np.array([[float(k), 0.0, 1.0] for k in range(n_places)])
    places = PlaceGraph(pos, edges=np.array(edges, dtype=np.int64).reshape(-1, 2), distances=np.ones(n_places))
    rooms = None
    if with_room:
        box = Aabb([-1, -1, 0], [n_places, 1, 3])
        rooms = RoomSegmentation([Room(0, np.arange(n_places), box)], np.zeros(n_places, dtype=np.int64), [])
    if objects is None:
        objects = [ObjectNode(0, 5, np.array([0.2, 0.1, 0.5]), Aabb([0.1, 0, 0.4], [0.3, 0.2, 0.6]), np.array([0, 1]))]
    return objects, places, rooms


def test_empty_inputs_give_single_building():
    g = assemble()
    assert list(g.nodes) == ["b0"]
    assert validate(g) == []


def test_one_room_object_place_wiring():
    objects, places, rooms = small_scene()
    g = assemble(None, objects, places, rooms)
    # building, room, place, object and its mesh segment
    assert sorted(g.nodes) == ["b0", "m0", "o0", "p0", "r0"]
    assert g.inter_edges() == sorted([("b0", "r0"), ("r0", "p0"), ("p0", "o0"), ("r0", "o0"), ("o0", "m0")])
    assert g.nodes["p0"].layer is Layer.PLACES_STRUCTURES
    assert validate(g) == []
    assert g.nodes["r0"].aabb.contains(g.nodes["o0"].aabb)
    assert g.nodes["b0"].aabb.contains(g.nodes["r0"].aabb)


def test_object_links_nearest_place_bruteforce(rng):
    n = 30
    pos = rng.uniform(0, 10, (n, 3))
    chain = [(k, k + 1) for k in range(n - 1)]
    places = PlaceGraph(pos, edges=np.array(chain))
    box = Aabb([-1, -1, -1], [11, 11, 11])
    rooms = RoomSegmentation([Room(0, np.arange(n), box)], np.zeros(n, dtype=np.int64), [])
    objs = []
    for k in range(40):
        c = rng.uniform(0, 10, 3)
        objs.append(ObjectNode(k, 5, c, Aabb(c - 0.1, c + 0.1), np.array([k])))
    g = assemble(None, objs, places, rooms)
    for o in objs:
        expected = int(np.argmin(np.linalg.norm(pos - o.centroid, axis=1)))
        assert g.parents_of(f"o{o.id}", NodeKind.PLACE) == [f"p{expected}"]


def test_object_in_room_prefers_reachable_component():
    # p0 belongs to the room; p1 is closer but lives in another component outside the room
    places = PlaceGraph(np.array([[0.0, 0, 1], [2.0, 0, 1]]))
    rooms = RoomSegmentation([Room(0, np.array([0]), Aabb([-1, -1, 0], [1.6, 1, 3]))],
                             np.array([0, -1]), [])
    obj = ObjectNode(0, 5, np.array([1.5, 0, 1]), Aabb([1.4, -0.1, 0.9], [1.6, 0.1, 1.1]), np.array([0]))
    g = assemble(None, [obj], places, rooms)
    assert g.parents_of("o0", NodeKind.PLACE) == ["p0"]


def test_object_outside_rooms_is_flagged_unreachable():
    objects, places, rooms = small_scene(
        objects=[ObjectNode(0, 5, np.array([50.0, 0, 0]), Aabb([49, -1, -1], [51, 1, 1]), np.array([0]))])
    g = assemble(None, objects, places, rooms)
    assert g.nodes["o0"].attributes["unreachable"] is True
    assert g.parents_of("o0", NodeKind.PLACE) == ["p0"]


def test_agent_attaches_to_place_nearest_latest_pose():
    objects, places, rooms = small_scene(n_places=3, objects=[], edges=[(0, 1), (1, 2)])
    ag = AgentInput(0, np.array([0.0, 1.0]), np.array([[0.1, 0, 1], [1.9, 0, 1]]),
                    np.tile([0, 0, 0, 1.0], (2, 1)))
    g = assemble(None, [], places, rooms, agents=[ag])
    assert g.parents_of("a0", NodeKind.PLACE) == ["p2"]
    assert g.nodes["a0"].attributes["place_links"] == ["p0", "p2"]
    assert validate(g) == []


def test_prune_leaf_removes_only_that_node():
    objects, places, rooms = small_scene()
    g = assemble(None, objects, places, rooms)
    out = prune(g, "m0")
    assert sorted(out.nodes) == ["b0", "o0", "p0", "r0"]
    assert "m0" in g  # input untouched
    assert validate(out) == []


def _reachable(g, nid):
    seen, stack = set(), [nid]
    while stack:
        cur = stack.pop()
        for c in g.children[cur]:
            if g.nodes[c].kind is not NodeKind.AGENT and c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def test_prune_room_matches_reachability_oracle(office):
    room = office.of_kind(NodeKind.ROOM)[0].id
    doomed = {room} | _reachable(office, room)
    assert descendants(office, room) == doomed - {room}
    out = prune(office, room)
    assert set(out.nodes) == set(office.nodes) - doomed
    assert validate(out) == []
    for a, b in out.intra:
        assert a in out and b in out


def test_prune_then_reassemble_restores_graph():
    objects, places, rooms = small_scene()
    g = assemble(None, objects, places, rooms)
    out = prune(g, "o0")
    assert "o0" not in out and "m0" not in out
    assert assemble(None, objects, places, rooms) == g


def test_prune_relinks_agents():
    _, places, rooms = small_scene(n_places=3, objects=[], edges=[(0, 1), (1, 2)])
    ag = AgentInput(0, np.array([0.0, 1.0]), np.array([[0.1, 0, 1], [1.9, 0, 1]]), np.tile([0, 0, 0, 1.0], (2, 1)))
    g = assemble(None, [], places, rooms, agents=[ag])
    out = prune(g, "p2")
    assert out.parents_of("a0", NodeKind.PLACE) == ["p1"]
    assert out.nodes["a0"].attributes["place_links"] == ["p0", "p1"]


def test_prune_errors():
    g = assemble()
    with pytest.raises(ValueError):
        prune(g, "b0")
    with pytest.raises(KeyError):
        prune(g, "x9")


def test_collide_matches_flat_scan(office, rng):
    all_boxes = [n.aabb for n in office.nodes.values() if n.aabb is not None]
    world = Aabb.union_of(all_boxes)
    lo, hi = world.min_corner - 1, world.max_corner + 1
    for _ in range(500):
        c = rng.uniform(lo, hi)
        half = rng.uniform(0.05, 3.0, 3)
        box = Aabb(c - half, c + half)
        assert collide(office, box) == collide_flat(office, box)


def test_collide_edge_cases(office):
    world = Aabb.union_of([n.aabb for n in office.nodes.values() if n.aabb is not None])
    far = Aabb(world.max_corner + 10, world.max_corner + 11)
    assert collide(office, far) == set()
    obj = office.of_kind(NodeKind.OBJECT)[0]
    assert obj.id in collide(office, obj.aabb)


def test_json_round_trip_is_byte_identical(office):
    data = save_json(office)
    again = load_json(data)
    assert again == office
    assert save_json(again) == data


def test_minimal_handwritten_document():
    doc = {
        "schema": "dsgkit.scene_graph", "version": 1,
        "nodes": [
            {"id": "b0", "kind": "building"},
            {"id": "r0", "kind": "room", "position": [0, 0, 0], "aabb": [[0, 0, 0], [1, 1, 1]]},
            {"id": "p0", "kind": "place", "position": [0.5, 0.5, 0.5]},
        ],
        "edges": {"intra": [], "inter": [["b0", "r0"], ["r0", "p0"]]},
    }
    g = load_json(json.dumps(doc))
    assert len(g) == 3
    assert g.children_of("r0") == ["p0"]
    assert g.parents_of("p0") == ["r0"]


@pytest.mark.parametrize("patch, message", [
    ({"schema": "other"}, "schema"),
    ({"version": 2}, "version"),
])
def test_load_rejects_bad_header(patch, message):
    doc = {"schema": "dsgkit.scene_graph", "version": 1, "nodes": [], "edges": {}}
    doc.update(patch)
    with pytest.raises(ValueError, match=message):
        load_json(json.dumps(doc))


def test_load_rejects_upward_edge_and_layer_mismatch():
    base = {"schema": "dsgkit.scene_graph", "version": 1,
            "nodes": [{"id": "r0", "kind": "room"}, {"id": "p0", "kind": "place"}]}
    with pytest.raises(ValueError):
        load_json(json.dumps({**base, "edges": {"inter": [["p0", "r0"]]}}))
    bad = {**base, "nodes": [{"id": "r0", "kind": "room", "layer": 2}]}
    with pytest.raises(ValueError):
        load_json(json.dumps(bad))


def test_validate_office_clean_and_detects_violations(office):
    assert validate(office) == []
    g = office.snapshot()
    place = g.of_kind(NodeKind.PLACE)[0].id
    for r in g.parents_of(place, NodeKind.ROOM):
        g.children[r].discard(place)
        g.parents[place].discard(r)
    assert any(place in msg for msg in validate(g))
    g2 = assemble()
    g2.add_node(Node("a0", NodeKind.AGENT, attributes={"stamps": [0.0, 0.0]}))
    assert any("stamps" in msg for msg in validate(g2))


def test_intra_edges_undirected_and_self_edge_rejected():
    g = SceneGraph()
    g.add_node(Node("p0", NodeKind.PLACE))
    g.add_node(Node("p1", NodeKind.PLACE))
    g.add_edge("p1", "p0")
    g.add_edge("p0", "p1")
    assert g.intra == {("p0", "p1")}
    with pytest.raises(ValueError):
        g.add_edge("p0", "p0")
    with pytest.raises(ValueError):
        g.add_node(Node("p0", NodeKind.PLACE))


def test_tile_shifts_and_renames(office):
    t = tile(office, 3, [100.0, 0, 0])
    assert len(t) == 3 * len(office)
    assert len(t.of_kind(NodeKind.BUILDING)) == 3
    assert len(t.intra) == 3 * len(office.intra)
    p = office.of_kind(NodeKind.PLACE)[0]
    n_places = len(office.of_kind(NodeKind.PLACE))
    moved = t.nodes[f"p{int(p.id[1:]) + 2 * n_places}"]
    np.testing.assert_allclose(moved.position, p.position + [200.0, 0, 0])
    assert validate(t) == []


def test_place_components_counts_tiles(office):
    comps = place_components(office)
    t = tile(office, 2, [100.0, 0, 0])
    assert len(set(place_components(t).values())) == 2 * len(set(comps.values()))
    assert place_components(assemble()) == {}


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=20))
def test_place_components_match_union_find(edges):
    edges = [(a, b) for a, b in edges if a != b]
    places = PlaceGraph(np.c_[np.arange(8.0), np.zeros(8), np.zeros(8)], edges=np.array(edges, dtype=np.int64))
    g = assemble(places=places)
    parent = list(range(8))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for a, b in edges:
        parent[find(a)] = find(b)
    comps = place_components(g)
    for a in range(8):
        for b in range(8):
            assert (comps[f"p{a}"] == comps[f"p{b}"]) == (find(a) == find(b))


def test_stats_counts(office):
    s = office.stats()
    assert s["nodes"] == len(office)
    assert sum(s["by_kind"].values()) == len(office)
    assert s["by_kind"]["building"] == 1
