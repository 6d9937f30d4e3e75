"""End-to-end scene parsing: labeled mesh + ESDF -> layered scene graph."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import labels as L
from .dsg_core import AgentInput, SceneGraph, assemble
from .mesh_io import EsdfGrid, LabeledMesh
from .scene_parser import (RoomConfig, assign_walls, detect_ceiling, extract_objects, extract_places,
                           segment_rooms)


@dataclass
class ParseConfig:
    clearance: float = 0.1
    sample_spacing: float = 1.0
    cluster_dist: float = 0.1
    wall_search_radius: float = 3.0
    ceiling_height: float | None = None
    cut_below_ceiling: float = 0.3
    truncation: float = 0.2
    connectivity: int = 4

    @classmethod
    def from_dict(cls, d: dict | None) -> "ParseConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown parse options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _room_buildings(place_room: np.ndarray, place_building: np.ndarray, n_rooms: int) -> list[int]:
    """Majority building per room (ignoring places without a building); ties to the lowest id."""
    out = []
    for r in range(n_rooms):
        b = place_building[(place_room == r) & (place_building >= 0)]
        out.append(int(np.bincount(b).argmax()) if len(b) else 0)
    return out


def parse_scene(mesh: LabeledMesh | None, esdf: EsdfGrid, cfg: ParseConfig | None = None,
                building_of: Callable[[np.ndarray], np.ndarray] | None = None,
                agents: Sequence[AgentInput] | None = None) -> SceneGraph:
    """Objects, places, rooms and walls from a labeled mesh and an ESDF, wired into a scene graph.

    ``building_of`` maps place positions to building ids (negative when
    unknown); each room joins the majority building of its places. Without
    it the whole scene is a single building.
    """
    cfg = cfg or ParseConfig()
    ceiling = cfg.ceiling_height
    if ceiling is None:
        ceiling = detect_ceiling(mesh)
    if ceiling is None:
        ceiling = float(esdf.origin[2] + esdf.dims[2] * esdf.voxel_size)
    places = extract_places(esdf, cfg.clearance, cfg.sample_spacing)
    rooms = segment_rooms(esdf, places, ceiling,
                          RoomConfig(cfg.cut_below_ceiling, cfg.truncation, cfg.connectivity))
    objects = extract_objects(mesh, cluster_dist=cfg.cluster_dist) if mesh is not None else []
    walls = assign_walls(mesh, L.WALL, places, rooms, cfg.wall_search_radius) if mesh is not None else None
    room_building = None
    if building_of is not None and len(places):
        room_building = _room_buildings(rooms.place_room, np.asarray(building_of(places.positions)),
                                        len(rooms.rooms))
    return assemble(mesh, objects, places, rooms, walls, agents, room_building)


def tiled_office(seed: int = 0, replicate: int = 1, cfg: ParseConfig | None = None):
    """Scene graph and analytic ESDF of ``replicate`` copies of the synthetic office in a row.

    Every copy is its own building. The graph is parsed from the tiled
    world so the exterior doors joining neighbouring copies carry places.
    """
    from . import synth

    fp = synth.office(seed, replicate=replicate)
    g = parse_scene(fp.mesh, fp.esdf, cfg, building_of=fp.world.building_of)
    return g, fp


# --------------------------------------------------------------------------- workflows shared by the CLI

# Odometry noise assumed by the loop-consistency gate in the loop-closure
# workflow: wide enough to absorb a few percent of accumulated drift, which
# the per-edge noise model of a biased odometry does not describe.
DRIFT_PCM = {"odom_sigma_rot": 0.03, "odom_sigma_trans": 0.15, "loop_sigma_rot": 0.02, "loop_sigma_trans": 0.1}


def close_loops(noisy, loops, mesh=None, pgmo_cfg=None, pcm_cfg=None):
    """Reject inconsistent loops, then optimize trajectory (and mesh) with the survivors.

    Returns ``(trajectory, mesh_or_None, summary)``; ``summary`` holds only
    deterministic quantities (no wall-clock times).
    """
    from .pcm import PcmConfig, consistent_loops
    from .pgmo import PgmoConfig, build_deformation_graph, optimize, reskin

    pgmo_cfg = pgmo_cfg or PgmoConfig()
    pcm_cfg = pcm_cfg or PcmConfig(**DRIFT_PCM)
    loops = list(loops)
    kept, _ = consistent_loops(noisy.without_loops(), loops, pcm_cfg)
    kept_ids = {id(e) for e in kept}
    graph = noisy.without_loops().with_edges(noisy.odometry + kept)
    dg = build_deformation_graph(mesh, graph, pgmo_cfg)
    out = optimize(dg, pgmo_cfg)
    trajectory = graph.with_poses(out.pose_transforms)
    new_mesh = reskin(mesh, out, pgmo_cfg) if mesh is not None else None
    rep = out.report
    summary = {
        "loops_in": len(loops),
        "loops_kept": len(kept),
        "loop_inliers": [id(e) in kept_ids for e in loops],
        "graph_vertices": len(dg),
        "graph_edges": len(dg.edges),
        "initial_cost": rep.initial_cost,
        "final_cost": rep.final_cost,
        "iterations": rep.iterations,
        "converged": bool(rep.converged),
    }
    return trajectory, new_mesh, summary


def room_scores(g: SceneGraph, room_mask: np.ndarray, esdf: EsdfGrid) -> tuple[float, float]:
    """Place-level room precision/recall of a parsed graph against a per-voxel room mask."""
    from .dsg_core import NodeKind
    from .scene_parser import place_precision_recall

    pred, truth = [], []
    rooms = {r.id: k for k, r in enumerate(g.of_kind(NodeKind.ROOM))}
    for p in g.of_kind(NodeKind.PLACE):
        parents = g.parents_of(p.id, NodeKind.ROOM)
        idx = esdf.world_to_index(p.position)
        inside = bool(esdf.in_bounds(idx))
        pred.append(rooms[parents[0]] if parents else -1)
        truth.append(int(room_mask[tuple(idx)]) if inside else -1)
    return place_precision_recall(np.array(pred), np.array(truth))
