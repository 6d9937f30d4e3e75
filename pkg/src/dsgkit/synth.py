"""Seeded synthetic scenes: drifting loops, box-world floor plans, offices and human walks.

Every generator is a pure function of its parameters; the same seed always
yields bit-identical arrays and files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import labels as L
from .geom import EdgeWeight, RigidTransform, compose, relative, se3_exp
from .mesh_io import EsdfGrid, LabeledMesh
from .pose_graph import EdgeKind, PoseGraph, PoseNode, RelativePoseEdge


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent streams so that changing one knob does not reshuffle the others."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


# --------------------------------------------------------------------------- meshes

def grid_patch(origin, u, v, nu: int, nv: int, label: int, normal=None, keep=None) -> LabeledMesh:
    """Triangulated ``(nu+1) x (nv+1)`` vertex grid spanning ``origin + [0,1]u + [0,1]v``.

    ``keep`` optionally masks vertices (e.g. door cut-outs); faces touching a
    dropped vertex are removed.
    """
    origin, u, v = (np.asarray(a, dtype=float) for a in (origin, u, v))
    a = np.linspace(0.0, 1.0, nu + 1)
    b = np.linspace(0.0, 1.0, nv + 1)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    pts = origin + aa.reshape(-1, 1) * u + bb.reshape(-1, 1) * v
    idx = np.arange(len(pts)).reshape(nu + 1, nv + 1)
    q0, q1, q2, q3 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([q0, q1, q2], 1), np.stack([q0, q2, q3], 1)])
    n = np.cross(u, v) if normal is None else np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if np.dot(np.cross(u, v), n) < 0:
        faces = faces[:, ::-1]
    mesh = LabeledMesh(pts, faces, np.tile(n, (len(pts), 1)), None, np.full(len(pts), label))
    if keep is not None:
        mesh = mesh.submesh(keep(pts))
    return mesh


def box_mesh(lo, hi, label: int, spacing: float, outward: bool = True) -> LabeledMesh:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ext = hi - lo
    parts = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        u = np.zeros(3); u[a] = ext[a]
        v = np.zeros(3); v[b] = ext[b]
        nu = max(1, int(round(ext[a] / spacing)))
        nv = max(1, int(round(ext[b] / spacing)))
        for side, coord in ((-1.0, lo[axis]), (1.0, hi[axis])):
            o = lo.copy(); o[axis] = coord
            n = np.zeros(3); n[axis] = side if outward else -side
            parts.append(grid_patch(o, u, v, nu, nv, label, n))
    return LabeledMesh.concatenate(parts)


# --------------------------------------------------------------------------- drift loop

@dataclass
class DriftLoopParams:
    n_poses: int = 48
    poses_per_lap: int = 36
    radius: float = 5.0
    odom_sigma_trans: float = 0.01
    odom_sigma_rot: float = 0.002
    yaw_bias: float = 0.0  # rad added to every odometry step
    n_loops: int = 12
    outlier_rate: float = 0.0
    loop_sigma_trans: float = 0.01
    loop_sigma_rot: float = 0.002
    outlier_radius: float = 10.0
    room_margin: float = 1.5
    room_height: float = 3.0
    mesh_spacing: float = 0.5
    with_floor: bool = True


@dataclass
class DriftLoop:
    truth: PoseGraph
    noisy: PoseGraph
    truth_mesh: LabeledMesh
    noisy_mesh: LabeledMesh
    loops: list[RelativePoseEdge]
    is_outlier: np.ndarray
    meta: dict = field(default_factory=dict)


def _room_shell(half: float, z0: float, height: float, spacing: float, with_floor: bool) -> LabeledMesh:
    side = 2 * half
    n_side = max(1, int(round(side / spacing)))
    n_h = max(1, int(round(height / spacing)))
    parts = []
    corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
    for k in range(4):
        (x0, y0), (x1, y1) = corners[k], corners[(k + 1) % 4]
        u = np.array([x1 - x0, y1 - y0, 0.0])
        inward = np.array([-(y1 - y0), x1 - x0, 0.0])
        parts.append(grid_patch([x0, y0, z0], u, [0, 0, height], n_side, n_h, L.WALL, inward))
    if with_floor:
        parts.append(grid_patch([-half, -half, z0], [side, 0, 0], [0, side, 0], n_side, n_side, L.FLOOR, [0, 0, 1]))
    # shared edges between patches would otherwise duplicate vertices
    return _merge_duplicates(LabeledMesh.concatenate(parts))


def _merge_duplicates(mesh: LabeledMesh) -> LabeledMesh:
    key = np.round(mesh.positions, 9)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    new_of_old = remap[inv]
    keep_idx = first[order]
    faces = new_of_old[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return LabeledMesh(mesh.positions[keep_idx], faces[ok], mesh.normals[keep_idx], mesh.colors[keep_idx], mesh.labels[keep_idx])


def drift_loop(seed: int = 0, params: DriftLoopParams | None = None) -> DriftLoop:
    """Circular multi-lap trajectory inside a box room, with drifting odometry.

    Inlier loops connect revisits of the first lap; outliers carry uniformly
    random rotations and translations drawn from a ball. The noisy mesh is
    the true mesh carried along by the drifted pose that observed each
    vertex (its nearest first-lap pose).
    """
    p = params or DriftLoopParams()
    if p.n_poses < 2 or p.poses_per_lap < 3:
        raise ValueError("need at least 2 poses and 3 poses per lap")
    r_odo, r_in, r_sel, r_out = _rngs(seed, 4)
    n, ppl = int(p.n_poses), int(p.poses_per_lap)
    step = 2.0 * math.pi / ppl
    truth_poses = []
    for k in range(n):
        a = k * step
        pos = [p.radius * math.cos(a), p.radius * math.sin(a), 0.2 * math.sin(2.0 * a)]
        truth_poses.append(RigidTransform.from_rotvec([0.0, 0.0, a + 0.5 * math.pi], pos))

    w_odo = EdgeWeight.from_sigmas(p.odom_sigma_rot, p.odom_sigma_trans)
    w_loop = EdgeWeight.from_sigmas(p.loop_sigma_rot, p.loop_sigma_trans)
    truth_edges, noisy_edges = [], []
    noisy_poses = [truth_poses[0]]
    for k in range(n - 1):
        z = relative(truth_poses[k], truth_poses[k + 1])
        truth_edges.append(RelativePoseEdge(k, k + 1, z, w_odo))
        noise = np.concatenate([
            r_odo.normal(0.0, 1.0, 3) * p.odom_sigma_trans,
            r_odo.normal(0.0, 1.0, 3) * p.odom_sigma_rot + np.array([0.0, 0.0, p.yaw_bias]),
        ])
        zn = compose(z, se3_exp(noise)) if np.any(noise) else z
        noisy_edges.append(RelativePoseEdge(k, k + 1, zn, w_odo))
        noisy_poses.append(compose(noisy_poses[-1], zn))

    truth = PoseGraph([PoseNode(k, float(k), t) for k, t in enumerate(truth_poses)], truth_edges)
    noisy = PoseGraph([PoseNode(k, float(k), t) for k, t in enumerate(noisy_poses)], noisy_edges)

    n_loops = int(p.n_loops)
    n_out = int(math.floor(p.outlier_rate * n_loops + 1e-9))
    n_in = n_loops - n_out
    candidates = [(i - ppl + off, i) for i in range(ppl, n) for off in (0, -1, 1) if 0 <= i - ppl + off < i - 1]
    if n_in > len(candidates):
        raise ValueError(f"only {len(candidates)} revisit pairs available for {n_in} inlier loops")
    chosen = sorted(candidates[k] for k in r_sel.choice(len(candidates), size=n_in, replace=False)) if n_in else []
    loops, flags = [], []
    for j, i in chosen:
        z = relative(truth_poses[j], truth_poses[i])
        noise = np.concatenate([r_in.normal(0, 1, 3) * p.loop_sigma_trans, r_in.normal(0, 1, 3) * p.loop_sigma_rot])
        loops.append(RelativePoseEdge(j, i, compose(z, se3_exp(noise)) if np.any(noise) else z, w_loop, EdgeKind.LOOP_CLOSURE))
        flags.append(False)
    for _ in range(n_out):
        while True:
            i = int(r_out.integers(2, n))
            j = int(r_out.integers(0, i - 1))
            rot = Rotation.random(random_state=r_out).as_matrix()
            d = r_out.normal(size=3)
            t = d / np.linalg.norm(d) * p.outlier_radius * r_out.uniform() ** (1.0 / 3.0)
            z_true = relative(truth_poses[j], truth_poses[i])
            err = relative(z_true, RigidTransform(rot, t))
            ang = np.linalg.norm(Rotation.from_matrix(err.rotation).as_rotvec())
            if np.linalg.norm(t - z_true.translation) >= 20 * p.loop_sigma_trans and ang >= 20 * p.loop_sigma_rot:
                break
        loops.append(RelativePoseEdge(j, i, RigidTransform(rot, t), w_loop, EdgeKind.LOOP_CLOSURE))
        flags.append(True)
    order = sorted(range(len(loops)), key=lambda k: (loops[k].to_id, loops[k].from_id, flags[k]))
    loops = [loops[k] for k in order]
    flags = np.array([flags[k] for k in order], dtype=bool)

    half = p.radius + p.room_margin
    truth_mesh = _room_shell(half, -1.0, p.room_height, p.mesh_spacing, p.with_floor)
    first_lap = np.array([t.translation for t in truth_poses[: min(ppl, n)]])
    owner = np.argmin(((truth_mesh.positions[:, None, :] - first_lap[None]) ** 2).sum(-1), axis=1)
    noisy_pos = np.empty_like(truth_mesh.positions)
    for k in np.unique(owner):
        carry = compose(noisy_poses[k], truth_poses[k].inverse())
        m = owner == k
        noisy_pos[m] = carry.apply(truth_mesh.positions[m])
    noisy_mesh = truth_mesh.with_positions(noisy_pos)

    length = float(sum(np.linalg.norm(e.measurement.translation) for e in truth_edges))
    end_err = float(np.linalg.norm(noisy_poses[-1].translation - truth_poses[-1].translation))
    meta = {
        "seed": int(seed),
        "trajectory_length": length,
        "end_drift": end_err,
        "drift_fraction": end_err / length if length else 0.0,
        "n_outliers": int(flags.sum()),
    }
    return DriftLoop(truth, noisy, truth_mesh, noisy_mesh, loops, flags, meta)


# --------------------------------------------------------------------------- box worlds

@dataclass
class Rect:
    lo: tuple[float, float]
    hi: tuple[float, float]

    def contains(self, x, y):
        return (x >= self.lo[0]) & (x <= self.hi[0]) & (y >= self.lo[1]) & (y <= self.hi[1])


def _rect_distance(x, y, r: Rect):
    dx = np.maximum(np.maximum(r.lo[0] - x, 0.0), x - r.hi[0])
    dy = np.maximum(np.maximum(r.lo[1] - y, 0.0), y - r.hi[1])
    return np.hypot(dx, dy)


@dataclass
class BoxWorld:
    """Vertical-walled world: free rectangles extruded over ``[0, height]``.

    Everything outside the free rectangles (and below the floor / above the
    ceiling) is solid. ``rooms[k]`` is a free rectangle with building id
    ``room_building[k]``; doors are free rectangles joining rooms.
    """

    rooms: list[Rect]
    doors: list[Rect]
    room_building: list[int]
    height: float
    bounds_lo: tuple[float, float]
    bounds_hi: tuple[float, float]
    door_rooms: list[tuple[int, int]] = field(default_factory=list)  # rooms joined by a passage

    @property
    def free_rects(self) -> list[Rect]:
        return self.rooms + self.doors

    def building_of(self, points) -> np.ndarray:
        """Building id of the room containing each point's xy (-1 in doors, walls and outside)."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.full(len(p), -1, dtype=np.int64)
        for r, b in zip(self.rooms, self.room_building):
            out[r.contains(p[:, 0], p[:, 1])] = b
        return out

    def obstacle_rects(self) -> list[Rect]:
        """Solid part of the bounding rectangle as cells of the breakpoint arrangement."""
        xs = sorted({self.bounds_lo[0], self.bounds_hi[0], *[v for r in self.free_rects for v in (r.lo[0], r.hi[0])]})
        ys = sorted({self.bounds_lo[1], self.bounds_hi[1], *[v for r in self.free_rects for v in (r.lo[1], r.hi[1])]})
        out = []
        for x0, x1 in zip(xs[:-1], xs[1:]):
            for y0, y1 in zip(ys[:-1], ys[1:]):
                cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
                if not any(r.contains(cx, cy) for r in self.free_rects):
                    out.append(Rect((x0, y0), (x1, y1)))
        return out


@dataclass
class Floorplan:
    world: BoxWorld
    esdf: EsdfGrid
    mesh: LabeledMesh
    room_mask: np.ndarray  # per-voxel room id, -1 outside rooms (walls, doors, slabs)
    meta: dict = field(default_factory=dict)


@dataclass
class FloorplanParams:
    rooms: int = 2
    room_size: tuple[float, float] = (5.0, 5.0)
    height: float = 3.0
    wall_thickness: float = 0.2
    door_width: float = 0.4
    voxel_size: float = 0.1
    margin: float = 0.2
    objects_per_room: int = 2
    mesh_spacing: float = 0.25
    buildings: int = 1
    exterior_doors: bool = False


def _snap(v: float, q: float) -> float:
    return round(v / q) * q


def layout(seed: int, p: FloorplanParams) -> BoxWorld:
    """Rooms on a grid (per building), buildings in a row joined by aligned exterior doors."""
    rng = _rngs(seed, 1)[0]
    n = int(p.rooms)
    if n < 1:
        raise ValueError("need at least one room")
    rows = max(1, int(math.floor(math.sqrt(n))))
    cols = int(math.ceil(n / rows))
    w, d = p.room_size
    t = p.wall_thickness
    q = p.voxel_size
    bw = cols * (w + t) + t  # building footprint including exterior walls
    bd = rows * (d + t) + t
    rooms, room_b, doors, door_rooms = [], [], [], []
    # interior door offsets are drawn once and reused by every building (copy-paste tiles)
    offsets = {}
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                span = w if dr else d
                lo = 0.5
                hi = max(lo, span - 0.5 - p.door_width)
                offsets[(r, c, dr, dc)] = _snap(rng.uniform(lo, hi), q)
    prev_east = None  # east room of the previous building, joined to the next west room
    for b in range(int(p.buildings)):
        ox = b * bw
        index = {}
        for r in range(rows):
            for c in range(cols):
                if r * cols + c >= n:
                    continue
                x0 = ox + t + c * (w + t)
                y0 = t + r * (d + t)
                index[(r, c)] = len(rooms)
                rooms.append(Rect((x0, y0), (x0 + w, y0 + d)))
                room_b.append(b)
        for (r, c), k in sorted(index.items()):
            for dr, dc in ((0, 1), (1, 0)):
                nb = index.get((r + dr, c + dc))
                if nb is None:
                    continue
                off = offsets[(r, c, dr, dc)]
                rk = rooms[k]
                width = min(p.door_width, (d if dc else w))
                if dc:  # wall between columns, door spans y
                    y0 = rk.lo[1] + min(off, d - width)
                    doors.append(Rect((rk.hi[0], y0), (rk.hi[0] + t, y0 + width)))
                else:
                    x0 = rk.lo[0] + min(off, w - width)
                    doors.append(Rect((x0, rk.hi[1]), (x0 + width, rk.hi[1] + t)))
                door_rooms.append((k, nb))
        if p.exterior_doors:
            # west and east doors of the first row, centred so neighbouring tiles line up
            y0 = _snap(t + 0.5 * (d - p.door_width), q)
            west = index[(0, 0)]
            east = index[max((rc for rc in index if rc[0] == 0), key=lambda rc: rc[1])]
            doors.append(Rect((ox, y0), (ox + t, y0 + p.door_width)))
            ex = rooms[east].hi[0]
            doors.append(Rect((ex, y0), (ex + t, y0 + p.door_width)))
            if b > 0:
                door_rooms.append((prev_east, west))
            prev_east = east
    lo = (-p.margin, -p.margin)
    hi = (p.buildings * bw + p.margin, bd + p.margin)
    return BoxWorld(rooms, doors, room_b, p.height, lo, hi, door_rooms)


def box_world_esdf(world: BoxWorld, voxel: float, margin_z: float = 0.2) -> EsdfGrid:
    """Exact signed distance to the solid part of a vertical-walled world.

    Walls are full-height prisms, so inside the free layer the distance is
    ``min(z, H - z, d_xy)``; below/above it the slab and the prism combine
    by Pythagoras.
    """
    lo = np.array([world.bounds_lo[0], world.bounds_lo[1], -margin_z])
    hi = np.array([world.bounds_hi[0], world.bounds_hi[1], world.height + margin_z])
    dims = np.maximum(1, np.round((hi - lo) / voxel).astype(int))
    xs = lo[0] + (np.arange(dims[0]) + 0.5) * voxel
    ys = lo[1] + (np.arange(dims[1]) + 0.5) * voxel
    zs = lo[2] + (np.arange(dims[2]) + 0.5) * voxel
    x, y = np.meshgrid(xs, ys, indexing="ij")
    free = np.zeros(x.shape, dtype=bool)
    d_free = np.full(x.shape, np.inf)
    for r in world.free_rects:
        free |= r.contains(x, y)
        d_free = np.minimum(d_free, _rect_distance(x, y, r))
    d_solid = np.full(x.shape, np.inf)
    for r in world.obstacle_rects():
        d_solid = np.minimum(d_solid, _rect_distance(x, y, r))
    h = world.height
    z = zs[None, None, :]
    below = np.maximum(-z, 0.0)
    above = np.maximum(z - h, 0.0)
    inside_layer = (z >= 0.0) & (z <= h)
    dz_out = np.maximum(below, above)
    free3 = free[:, :, None]
    pos = np.minimum(np.minimum(z, h - z), d_solid[:, :, None])
    neg_free_xy = -dz_out + 0.0 * x[:, :, None]
    neg_solid_xy = -np.sqrt(dz_out**2 + d_free[:, :, None] ** 2)
    dist = np.where(
        free3,
        np.where(inside_layer, pos, neg_free_xy),
        np.where(inside_layer, -d_free[:, :, None], neg_solid_xy),
    )
    return EsdfGrid(lo, voxel, dist.astype(np.float32))


def room_mask(world: BoxWorld, esdf: EsdfGrid) -> np.ndarray:
    """Per-voxel room id (rooms only; doors, walls and slabs are -1)."""
    x, y = np.meshgrid(esdf.centers(0), esdf.centers(1), indexing="ij")
    mask2 = np.full(x.shape, -1, dtype=np.int64)
    for k, r in enumerate(world.rooms):
        mask2[r.contains(x, y)] = k
    z = esdf.centers(2)
    inside = (z > 0) & (z < world.height)
    return np.where(inside[None, None, :], mask2[:, :, None], -1)


def box_world_mesh(world: BoxWorld, spacing: float, objects_per_room: int, seed: int) -> LabeledMesh:
    """Wall/floor/ceiling surfaces facing into each room plus labeled object boxes."""
    rng = _rngs(seed, 2)[1]
    parts = []
    h = world.height
    classes = sorted(L.OBJECT_CLASSES)
    for r in world.rooms:
        (x0, y0), (x1, y1) = r.lo, r.hi
        w, d = x1 - x0, y1 - y0
        nw, nd, nh = (max(1, int(round(v / spacing))) for v in (w, d, h))

        def not_in_door(pts):
            keep = np.ones(len(pts), dtype=bool)
            for door in world.doors:
                inside = door.contains(pts[:, 0], pts[:, 1])
                strict = (pts[:, 0] > door.lo[0] + 1e-9) & (pts[:, 0] < door.hi[0] - 1e-9) | (
                    (pts[:, 1] > door.lo[1] + 1e-9) & (pts[:, 1] < door.hi[1] - 1e-9)
                )
                keep &= ~(inside & strict)
            return keep

        parts.append(grid_patch([x0, y0, 0], [w, 0, 0], [0, 0, h], nw, nh, L.WALL, [0, 1, 0], not_in_door))
        parts.append(grid_patch([x0, y1, 0], [w, 0, 0], [0, 0, h], nw, nh, L.WALL, [0, -1, 0], not_in_door))
        parts.append(grid_patch([x0, y0, 0], [0, d, 0], [0, 0, h], nd, nh, L.WALL, [1, 0, 0], not_in_door))
        parts.append(grid_patch([x1, y0, 0], [0, d, 0], [0, 0, h], nd, nh, L.WALL, [-1, 0, 0], not_in_door))
        parts.append(grid_patch([x0, y0, 0], [w, 0, 0], [0, d, 0], nw, nd, L.FLOOR, [0, 0, 1]))
        parts.append(grid_patch([x0, y0, h], [w, 0, 0], [0, d, 0], nw, nd, L.CEILING, [0, 0, -1]))
        placed = []
        for _ in range(int(objects_per_room)):
            cls = classes[int(rng.integers(len(classes)))]
            size = rng.uniform(0.3, 0.8, 3)
            for _attempt in range(50):
                cx = rng.uniform(x0 + 0.6 + size[0] / 2, x1 - 0.6 - size[0] / 2)
                cy = rng.uniform(y0 + 0.6 + size[1] / 2, y1 - 0.6 - size[1] / 2)
                if all(abs(cx - px) > 1.2 or abs(cy - py) > 1.2 for px, py in placed):
                    break
            placed.append((cx, cy))
            lo = np.array([cx - size[0] / 2, cy - size[1] / 2, 0.0])
            parts.append(box_mesh(lo, lo + size, cls, 0.05))
    return LabeledMesh.concatenate(parts)


def floorplan(seed: int = 0, params: FloorplanParams | None = None) -> Floorplan:
    p = params or FloorplanParams()
    world = layout(seed, p)
    esdf = box_world_esdf(world, p.voxel_size)
    mesh = box_world_mesh(world, p.mesh_spacing, p.objects_per_room, seed)
    mask = room_mask(world, esdf)
    meta = {
        "seed": int(seed),
        "rooms": len(world.rooms),
        "buildings": int(p.buildings),
        "door_width": float(p.door_width),
        "ceiling_height": float(world.height),
        "free_voxels": int((esdf.distances > 0).sum()),
    }
    return Floorplan(world, esdf, mesh, mask, meta)


def office(seed: int = 0, replicate: int = 1, **overrides) -> Floorplan:
    """2x2-room office building, copied ``replicate`` times in a row of buildings."""
    kw = dict(rooms=4, room_size=(5.0, 5.0), door_width=0.4, buildings=int(replicate), exterior_doors=True)
    kw.update(overrides)
    return floorplan(seed, FloorplanParams(**kw))


# --------------------------------------------------------------------------- humans

N_JOINTS = 14
N_BETAS = 8
_JOINT_OFFSETS = np.array([
    [0.0, 0.0, 0.55], [0.0, 0.0, 0.75], [0.0, 0.2, 0.5], [0.0, -0.2, 0.5],
    [0.0, 0.25, 0.2], [0.0, -0.25, 0.2], [0.0, 0.25, -0.05], [0.0, -0.25, -0.05],
    [0.0, 0.1, -0.1], [0.0, -0.1, -0.1], [0.0, 0.1, -0.5], [0.0, -0.1, -0.5],
    [0.0, 0.1, -0.9], [0.0, -0.1, -0.9],
])


@dataclass
class HumanDetection:
    stamp: float
    pelvis_pose: RigidTransform
    joints: np.ndarray
    betas: np.ndarray
    bbox_pixels: int = 100
    boundary: bool = False

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float).reshape(-1, 3)
        self.betas = np.asarray(self.betas, dtype=float).reshape(-1)
        if self.betas.shape != (N_BETAS,):
            raise ValueError(f"expected {N_BETAS} shape parameters")
        if not (np.all(np.isfinite(self.joints)) and np.all(np.isfinite(self.betas))):
            raise ValueError("joints and betas must be finite")

    @property
    def position(self) -> np.ndarray:
        return self.pelvis_pose.translation


@dataclass
class HumanStreamParams:
    n_humans: int = 2
    duration: float = 20.0
    rate: float = 2.0
    speed: float = 1.25
    pos_sigma: float = 0.1
    joint_sigma: float = 0.05
    beta_sigma: float = 0.01
    outlier_rate: float = 0.2
    outlier_min: float = 0.5
    outlier_max: float = 1.5
    small_bbox_rate: float = 0.1
    small_bbox_sigma: float = 0.8
    boundary_rate: float = 0.05
    dropout_rate: float = 0.0
    crossing: bool = True
    separation: float = 0.0  # lateral offset between walkers when not crossing


@dataclass
class HumanStream:
    detections: list[HumanDetection]
    truth_ids: np.ndarray  # generating human per detection
    truth_positions: np.ndarray  # true pelvis position per detection
    is_outlier: np.ndarray
    truth_tracks: dict = field(default_factory=dict)  # human id -> (stamps, positions)
    betas: np.ndarray = None


def human_stream(seed: int = 0, params: HumanStreamParams | None = None) -> HumanStream:
    """Humans walking straight lines at constant speed through a shared area.

    With ``crossing`` the walkers' paths intersect near the middle of the
    stream; otherwise they walk parallel lines ``separation`` apart.
    Detections of different humans are interleaved in time.
    """
    p = params or HumanStreamParams()
    r_path, r_noise, r_out, r_beta = _rngs(seed, 4)
    dt = 1.0 / p.rate
    steps = int(round(p.duration * p.rate))
    half = 0.5 * p.speed * p.duration
    betas = r_beta.uniform(-1.0, 1.0, (p.n_humans, N_BETAS))
    dets, ids, truth, outl = [], [], [], []
    tracks = {}
    for h in range(p.n_humans):
        if p.crossing:
            ang = math.pi * h / max(1, p.n_humans) + r_path.uniform(-0.2, 0.2)
            center = r_path.uniform(-0.3, 0.3, 2)
        else:
            ang = 0.0
            center = np.array([0.0, h * p.separation])
        direction = np.array([math.cos(ang), math.sin(ang), 0.0])
        start = np.array([center[0], center[1], 1.0]) - half * direction
        heading = RigidTransform.from_rotvec([0.0, 0.0, ang]).rotation
        offset_t = h * dt / p.n_humans
        stamps, poss = [], []
        for k in range(steps):
            t = k * dt + offset_t
            pos = start + p.speed * (t - offset_t) * direction
            stamps.append(t)
            poss.append(pos)
            if p.dropout_rate and r_noise.uniform() < p.dropout_rate:
                continue
            small = r_noise.uniform() < p.small_bbox_rate
            boundary = r_noise.uniform() < p.boundary_rate
            sigma = p.small_bbox_sigma if (small or boundary) else p.pos_sigma
            meas = pos + r_noise.normal(0.0, 1.0, 3) * sigma
            outlier = r_out.uniform() < p.outlier_rate
            if outlier:
                v = r_out.normal(size=3)
                v[2] = 0.0
                meas = pos + v / np.linalg.norm(v) * r_out.uniform(p.outlier_min, p.outlier_max)
            bbox = int(r_noise.integers(10, 31)) if small else int(r_noise.integers(31, 300))
            joints = meas + _JOINT_OFFSETS @ heading.T + r_noise.normal(0.0, 1.0, (N_JOINTS, 3)) * p.joint_sigma
            b = betas[h] + r_noise.normal(0.0, 1.0, N_BETAS) * p.beta_sigma
            pose = RigidTransform(heading, meas)
            dets.append(HumanDetection(round(t, 9), pose, joints, b, bbox, bool(boundary)))
            ids.append(h)
            truth.append(pos)
            outl.append(bool(outlier))
        tracks[h] = (np.array(stamps), np.array(poss))
    order = sorted(range(len(dets)), key=lambda k: (dets[k].stamp, ids[k]))
    return HumanStream(
        [dets[k] for k in order],
        np.array([ids[k] for k in order], dtype=np.int64),
        np.array([truth[k] for k in order]).reshape(-1, 3),
        np.array([outl[k] for k in order], dtype=bool),
        tracks,
        betas,
    )


def format_detection(d: HumanDetection) -> str:
    q = d.pelvis_pose.quaternion()
    vals = [repr(float(d.stamp))] + [repr(float(v)) for v in (*d.pelvis_pose.translation, *q)]
    vals.append(str(len(d.joints)))
    vals += [repr(float(v)) for v in d.joints.ravel()]
    vals += [repr(float(v)) for v in d.betas]
    vals += [str(int(d.bbox_pixels)), str(int(bool(d.boundary)))]
    return " ".join(vals)


def save_detections(dets: list[HumanDetection]) -> bytes:
    return "".join(format_detection(d) + "\n" for d in dets).encode("utf-8")


def load_detections(data: bytes | str) -> list[HumanDetection]:
    """Parse ``stamp tx ty tz qx qy qz qw J j1x j1y j1z ... b1..b8 bbox boundary_flag`` lines."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    out = []
    for lineno, line in enumerate(data.splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            stamp = float(tok[0])
            vals = [float(v) for v in tok[1:8]]
            nj = int(tok[8])
            need = 9 + 3 * nj + N_BETAS + 2
            if len(tok) != need:
                raise ValueError(f"expected {need} fields, got {len(tok)}")
            joints = np.array([float(v) for v in tok[9:9 + 3 * nj]]).reshape(nj, 3)
            betas = np.array([float(v) for v in tok[9 + 3 * nj:9 + 3 * nj + N_BETAS]])
            bbox = int(tok[-2])
            flag = tok[-1]
            if flag not in ("0", "1"):
                raise ValueError("boundary flag must be 0 or 1")
            pose = RigidTransform.from_quaternion(vals[3:7], vals[0:3])
            out.append(HumanDetection(stamp, pose, joints, betas, bbox, flag == "1"))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return out
