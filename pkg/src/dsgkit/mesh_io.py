"""Labeled meshes, ESDF voxel grids, their file formats, and mesh simplification."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points, check_positive

ESDF_MAGIC = b"DSGESDF1"
ESDF_HEADER = struct.Struct("<8s3I d 3d 12x")  # 64 bytes


class PlyFormatError(ValueError):
    pass


@dataclass(eq=False)
class LabeledMesh:
    """Triangle mesh with per-vertex normal, RGB color and semantic label."""

    positions: np.ndarray
    faces: np.ndarray = None
    normals: np.ndarray = None
    colors: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        self.positions = check_points(self.positions, "positions")
        n = len(self.positions)
        self.faces = np.zeros((0, 3), dtype=np.int64) if self.faces is None else np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.colors = np.full((n, 3), 128, dtype=np.uint8) if self.colors is None else np.asarray(self.colors, dtype=np.uint8).reshape(n, 3)
        self.labels = np.zeros(n, dtype=np.int64) if self.labels is None else np.asarray(self.labels, dtype=np.int64).reshape(n)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face")
        if self.normals is None:
            self.normals = vertex_normals(self.positions, self.faces)
        else:
            self.normals = np.asarray(self.normals, dtype=float).reshape(n, 3)
        if n and not np.allclose(np.linalg.norm(self.normals, axis=1), 1.0, atol=1e-6):
            raise ValueError("normals must be unit length")

    def __len__(self) -> int:
        return len(self.positions)

    def with_positions(self, positions: np.ndarray) -> "LabeledMesh":
        return LabeledMesh(positions, self.faces.copy(), self.normals.copy(), self.colors.copy(), self.labels.copy())

    def submesh(self, vertex_mask: np.ndarray) -> "LabeledMesh":
        """Vertices under ``vertex_mask`` and the faces fully inside it."""
        mask = np.asarray(vertex_mask, dtype=bool)
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[mask] = np.arange(mask.sum())
        faces = self.faces[np.all(mask[self.faces], axis=1)] if len(self.faces) else self.faces
        return LabeledMesh(self.positions[mask], remap[faces], self.normals[mask], self.colors[mask], self.labels[mask])

    @staticmethod
    def concatenate(meshes: list["LabeledMesh"]) -> "LabeledMesh":
        meshes = [m for m in meshes if len(m)]
        if not meshes:
            return LabeledMesh(np.zeros((0, 3)))
        offsets = np.cumsum([0] + [len(m) for m in meshes[:-1]])
        return LabeledMesh(
            np.vstack([m.positions for m in meshes]),
            np.vstack([m.faces + o for m, o in zip(meshes, offsets)]),
            np.vstack([m.normals for m in meshes]),
            np.vstack([m.colors for m in meshes]),
            np.concatenate([m.labels for m in meshes]),
        )


def vertex_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get +z."""
    n = np.zeros_like(positions, dtype=float)
    if len(faces):
        p = positions[faces]
        fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        for k in range(3):
            np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (len(positions), 1))
    ok = norm > 1e-12
    out[ok] = n[ok] / norm[ok, None]
    return out


_PLY_VERTEX_PROPS = [
    ("x", "double"), ("y", "double"), ("z", "double"),
    ("nx", "double"), ("ny", "double"), ("nz", "double"),
    ("red", "uchar"), ("green", "uchar"), ("blue", "uchar"),
    ("label", "uchar"),
]


def save_ply(mesh: LabeledMesh) -> bytes:
    """ASCII PLY with per-vertex normal, color and ``uchar label``."""
    if len(mesh) and (mesh.labels.min() < 0 or mesh.labels.max() > 255):
        raise ValueError("labels must fit in a uchar")
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"element vertex {len(mesh)}\n")
    for name, typ in _PLY_VERTEX_PROPS:
        out.write(f"property {typ} {name}\n")
    out.write(f"element face {len(mesh.faces)}\n")
    out.write("property list uchar int vertex_indices\nend_header\n")
    for p, nrm, c, lab in zip(mesh.positions, mesh.normals, mesh.colors, mesh.labels):
        vals = [repr(float(v)) for v in (*p, *nrm)] + [str(int(v)) for v in (*c, lab)]
        out.write(" ".join(vals) + "\n")
    for f in mesh.faces:
        out.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return out.getvalue().encode("ascii")


def load_ply(data: bytes | str) -> LabeledMesh:
    if isinstance(data, bytes):
        data = data.decode("ascii")
    lines = data.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("missing 'ply' magic")
    elements: list[tuple[str, int, list[str]]] = []
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise PlyFormatError("only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError("property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise PlyFormatError(f"unexpected header line {lines[i - 1]!r}")
    body = lines[i:]
    pos = 0
    verts = None
    faces = np.zeros((0, 3), dtype=np.int64)
    vprops: list[str] = []
    for name, count, props in elements:
        chunk = body[pos:pos + count]
        pos += count
        if len(chunk) != count:
            raise PlyFormatError(f"truncated {name} element")
        if name == "vertex":
            vprops = props
            verts = np.array([[float(x) for x in ln.split()] for ln in chunk]).reshape(count, len(props))
        elif name == "face":
            rows = [[int(x) for x in ln.split()] for ln in chunk]
            if any(r[0] != 3 for r in rows):
                raise PlyFormatError("only triangular faces are supported")
            faces = np.array([r[1:4] for r in rows], dtype=np.int64).reshape(-1, 3)
    if verts is None:
        raise PlyFormatError("no vertex element")
    if "label" not in vprops:
        raise PlyFormatError("vertex element lacks a 'label' property")
    col = {p: k for k, p in enumerate(vprops)}

    def cols(names):
        return verts[:, [col[n] for n in names]]

    normals = cols(["nx", "ny", "nz"]) if all(n in col for n in ("nx", "ny", "nz")) else None
    colors = cols(["red", "green", "blue"]).astype(np.uint8) if all(n in col for n in ("red", "green", "blue")) else None
    return LabeledMesh(cols(["x", "y", "z"]), faces, normals, colors, verts[:, col["label"]].astype(np.int64))


@dataclass(eq=False)
class EsdfGrid:
    """Euclidean signed-distance voxel grid; ``distances`` is indexed ``[ix, iy, iz]``."""

    origin: np.ndarray
    voxel_size: float
    distances: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.voxel_size = check_positive(float(self.voxel_size), "voxel_size")
        self.distances = np.asarray(self.distances, dtype=np.float32)
        if self.distances.ndim != 3 or min(self.distances.shape) < 1:
            raise ValueError("distances must be a non-empty 3D array")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.distances.shape)

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def index_to_world(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.voxel_size

    def world_to_index(self, p) -> np.ndarray:
        """Index of the voxel containing ``p`` (may fall outside the grid)."""
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.voxel_size).astype(np.int64)

    def in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)

    def distance_at(self, points) -> np.ndarray:
        """Nearest-voxel lookup; points outside the grid read as ``-inf``."""
        p = np.asarray(points, dtype=float)
        idx = self.world_to_index(p)
        ok = self.in_bounds(idx)
        out = np.full(idx.shape[:-1], -np.inf)
        clipped = np.clip(idx, 0, np.array(self.dims) - 1)
        vals = self.distances[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        out[ok] = vals[ok]
        return out

    def segment_clear(self, a, b, clearance: float, step: float | None = None) -> bool:
        """True when the ESDF stays >= ``clearance`` along the segment ``a -> b``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        step = 0.5 * self.voxel_size if step is None else step
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        s = np.linspace(0.0, 1.0, n + 1)[:, None]
        return bool(np.all(self.distance_at(a + s * (b - a)) >= clearance))


def save_esdf(grid: EsdfGrid) -> bytes:
    """64-byte header (magic, dims, voxel size, origin) then float32 distances, x fastest."""
    head = ESDF_HEADER.pack(ESDF_MAGIC, *grid.dims, grid.voxel_size, *grid.origin)
    return head + grid.distances.astype("<f4").ravel(order="F").tobytes()


def load_esdf(data: bytes) -> EsdfGrid:
    if len(data) < ESDF_HEADER.size:
        raise ValueError("ESDF file shorter than its header")
    magic, nx, ny, nz, voxel, ox, oy, oz = ESDF_HEADER.unpack_from(data)
    if magic != ESDF_MAGIC:
        raise ValueError(f"bad ESDF magic {magic!r}")
    count = nx * ny * nz
    body = np.frombuffer(data, dtype="<f4", count=count, offset=ESDF_HEADER.size)
    if body.size != count:
        raise ValueError("truncated ESDF body")
    return EsdfGrid((ox, oy, oz), voxel, body.reshape((nx, ny, nz), order="F"))


@dataclass(eq=False)
class SimplifiedMesh:
    """Voxel-clustered mesh: cluster centroids, inter-cluster edges and the vertex assignment."""

    vertices: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    map_full_to_simplified: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.vertices)


def simplify(mesh: LabeledMesh, voxel: float) -> SimplifiedMesh:
    """Merge vertices that share an octree leaf of side ``voxel``.

    Cluster rest positions are member centroids; two clusters are linked when
    some face spans both. Clusters are numbered in lexicographic cell order.
    """
    check_positive(voxel, "voxel")
    if len(mesh) == 0:
        return SimplifiedMesh(np.zeros((0, 3)))
    cells = np.floor(mesh.positions / voxel).astype(np.int64)
    _, assign = np.unique(cells, axis=0, return_inverse=True)
    assign = assign.reshape(-1)
    k = int(assign.max()) + 1
    sums = np.zeros((k, 3))
    np.add.at(sums, assign, mesh.positions)
    counts = np.bincount(assign, minlength=k)
    centroids = sums / counts[:, None]
    edges = np.zeros((0, 2), dtype=np.int64)
    if len(mesh.faces):
        c = assign[mesh.faces]
        pairs = np.vstack([c[:, [0, 1]], c[:, [1, 2]], c[:, [0, 2]]])
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.sort(pairs, axis=1)
        if len(pairs):
            edges = np.unique(pairs, axis=0)
    return SimplifiedMesh(centroids, edges, assign)


def mesh_rmse(estimate: LabeledMesh | np.ndarray, truth) -> float:
    """RMS nearest-neighbour distance from each truth point to the estimate's vertices."""
    est = estimate.positions if isinstance(estimate, LabeledMesh) else check_points(estimate)
    tru = truth.positions if isinstance(truth, LabeledMesh) else check_points(truth)
    if len(est) == 0 or len(tru) == 0:
        raise ValueError("mesh_rmse needs non-empty inputs")
    d, _ = cKDTree(est).query(tru)
    return float(np.sqrt(np.mean(d * d)))
