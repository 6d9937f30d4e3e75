"""Per-human pose graphs from a stream of body detections.

Each detection (pelvis pose, joints, shape parameters, image-box size) is
first screened, then associated to the existing track whose last node is
nearest among those passing the speed, joint-displacement and
shape-parameter gates, or starts a new track. A track is a chain of
zero-velocity relative factors with one absolute prior per detection.
Optimization rejects priors that would require implausibly fast motion
(pairwise consistency + maximum clique) and smooths the rest; tracks with
too few nodes are dropped.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_positive, check_probability
from .geom import EdgeWeight, RigidTransform, chi2_quantile, relative, so3_log
from .pcm import maximum_clique
from .pgmo import PgmoConfig, Prior, rpgo_optimize
from .pose_graph import EdgeKind, PoseGraph, PoseNode, RelativePoseEdge
from .synth import HumanDetection

NEW_TRACK = None


@dataclass
class TrackerConfig:
    # gates
    max_centroid_speed: float = 3.0  # m/s
    max_joint_disp: float = 3.0  # m
    beta_threshold: float = 0.1  # mean |delta beta|
    min_track_len: int = 10  # nodes
    min_bbox: int = 30  # pixels; boxes this small or smaller are rejected
    use_beta_gate: bool = True
    inactivity_timeout: float = 2.0  # s without detections before a track stops accepting
    # factor noise
    walk_speed: float = 1.25  # m/s; a walk at this speed is 1 sigma of the zero-velocity factor
    turn_rate: float = math.pi  # rad/s; same role for rotation
    prior_sigma_trans: float = 0.1  # m
    prior_sigma_rot: float = 0.1  # rad
    # prior consistency
    pcm_confidence: float = 0.99
    optimize_iters: int = 100
    optimize_tolerance: float = 1e-6  # stop when the relative cost decrease falls below this

    def __post_init__(self):
        for name in ("max_centroid_speed", "max_joint_disp", "beta_threshold", "min_bbox",
                     "inactivity_timeout", "walk_speed", "turn_rate", "prior_sigma_trans", "prior_sigma_rot"):
            check_positive(getattr(self, name), name)
        if int(self.min_track_len) < 1:
            raise ValueError("min_track_len must be >= 1")
        check_probability(self.pcm_confidence, "pcm_confidence")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrackerConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown tracker options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class HumanTrack:
    """Detections attached to one human; ``estimates`` holds the smoothed poses after optimization."""

    id: int
    stamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)  # detection poses (the priors)
    joints: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    detections: list = field(default_factory=list)  # stream indices
    estimates: list | None = None
    prior_inliers: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.stamps)

    @property
    def last_stamp(self) -> float:
        return self.stamps[-1]

    @property
    def positions(self) -> np.ndarray:
        src = self.estimates if self.estimates is not None else self.poses
        return np.array([p.translation for p in src]).reshape(-1, 3)

    @property
    def detection_positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def zero_velocity_weight(self, k: int, cfg: TrackerConfig) -> EdgeWeight:
        dt = self.stamps[k + 1] - self.stamps[k]
        return EdgeWeight.from_sigmas(cfg.turn_rate * dt, cfg.walk_speed * dt)

    def pose_graph(self, cfg: TrackerConfig) -> PoseGraph:
        """Chain of identity (zero-velocity) edges over the current pose estimates."""
        src = self.estimates if self.estimates is not None else self.poses
        nodes = [PoseNode(k, float(s), p) for k, (s, p) in enumerate(zip(self.stamps, src))]
        edges = [RelativePoseEdge(k, k + 1, RigidTransform.identity(), self.zero_velocity_weight(k, cfg))
                 for k in range(len(nodes) - 1)]
        return PoseGraph(nodes, edges)

    def priors(self, cfg: TrackerConfig, mask: np.ndarray | None = None) -> list[Prior]:
        w = EdgeWeight.from_sigmas(cfg.prior_sigma_rot, cfg.prior_sigma_trans)
        return [Prior(k, p, w) for k, p in enumerate(self.poses) if mask is None or mask[k]]


# --------------------------------------------------------------------------- screening and association

def filter_detection(d: HumanDetection, cfg: TrackerConfig) -> bool:
    """Reject detections whose image box is too small or that touch the image boundary."""
    return int(d.bbox_pixels) > cfg.min_bbox and not d.boundary


def gate_values(track: HumanTrack, d: HumanDetection) -> dict:
    """Quantities the association gates compare against their thresholds."""
    dt = float(d.stamp) - track.last_stamp
    dist = float(np.linalg.norm(d.position - track.poses[-1].translation))
    joints = np.asarray(d.joints)
    prev = np.asarray(track.joints[-1])
    joint_disp = float(np.linalg.norm(joints - prev, axis=1).max()) if joints.shape == prev.shape else math.inf
    return {
        "dt": dt,
        "distance": dist,
        "speed": dist / dt if dt > 0 else math.inf,
        "joint_disp": joint_disp,
        "beta_diff": float(np.mean(np.abs(np.asarray(d.betas) - np.asarray(track.betas[-1])))),
    }


def passes_gates(track: HumanTrack, d: HumanDetection, cfg: TrackerConfig) -> bool:
    v = gate_values(track, d)
    if v["dt"] <= 0 or v["dt"] > cfg.inactivity_timeout:
        return False
    if v["speed"] > cfg.max_centroid_speed or v["joint_disp"] > cfg.max_joint_disp:
        return False
    return not (cfg.use_beta_gate and v["beta_diff"] > cfg.beta_threshold)


def associate(tracks: Sequence[HumanTrack], d: HumanDetection, cfg: TrackerConfig):
    """Id of the gated track with the nearest last pelvis (ties: lowest id), else ``NEW_TRACK``."""
    best = None
    for t in tracks:
        if not passes_gates(t, d, cfg):
            continue
        key = (gate_values(t, d)["distance"], t.id)
        if best is None or key < best:
            best = key
    return NEW_TRACK if best is None else best[1]


def append(track: HumanTrack, d: HumanDetection, cfg: TrackerConfig, index: int | None = None) -> HumanTrack:
    """Add a node with a prior at the detection pose (and a zero-velocity edge to the previous node)."""
    if track.stamps and float(d.stamp) <= track.last_stamp:
        raise ValueError("detection stamps must increase along a track")
    track.stamps.append(float(d.stamp))
    track.poses.append(d.pelvis_pose)
    track.joints.append(np.asarray(d.joints, dtype=float).copy())
    track.betas.append(np.asarray(d.betas, dtype=float).copy())
    track.detections.append(index)
    track.estimates = None
    track.prior_inliers = None
    return track


def new_track(track_id: int, d: HumanDetection, cfg: TrackerConfig, index: int | None = None) -> HumanTrack:
    return append(HumanTrack(track_id), d, cfg, index)


# --------------------------------------------------------------------------- optimization

def virtual_loops(track: HumanTrack) -> list[RelativePoseEdge | None]:
    """Each prior as a loop closure from the gauge node (node 0): ``T_0^-1 T_k`` (``None`` for node 0)."""
    t0 = track.poses[0]
    return [RelativePoseEdge(0, k, relative(t0, p), kind=EdgeKind.LOOP_CLOSURE) if k else None
            for k, p in enumerate(track.poses)]


def prior_consistency(track: HumanTrack, cfg: TrackerConfig) -> np.ndarray:
    """Pairwise consistency of the priors as seen through the zero-velocity chain.

    The cycle ``i -> gauge`` (inverse virtual loop ``i``), ``gauge -> j``
    (virtual loop ``j``), ``j -> i`` (identity chain) leaves the relative
    pose of detections ``i`` and ``j`` as residual. Motion up to
    ``walk_speed`` / ``turn_rate`` over the elapsed time is free; the excess
    is tested against the noise of two priors with a chi-square gate
    (2 dof: translation and rotation excess).
    """
    n = len(track)
    ok = np.ones((n, n), dtype=bool)
    if n < 2:
        return ok
    chain = track.pose_graph(cfg)
    cum = [RigidTransform.identity()]  # chain transform gauge -> k
    for k in range(1, n):
        cum.append(cum[-1] @ chain.chain_transform(k - 1, k)[0])
    loops = virtual_loops(track)  # loops[0] is None: node 0 is the gauge
    thr = chi2_quantile(2, cfg.pcm_confidence)
    var_t = 2.0 * cfg.prior_sigma_trans ** 2
    var_r = 2.0 * cfg.prior_sigma_rot ** 2
    ident = RigidTransform.identity()
    for i in range(n):
        li = ident if loops[i] is None else loops[i].measurement
        for j in range(i + 1, n):
            back = cum[j].inverse() @ cum[i]  # chain j -> i
            res = li.inverse() @ loops[j].measurement @ back
            dt = track.stamps[j] - track.stamps[i]
            ex_t = max(0.0, float(np.linalg.norm(res.translation)) - cfg.walk_speed * dt)
            ex_r = max(0.0, float(np.linalg.norm(so3_log(res.rotation))) - cfg.turn_rate * dt)
            ok[i, j] = ok[j, i] = ex_t ** 2 / var_t + ex_r ** 2 / var_r <= thr
    return ok


def optimize_track(track: HumanTrack, cfg: TrackerConfig) -> HumanTrack:
    """Keep the largest mutually consistent prior set, then smooth with the zero-velocity chain."""
    n = len(track)
    if n < 2:
        track.estimates = list(track.poses)
        track.prior_inliers = np.ones(n, dtype=bool)
        return track
    keep = maximum_clique(prior_consistency(track, cfg))
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    g = track.pose_graph(cfg)
    # initialise rejected nodes from the nearest kept detection so the solver starts near the chain
    kept_idx = np.flatnonzero(mask)
    init = [track.poses[k] if mask[k] else track.poses[int(kept_idx[np.argmin(np.abs(kept_idx - k))])]
            for k in range(n)]
    g = g.with_poses(init)
    out = rpgo_optimize(g, PgmoConfig(max_iters=cfg.optimize_iters, residual_tolerance=cfg.optimize_tolerance), track.priors(cfg, mask))
    track.estimates = [node.pose for node in out.nodes]
    track.prior_inliers = mask
    return track


def prune_tracks(tracks: Iterable[HumanTrack], cfg: TrackerConfig) -> list[HumanTrack]:
    """Drop tracks with fewer than ``min_track_len`` nodes."""
    return [t for t in tracks if len(t) >= int(cfg.min_track_len)]


# --------------------------------------------------------------------------- streaming estimator

class HumanTracker(BaseEstimator):
    """Streaming tracker: ``partial_fit`` consumes detections, ``fit`` runs a whole stream.

    After fitting, ``tracks_`` holds the optimized tracks that survived
    pruning and ``rejected_`` counts screened-out detections.
    """

    def __init__(self, max_centroid_speed=3.0, max_joint_disp=3.0, beta_threshold=0.1, min_track_len=10,
                 min_bbox=30, use_beta_gate=True, inactivity_timeout=2.0, walk_speed=1.25, turn_rate=math.pi,
                 prior_sigma_trans=0.1, prior_sigma_rot=0.1, pcm_confidence=0.99, optimize_iters=100,
                 optimize_tolerance=1e-6):
        self.max_centroid_speed = max_centroid_speed
        self.max_joint_disp = max_joint_disp
        self.beta_threshold = beta_threshold
        self.min_track_len = min_track_len
        self.min_bbox = min_bbox
        self.use_beta_gate = use_beta_gate
        self.inactivity_timeout = inactivity_timeout
        self.walk_speed = walk_speed
        self.turn_rate = turn_rate
        self.prior_sigma_trans = prior_sigma_trans
        self.prior_sigma_rot = prior_sigma_rot
        self.pcm_confidence = pcm_confidence
        self.optimize_iters = optimize_iters
        self.optimize_tolerance = optimize_tolerance

    @property
    def config(self) -> TrackerConfig:
        return TrackerConfig(**self.get_params())

    def _reset(self):
        self.active_: list[HumanTrack] = []
        self.finished_: list[HumanTrack] = []
        self.rejected_ = 0
        self.n_seen_ = 0
        self._next_id = 0

    def _retire(self, now: float, cfg: TrackerConfig) -> None:
        still = []
        for t in self.active_:
            (self.finished_ if now - t.last_stamp > cfg.inactivity_timeout else still).append(t)
        self.active_ = still

    def partial_fit(self, detections: Sequence[HumanDetection]):
        if not hasattr(self, "active_"):
            self._reset()
        cfg = self.config
        for d in detections:
            index = self.n_seen_
            self.n_seen_ += 1
            if not filter_detection(d, cfg):
                self.rejected_ += 1
                continue
            self._retire(float(d.stamp), cfg)
            tid = associate(self.active_, d, cfg)
            if tid is NEW_TRACK:
                self.active_.append(new_track(self._next_id, d, cfg, index))
                self._next_id += 1
            else:
                append(next(t for t in self.active_ if t.id == tid), d, cfg, index)
        return self

    def finalize(self) -> list[HumanTrack]:
        """Close every track, optimize, prune; returns (and stores) ``tracks_``."""
        cfg = self.config
        tracks = sorted(self.finished_ + self.active_, key=lambda t: t.id)
        self.finished_, self.active_ = tracks, []
        self.tracks_ = [optimize_track(t, cfg) for t in prune_tracks(tracks, cfg)]
        return self.tracks_

    def fit(self, detections: Sequence[HumanDetection], y=None):
        self._reset()
        self.partial_fit(detections)
        self.finalize()
        return self


# --------------------------------------------------------------------------- evaluation

STAGES = ("raw", "filtered", "optimized", "beta_gate")


def stage_errors(detections: Sequence[HumanDetection], truth_positions: np.ndarray,
                 cfg: TrackerConfig | None = None) -> dict[str, float]:
    """Mean pelvis error (m) after each added stage of the pipeline.

    ``raw``: every detection; ``filtered``: detections passing the image-box
    screen; ``optimized``: pose-graph + consistency output without the
    shape-parameter gate (nodes of surviving tracks); ``beta_gate``: the
    same with the gate. Errors are measured against the true pelvis of
    the human that produced each detection.
    """
    cfg = cfg or TrackerConfig()
    truth = np.asarray(truth_positions, dtype=float).reshape(-1, 3)
    pos = np.array([d.position for d in detections]).reshape(-1, 3)
    err = np.linalg.norm(pos - truth, axis=1)
    keep = np.array([filter_detection(d, cfg) for d in detections], dtype=bool)
    out = {"raw": float(err.mean()) if len(err) else 0.0,
           "filtered": float(err[keep].mean()) if keep.any() else 0.0}
    for stage, gate in (("optimized", False), ("beta_gate", True)):
        params = cfg.to_dict()
        params["use_beta_gate"] = gate
        tracker = HumanTracker(**params).fit(detections)
        errs = [np.linalg.norm(t.positions - truth[t.detections], axis=1) for t in tracker.tracks_]
        out[stage] = float(np.concatenate(errs).mean()) if errs else 0.0
    return out


def tracks_document(tracks: Sequence[HumanTrack]) -> dict:
    """JSON-ready description of optimized tracks."""
    docs = []
    for t in tracks:
        src = t.estimates if t.estimates is not None else t.poses
        docs.append({
            "id": int(t.id),
            "stamps": [float(s) for s in t.stamps],
            "positions": [[float(v) for v in p.translation] for p in src],
            "quaternions": [[float(v) for v in p.quaternion()] for p in src],
            "betas": [float(v) for v in np.mean(t.betas, axis=0)],
            "detections": [None if k is None else int(k) for k in t.detections],
            "prior_inliers": None if t.prior_inliers is None else [bool(v) for v in t.prior_inliers],
        })
    return {"schema": "dsgkit.human_tracks", "version": 1, "tracks": docs}
