"""Command-line interface: fixture synthesis, optimization, parsing, tracking, planning and reports.

Configuration files are TOML with optional sections ``[pgmo]``, ``[pcm]``,
``[parse]``, ``[tracker]`` and ``[planner]``. All JSON output is written
with sorted keys so reruns with the same inputs are byte-identical.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import tomli

from . import synth
from .dsg_core import load_json, prune, save_json, validate
from .human_tracker import HumanTracker, TrackerConfig, stage_errors, tracks_document
from .mesh_io import load_esdf, load_ply, mesh_rmse, save_esdf, save_ply
from .pcm import PcmConfig
from .pgmo import PgmoConfig
from .pipeline import DRIFT_PCM, ParseConfig, close_loops, parse_scene, room_scores, tiled_office
from .planner import (EsdfPlanner, HierarchicalPlanner, NoSuchTarget, Unreachable, bench, bench_csv,
                      far_queries, format_query, parse_query, resolve_query)
from .pose_graph import ate_rmse, load_edges_g2o, load_g2o, save_edges_g2o, save_g2o

CONFIG_SECTIONS = ("pgmo", "pcm", "parse", "tracker", "planner")
PLANNER_DEFAULTS = {"clearance": 0.1, "connectivity": 26}

# drift_loop preset used by the CLI: enough heading bias for > 5 % end drift
DRIFT_PRESET = {"yaw_bias": 0.012, "odom_sigma_trans": 0.01, "odom_sigma_rot": 0.002}


# --------------------------------------------------------------------------- helpers

def load_config(path: str | None) -> dict:
    """Parsed TOML config; unknown sections are rejected."""
    if not path:
        return {}
    with open(path, "rb") as fh:
        cfg = tomli.load(fh)
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise click.BadParameter(f"unknown config sections: {sorted(unknown)}", param_hint="--config")
    return cfg


def _pgmo_config(cfg: dict) -> PgmoConfig:
    return PgmoConfig.from_dict(cfg.get("pgmo", {}))


def _pcm_config(cfg: dict) -> PcmConfig:
    return PcmConfig(**{**DRIFT_PCM, **cfg.get("pcm", {})})


def _planner_options(cfg: dict) -> dict:
    opts = {**PLANNER_DEFAULTS, **cfg.get("planner", {})}
    unknown = set(opts) - set(PLANNER_DEFAULTS)
    if unknown:
        raise click.BadParameter(f"unknown planner options: {sorted(unknown)}", param_hint="--config")
    return opts


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> bytes:
    return (json.dumps(to_jsonable(obj), sort_keys=True, indent=1) + "\n").encode("utf-8")


def _write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)


def _emit(obj, out: str | None) -> None:
    if out:
        _write(out, dumps(obj))
    else:
        click.echo(dumps(obj).decode("utf-8"), nl=False)


def _point(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise click.BadParameter(f"expected 'x,y,z', got {text!r}")
    return np.array(vals)


def _path_doc(res) -> dict:
    return {"cost": res.cost, "waypoints": res.waypoints, "fallback": bool(res.fallback), "expanded": res.expanded}


# --------------------------------------------------------------------------- root

@click.group()
@click.version_option(package_name="artifact")
def main():
    """Layered scene graphs: loop closure, parsing, human tracking and planning."""


# --------------------------------------------------------------------------- synth

@main.command("synth")
@click.argument("scenario", type=click.Choice(["drift_loop", "floorplan", "office", "human_stream"]))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
@click.option("--rooms", type=int, default=None, help="floorplan: number of rooms.")
@click.option("--door-width", type=float, default=None, help="floorplan/office: door width (m).")
@click.option("--replicate", type=int, default=1, show_default=True, help="office: building copies.")
@click.option("--outlier-rate", type=float, default=None, help="drift_loop/human_stream: outlier fraction.")
@click.option("--loops", "n_loops", type=int, default=None, help="drift_loop: number of loop closures.")
@click.option("--yaw-bias", type=float, default=None, help="drift_loop: heading bias per step (rad).")
def synth_cmd(scenario, seed, out_dir, rooms, door_width, replicate, outlier_rate, n_loops, yaw_bias):
    """Generate a seeded synthetic fixture into OUT."""
    out = Path(out_dir)
    if scenario == "drift_loop":
        kw = dict(DRIFT_PRESET)
        for key, val in (("outlier_rate", outlier_rate), ("n_loops", n_loops), ("yaw_bias", yaw_bias)):
            if val is not None:
                kw[key] = val
        d = synth.drift_loop(seed, synth.DriftLoopParams(**kw))
        _write(out / "truth.g2o", save_g2o(d.truth))
        _write(out / "noisy.g2o", save_g2o(d.noisy))
        _write(out / "loops.g2o", save_edges_g2o(d.loops))
        _write(out / "truth_mesh.ply", save_ply(d.truth_mesh))
        _write(out / "noisy_mesh.ply", save_ply(d.noisy_mesh))
        _write(out / "meta.json", dumps({**d.meta, "loop_is_outlier": d.is_outlier}))
    elif scenario in ("floorplan", "office"):
        kw = {}
        if door_width is not None:
            kw["door_width"] = door_width
        if scenario == "floorplan":
            if rooms is not None:
                kw["rooms"] = rooms
            fp = synth.floorplan(seed, synth.FloorplanParams(**kw))
        else:
            fp = synth.office(seed, replicate=replicate, **kw)
        _write(out / "mesh.ply", save_ply(fp.mesh))
        _write(out / "scene.esdf", save_esdf(fp.esdf))
        with open(out / "room_mask.npy", "wb") as fh:
            np.save(fh, fp.room_mask)
        _write(out / "meta.json", dumps(fp.meta))
    else:
        kw = {} if outlier_rate is None else {"outlier_rate": outlier_rate}
        hs = synth.human_stream(seed, synth.HumanStreamParams(**kw))
        _write(out / "detections.txt", synth.save_detections(hs.detections))
        truth = {
            "seed": seed,
            "detection_human": hs.truth_ids,
            "detection_truth": hs.truth_positions,
            "detection_is_outlier": hs.is_outlier,
            "humans": {str(h): {"stamps": s, "positions": p} for h, (s, p) in hs.truth_tracks.items()},
        }
        _write(out / "truth.json", dumps(truth))
    click.echo(f"wrote {scenario} fixture to {out}", err=True)


# --------------------------------------------------------------------------- optimize

@main.command("optimize")
@click.option("--traj", "--graph", "traj_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Trajectory pose graph (g2o); loop edges in it are treated as candidates.")
@click.option("--loops", "loops_path", type=click.Path(exists=True, dir_okay=False), help="Candidate loops (g2o edges).")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False), help="Mesh to deform (PLY).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-traj", type=click.Path(dir_okay=False), help="Optimized trajectory (g2o).")
@click.option("--out-mesh", type=click.Path(dir_okay=False), help="Deformed mesh (PLY).")
@click.option("--no-mesh", is_flag=True, help="Pose-graph only mode (ignore --mesh).")
@click.option("--truth-traj", type=click.Path(exists=True, dir_okay=False), help="Ground-truth trajectory for ATE.")
@click.option("--truth-mesh", type=click.Path(exists=True, dir_okay=False), help="Ground-truth mesh for mesh RMSE.")
@click.option("--report", type=click.Path(dir_okay=False), help="Metrics JSON (stdout if omitted).")
def optimize_cmd(traj_path, loops_path, mesh_path, config_path, out_traj, out_mesh, no_mesh, truth_traj,
                 truth_mesh, report):
    """Reject inconsistent loop closures, then jointly optimize trajectory and mesh."""
    cfg = load_config(config_path)
    traj = load_g2o(Path(traj_path).read_bytes())
    loops = list(traj.loop_closures)
    if loops_path:
        loops += load_edges_g2o(Path(loops_path).read_bytes())
    mesh = None if no_mesh or not mesh_path else load_ply(Path(mesh_path).read_bytes())
    new_traj, new_mesh, summary = close_loops(traj, loops, mesh, _pgmo_config(cfg), _pcm_config(cfg))
    metrics = {"mode": "pose_graph" if mesh is None else "mesh_and_pose_graph", **summary}
    if truth_traj:
        truth = load_g2o(Path(truth_traj).read_bytes())
        metrics["ate_before"] = ate_rmse(traj, truth)
        metrics["ate_after"] = ate_rmse(new_traj, truth)
    if truth_mesh and mesh is not None:
        tm = load_ply(Path(truth_mesh).read_bytes())
        metrics["mesh_rmse_before"] = mesh_rmse(mesh, tm)
        metrics["mesh_rmse_after"] = mesh_rmse(new_mesh, tm)
    if out_traj:
        _write(out_traj, save_g2o(new_traj))
    if out_mesh and new_mesh is not None:
        _write(out_mesh, save_ply(new_mesh))
    _emit(metrics, report)


# --------------------------------------------------------------------------- parse

@main.command("parse")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False), help="Labeled mesh (PLY).")
@click.option("--esdf", "esdf_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Scene graph JSON.")
def parse_cmd(mesh_path, esdf_path, config_path, out):
    """Build objects, places, rooms and walls from a labeled mesh and an ESDF."""
    cfg = load_config(config_path)
    mesh = load_ply(Path(mesh_path).read_bytes()) if mesh_path else None
    esdf = load_esdf(Path(esdf_path).read_bytes())
    g = parse_scene(mesh, esdf, ParseConfig.from_dict(cfg.get("parse")))
    _write(out, save_json(g))
    click.echo(dumps(g.stats()).decode("utf-8"), nl=False)


# --------------------------------------------------------------------------- track

@main.command("track")
@click.option("--detections", "det_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Tracks JSON.")
def track_cmd(det_path, config_path, out):
    """Associate human detections into tracks, optimize and prune them."""
    cfg = TrackerConfig.from_dict(load_config(config_path).get("tracker"))
    dets = synth.load_detections(Path(det_path).read_bytes())
    tracker = HumanTracker(**cfg.to_dict()).fit(dets)
    _write(out, dumps(tracks_document(tracker.tracks_)))
    click.echo(f"{len(tracker.tracks_)} tracks from {len(dets)} detections", err=True)


# --------------------------------------------------------------------------- plan / bench

@main.command("plan")
@click.option("--dsg", "dsg_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--esdf", "esdf_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--query", required=True, help='e.g. "near class=chair room=r2"')
@click.option("--start", required=True, help="Start point 'x,y,z'.")
@click.option("--compare-esdf", is_flag=True, help="Also run volumetric A* (needs --esdf).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Result JSON (stdout if omitted).")
@click.option("--no-timings", is_flag=True, help="Omit wall-clock timings (reproducible output).")
def plan_cmd(dsg_path, esdf_path, query, start, compare_esdf, config_path, out, no_timings):
    """Answer a semantic navigation query hierarchically."""
    opts = _planner_options(load_config(config_path))
    g = load_json(Path(dsg_path).read_bytes())
    esdf = load_esdf(Path(esdf_path).read_bytes()) if esdf_path else None
    if compare_esdf and esdf is None:
        raise click.UsageError("--compare-esdf needs --esdf")
    q = parse_query(query, _point(start))
    try:
        goal = resolve_query(g, q)
    except NoSuchTarget as exc:
        raise click.ClickException(f"no target: {exc}")
    hp = HierarchicalPlanner(g, esdf, opts["clearance"])
    res = hp.plan(q.start, goal)
    doc = {"query": format_query(q), "goal_place": goal, "hierarchical": _path_doc(res), "visited": res.visited}
    if not no_timings:
        doc["timings"] = res.timings
    if compare_esdf:
        try:
            e = EsdfPlanner(esdf, opts["clearance"], opts["connectivity"]).plan(q.start, hp.p_pos[goal])
        except (Unreachable, ValueError) as exc:
            raise click.ClickException(f"volumetric planner failed: {exc}")
        doc["esdf"] = _path_doc(e) if no_timings else {**_path_doc(e), "timings": e.timings}
        doc["length_ratio"] = res.cost / e.cost if e.cost > 0 else 1.0
    _emit(doc, out)


@main.command("bench")
@click.option("--replicate", "replicates", type=int, multiple=True, default=(1,), show_default=True,
              help="Number of office buildings; repeat for several scales.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--queries", "n_queries", type=int, default=3, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="CSV report.")
@click.option("--no-timings", is_flag=True, help="Blank wall-clock columns (reproducible output).")
def bench_cmd(replicates, seed, n_queries, config_path, out, no_timings):
    """Hierarchical vs volumetric planning on tiled offices; one CSV row per query."""
    cfg = load_config(config_path)
    opts = _planner_options(cfg)
    pcfg = ParseConfig.from_dict(cfg.get("parse"))
    rows = []
    for n in replicates:
        g, fp = tiled_office(seed, n, pcfg)
        rows += bench(g, fp.esdf, far_queries(g, n_queries), n, opts["clearance"], opts["connectivity"])
    _write(out, bench_csv(rows, timings=not no_timings))
    for r in rows:
        click.echo(f"buildings={r['buildings']} {r['query']}: ratio {r['length_ratio']:.3f}"
                   f" speedup {r['speedup']:.0f}x", err=True)


# --------------------------------------------------------------------------- dsg

@main.group("dsg")
def dsg_group():
    """Inspect and edit scene-graph JSON files."""


@dsg_group.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def dsg_validate(path):
    """Check structural invariants; exit status 1 on violations."""
    problems = validate(load_json(Path(path).read_bytes()))
    for p in problems:
        click.echo(p)
    if problems:
        sys.exit(1)
    click.echo("ok")


@dsg_group.command("stats")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def dsg_stats(path):
    """Node and edge counts per layer."""
    click.echo(dumps(load_json(Path(path).read_bytes()).stats()).decode("utf-8"), nl=False)


@dsg_group.command("prune")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--node", "node_ids", multiple=True, required=True, help="Node id to remove with its subtree.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output file (defaults to overwriting PATH).")
def dsg_prune(path, node_ids, out):
    """Remove nodes (and what only they support) from a scene graph."""
    g = load_json(Path(path).read_bytes())
    for nid in node_ids:
        if nid not in g:
            raise click.ClickException(f"no node {nid!r}")
        g = prune(g, nid)
    _write(out or path, save_json(g))


# --------------------------------------------------------------------------- pipeline

def pipeline_report(seed: int, cfg: dict | None = None) -> dict:
    """Deterministic end-to-end report: loop closure, scene parsing, planning and human tracking."""
    cfg = cfg or {}
    d = synth.drift_loop(seed, synth.DriftLoopParams(**DRIFT_PRESET, outlier_rate=0.5, n_loops=24))
    traj, mesh, summary = close_loops(d.noisy, d.loops, d.noisy_mesh, _pgmo_config(cfg), _pcm_config(cfg))
    kept = np.array(summary.pop("loop_inliers"))
    drift = {
        **d.meta, **summary,
        "true_inliers_kept": int((kept & ~d.is_outlier).sum()),
        "outliers_kept": int((kept & d.is_outlier).sum()),
        "ate_before": ate_rmse(d.noisy, d.truth), "ate_after": ate_rmse(traj, d.truth),
        "mesh_rmse_before": mesh_rmse(d.noisy_mesh, d.truth_mesh), "mesh_rmse_after": mesh_rmse(mesh, d.truth_mesh),
    }

    pcfg = ParseConfig.from_dict(cfg.get("parse"))
    g, fp = tiled_office(seed, 1, pcfg)
    precision, recall = room_scores(g, fp.room_mask, fp.esdf)
    parse = {**g.stats(), "room_precision": precision, "room_recall": recall, "problems": validate(g)}

    opts = _planner_options(cfg)
    hp = HierarchicalPlanner(g, fp.esdf, opts["clearance"])
    grid = EsdfPlanner(fp.esdf, opts["clearance"], opts["connectivity"])
    plans = []
    for q in far_queries(g, 2):
        goal = resolve_query(g, q)
        h = hp.plan(q.start, goal)
        e = grid.plan(q.start, hp.p_pos[goal])
        plans.append({"query": format_query(q), "goal_place": goal, "length_hierarchical": h.cost,
                      "length_esdf": e.cost, "length_ratio": h.cost / e.cost, "fallback": bool(h.fallback),
                      "visited": h.visited})

    hs = synth.human_stream(seed)
    tcfg = TrackerConfig.from_dict(cfg.get("tracker"))
    tracker = HumanTracker(**tcfg.to_dict()).fit(hs.detections)
    humans = {"detections": len(hs.detections), "tracks": len(tracker.tracks_),
              "track_lengths": [len(t) for t in tracker.tracks_],
              "stage_errors": stage_errors(hs.detections, hs.truth_positions, tcfg)}
    return {"seed": seed, "loop_closure": drift, "scene": parse, "planning": plans, "humans": humans}


@main.command("pipeline")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Report JSON.")
def pipeline_cmd(seed, config_path, out):
    """synth -> optimize -> parse -> plan -> track, summarized in one JSON report (no timings)."""
    _write(out, dumps(pipeline_report(seed, load_config(config_path))))


if __name__ == "__main__":  # pragma: no cover
    main()
