"""End-to-end acceptance checks; each criterion prints one PASS/FAIL line."""
import time

import numpy as np
import scipy.sparse as sp
from click.testing import CliRunner
from scipy.optimize import least_squares
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.transform import Rotation

from dsgkit import synth
from dsgkit.cli import DRIFT_PRESET, main
from dsgkit.dsg_core import NodeKind
from dsgkit.geom import EdgeWeight, RigidTransform
from dsgkit.human_tracker import (HumanTracker, TrackerConfig, filter_detection, new_track, passes_gates,
                                  stage_errors)
from dsgkit.mesh_io import EsdfGrid, mesh_rmse
from dsgkit.pcm import maximum_clique
from dsgkit.pgmo import (PgmoConfig, Prior, _Problem, build_deformation_graph, chordal_cost, optimize, reskin,
                         reskin_weights)
from dsgkit.pipeline import ParseConfig, close_loops, parse_scene, room_scores, tiled_office
from dsgkit.planner import BENCH_COLUMNS, EsdfPlanner, bench, bench_csv, far_queries, grid_path_cost, resolve_query
from dsgkit.pose_graph import ate_rmse

from pgmo_helpers import fd_jacobian_check, random_state, small_drift, with_loops


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# --------------------------------------------------------------------------- AC1

def _restart_minimizer(dg, restarts, rng):
    """Independent minimizer of the same chordal cost: rotation-vector parameters, vertex 0 held fixed."""
    n, edges = len(dg), dg.edges
    r0 = np.array([Rotation.from_matrix(t.rotation).as_rotvec() for t in dg.transforms])
    t0 = np.array([t.translation for t in dg.transforms])
    fixed_r = Rotation.from_rotvec(r0[0]).as_matrix()
    ei = np.array([e.i for e in edges])
    ej = np.array([e.j for e in edges])
    mr = np.array([e.measurement.rotation for e in edges])
    mt = np.array([e.measurement.translation for e in edges])
    wr = np.sqrt([e.weight.rotation for e in edges])
    wt = np.sqrt([e.weight.translation for e in edges])

    def residuals(x):
        x = x.reshape(n - 1, 6)
        rot = np.concatenate([fixed_r[None], Rotation.from_rotvec(x[:, :3]).as_matrix()])
        trans = np.vstack([t0[0], x[:, 3:]])
        ri_t = np.transpose(rot[ei], (0, 2, 1))
        a = (ri_t @ rot[ej] - mr).reshape(-1, 9) * wr[:, None]
        b = ((ri_t @ (trans[ej] - trans[ei])[:, :, None])[:, :, 0] - mt) * wt[:, None]
        return np.hstack([a, b]).ravel()

    pattern = sp.lil_matrix((12 * len(edges), 6 * (n - 1)), dtype=int)
    for k, e in enumerate(edges):
        for v in (e.i, e.j):
            if v:
                pattern[12 * k:12 * k + 12, 6 * (v - 1):6 * v] = 1
    best = np.inf
    for r in range(restarts):
        x = np.hstack([r0, t0])[1:].copy()
        if r:
            x[:, :3] += rng.normal(0, 0.3, x[:, :3].shape)
            x[:, 3:] += rng.normal(0, 0.5, x[:, 3:].shape)
        sol = least_squares(residuals, x.ravel(), jac_sparsity=pattern, method="trf", x_scale="jac",
                            ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=200)
        best = min(best, 2.0 * sol.cost)
    return best


def test_ac1_pgmo_matches_restart_minimizer(capsys):
    rng = np.random.default_rng(0)
    cfg = PgmoConfig(simplification_voxel=8.0, visibility_radius=6.0)
    worst_rel, worst_time, max_vertices = 0.0, 0.0, 0
    for seed in range(50):
        d = small_drift(seed, n_loops=4)
        t = time.perf_counter()
        dg = build_deformation_graph(d.noisy_mesh, with_loops(d), cfg)
        out = optimize(dg, cfg)
        worst_time = max(worst_time, time.perf_counter() - t)
        max_vertices = max(max_vertices, len(dg))
        ours = chordal_cost(out)
        oracle = _restart_minimizer(dg, 3, rng)
        worst_rel = max(worst_rel, abs(ours - oracle) / oracle)
    ok = worst_rel <= 1e-6 and worst_time < 5.0 and max_vertices <= 30
    report(capsys, "AC1", ok, f"50 instances, <= {max_vertices} vertices, worst rel. diff {worst_rel:.2e}, "
                              f"worst time {worst_time:.3f} s")


# --------------------------------------------------------------------------- AC2

def test_ac2_loop_closure_efficacy(capsys):
    lines, ok = [], True
    for seed in range(5):
        d = synth.drift_loop(seed, synth.DriftLoopParams(**DRIFT_PRESET))
        traj, mesh, _ = close_loops(d.noisy, d.loops, d.noisy_mesh)
        drift = d.meta["drift_fraction"]
        a0, a1 = ate_rmse(d.noisy, d.truth), ate_rmse(traj, d.truth)
        m0, m1 = mesh_rmse(d.noisy_mesh, d.truth_mesh), mesh_rmse(mesh, d.truth_mesh)
        ok &= drift >= 0.05 and a1 <= 0.5 * a0 and m1 < m0
        lines.append(f"seed {seed}: drift {drift:.3f} ATE {a0:.3f}->{a1:.3f} mesh {m0:.3f}->{m1:.3f}")
    report(capsys, "AC2", ok, "; ".join(lines))


# --------------------------------------------------------------------------- AC3

def test_ac3_outlier_sweep(capsys):
    rates = (0.0, 0.2, 0.5, 0.8)
    trials = 200
    ate = np.zeros((trials, len(rates)))
    inliers_kept = np.zeros((trials, len(rates)), dtype=bool)
    for seed in range(trials):
        for j, rate in enumerate(rates):
            n_loops = int(round(12 / (1.0 - rate)))  # always 12 inliers
            d = synth.drift_loop(seed, synth.DriftLoopParams(**DRIFT_PRESET, outlier_rate=rate, n_loops=n_loops))
            traj, _, summary = close_loops(d.noisy, d.loops, None)
            kept = np.array(summary["loop_inliers"])
            inliers_kept[seed, j] = kept[~d.is_outlier].all()
            ate[seed, j] = ate_rmse(traj, d.truth)
    mean = ate.mean(axis=0)
    spread = (mean.max() - mean.min()) / mean.min()
    worst_ratio = (ate / ate[:, :1]).max()
    retained = inliers_kept.all(axis=1).mean()
    ok = spread < 0.10 and worst_ratio <= 2.0 and retained >= 0.95
    report(capsys, "AC3", ok, f"mean ATE per rate {np.round(mean, 4).tolist()}, spread {spread:.2%}, "
                              f"worst ratio to 0% {worst_ratio:.3f}, all inliers kept in {retained:.1%} of trials")


# --------------------------------------------------------------------------- AC4

def _exhaustive_max_clique(adj):
    """Lexicographically smallest maximum clique by enumerating every vertex subset."""
    n = len(adj)
    masks = np.arange(1 << n, dtype=np.int64)
    ok = np.ones(len(masks), dtype=bool)
    for i in range(n):
        allowed = int(sum(1 << j for j in range(n) if adj[i, j] or i == j))
        has_i = (masks >> i) & 1 == 1
        ok &= ~has_i | ((masks & ~allowed) == 0)
    sizes = np.unpackbits(masks.view(np.uint8).reshape(-1, 8), axis=1).sum(axis=1)
    best = sizes[ok].max()
    cands = masks[ok & (sizes == best)]
    return min(sorted(i for i in range(n) if (int(m) >> i) & 1) for m in cands)


def test_ac4_max_clique_exact(capsys):
    rng = np.random.default_rng(4)
    mats = []
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        upper = np.triu(rng.uniform(size=(n, n)) < rng.uniform(0.2, 0.9), 1)
        mats.append(upper | upper.T)
    t = time.perf_counter()
    got = [maximum_clique(a) for a in mats]
    elapsed = time.perf_counter() - t
    mismatches = sum(g != _exhaustive_max_clique(a) for g, a in zip(got, mats))
    ok = mismatches == 0 and elapsed < 1.0
    report(capsys, "AC4", ok, f"1000 matrices (n <= 20), {mismatches} mismatches, solver time {elapsed:.3f} s")


# --------------------------------------------------------------------------- AC5

def test_ac5_room_segmentation(capsys):
    scores = []
    for seed, door, rooms in [(0, 0.4, 4), (1, 0.3, 4), (2, 0.2, 4), (3, 0.4, 6), (4, 0.4, 2)]:
        fp = synth.floorplan(seed, synth.FloorplanParams(rooms=rooms, door_width=door))
        g = parse_scene(fp.mesh, fp.esdf, ParseConfig(ceiling_height=fp.world.height))
        scores.append(room_scores(g, fp.room_mask, fp.esdf))
    wide = synth.floorplan(0, synth.FloorplanParams(rooms=2, door_width=3.0))
    gw = parse_scene(wide.mesh, wide.esdf, ParseConfig(ceiling_height=wide.world.height))
    n_wide = len(gw.of_kind(NodeKind.ROOM))
    worst = np.min(scores)
    ok = worst >= 0.95 and n_wide == 1
    report(capsys, "AC5", ok, f"min precision/recall {worst:.3f} over {len(scores)} fixtures; "
                              f"3 m opening -> {n_wide} room(s)")


# --------------------------------------------------------------------------- AC6

def test_ac6_planner_comparison(capsys):
    rows = []
    free4 = 0
    for n in (1, 2, 4):
        g, fp = tiled_office(0, n)
        if n == 4:
            free4 = int((fp.esdf.distances >= 0.1).sum())
        rows += bench(g, fp.esdf, far_queries(g, 3), n)
    text = bench_csv(rows)
    header = text.splitlines()[0].split(",")
    speed = min(r["speedup"] for r in rows)
    ratio = max(r["length_ratio"] for r in rows)
    ok = free4 >= 10 ** 6 and speed >= 100 and ratio <= 1.15 and header == BENCH_COLUMNS
    report(capsys, "AC6", ok, f"{len(rows)} queries, {free4} free voxels at replicate 4, "
                              f"min speedup {speed:.0f}x, max length ratio {ratio:.4f}")


# --------------------------------------------------------------------------- AC7

def _voxel_graph(free, voxel):
    nx, ny, nz = free.shape
    idx = np.arange(free.size).reshape(free.shape)
    rows, cols, w = [], [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                k = abs(dx) + abs(dy) + abs(dz)
                if k == 0:
                    continue
                sl_a = (slice(max(0, -dx), nx - max(0, dx)), slice(max(0, -dy), ny - max(0, dy)),
                        slice(max(0, -dz), nz - max(0, dz)))
                sl_b = (slice(max(0, dx), nx - max(0, -dx)), slice(max(0, dy), ny - max(0, -dy)),
                        slice(max(0, dz), nz - max(0, -dz)))
                both = free[sl_a] & free[sl_b]
                a = idx[sl_a][both]
                rows.append(a)
                cols.append(idx[sl_b][both])
                w.append(np.full(len(a), voxel * np.sqrt(k)))
    return sp.csr_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(free.size,) * 2)


def _check_against_dijkstra(esdf, pairs, clearance=0.1):
    free = esdf.distances >= clearance
    m = _voxel_graph(free, esdf.voxel_size)
    planner = EsdfPlanner(esdf, clearance, 26)
    bad = 0
    for s, t in pairs:
        si = np.ravel_multi_index(tuple(esdf.world_to_index(s)), free.shape)
        ti = np.ravel_multi_index(tuple(esdf.world_to_index(t)), free.shape)
        dist, pred = dijkstra(m, indices=si, return_predecessors=True)
        chain = [ti]
        while chain[-1] != si:
            chain.append(pred[chain[-1]])
        cells = np.array(np.unravel_index(np.array(chain[::-1]), free.shape)).T
        res = planner.plan(s, t)
        bad += res.cost != grid_path_cost(cells, esdf.voxel_size) or abs(res.cost - dist[ti]) > 1e-9
    return bad


def test_ac7_astar_equals_dijkstra(capsys):
    rng = np.random.default_rng(7)
    bad, total = 0, 0
    for _ in range(30):
        free = rng.uniform(size=(9, 8, 5)) > 0.3
        esdf = EsdfGrid([0, 0, 0], 0.2, np.where(free, 1.0, 0.0))
        fm = _voxel_graph(free, 0.2)
        cells = np.argwhere(free)
        s, t = cells[rng.choice(len(cells), 2, replace=False)]
        reach = dijkstra(fm, indices=np.ravel_multi_index(tuple(s), free.shape))
        if not np.isfinite(reach[np.ravel_multi_index(tuple(t), free.shape)]):
            continue
        bad += _check_against_dijkstra(esdf, [(esdf.index_to_world(s), esdf.index_to_world(t))], 0.5)
        total += 1
    g, fp = tiled_office(0, 1)
    pairs = [(q.start, g.nodes[resolve_query(g, q)].position) for q in far_queries(g, 2)]
    bad += _check_against_dijkstra(fp.esdf, pairs)
    total += len(pairs)
    report(capsys, "AC7", bad == 0, f"{total} fixtures (random grids + office), {bad} cost mismatches")


# --------------------------------------------------------------------------- AC8

def _det(stamp, pos, beta0=0.0, bbox=100):
    pos = np.asarray(pos, dtype=float)
    joints = pos + np.arange(3 * synth.N_JOINTS, dtype=float).reshape(-1, 3)
    betas = np.zeros(synth.N_BETAS)
    betas[0] = beta0
    return synth.HumanDetection(float(stamp), RigidTransform(np.eye(3), pos), joints, betas, bbox, False)


def _thresholds_exact():
    cfg = TrackerConfig()
    t = new_track(0, _det(0.0, [0, 0, 1]), cfg)
    checks = [
        filter_detection(_det(0, [0, 0, 1], bbox=31), cfg), not filter_detection(_det(0, [0, 0, 1], bbox=30), cfg),
        passes_gates(t, _det(0.5, [1.5, 0, 1]), cfg), not passes_gates(t, _det(0.5, [1.5000001, 0, 1]), cfg),
        passes_gates(t, _det(0.5, [0, 0, 1], beta0=0.8), cfg),
        not passes_gates(t, _det(0.5, [0, 0, 1], beta0=0.8000001), cfg),
    ]
    moved = _det(1.0, [0, 0, 1])
    moved.joints = t.joints[-1] + np.array([3.0, 0, 0])
    checks.append(passes_gates(t, moved, cfg))
    moved.joints = t.joints[-1] + np.array([3.0001, 0, 0])
    checks.append(not passes_gates(t, moved, cfg))
    return all(checks)


def test_ac8_human_tracker_stages(capsys):
    errors, prune_ok, per_run = [], True, 0
    for seed in range(100):
        s = synth.human_stream(seed)
        e = stage_errors(s.detections, s.truth_positions)
        v = [e["raw"], e["filtered"], e["optimized"], e["beta_gate"]]
        per_run += all(a > b for a, b in zip(v, v[1:]))
        errors.append(v)
        tr = HumanTracker().fit(s.detections)
        kept = {t.id for t in tr.tracks_}
        prune_ok &= all((len(t) >= 10) == (t.id in kept) for t in tr.finished_)
    for n, expect in ((9, 0), (10, 1)):
        p = synth.HumanStreamParams(n_humans=1, duration=n / 2.0, pos_sigma=0.0, outlier_rate=0.0,
                                    small_bbox_rate=0.0, boundary_rate=0.0)
        s = synth.human_stream(0, p)
        assert len(s.detections) == n
        prune_ok &= len(HumanTracker().fit(s.detections).tracks_) == expect
    mean = np.mean(errors, axis=0)
    decreasing = all(a > b for a, b in zip(mean, mean[1:]))
    exact = _thresholds_exact()
    ok = decreasing and prune_ok and exact
    report(capsys, "AC8", ok, f"mean errors raw/filtered/optimized/beta {np.round(mean, 4).tolist()} "
                              f"(strict per run in {per_run}/100), pruning 9/10 ok={prune_ok}, "
                              f"thresholds exact={exact}")


# --------------------------------------------------------------------------- AC9

def test_ac9_numerical_hygiene(capsys):
    rng = np.random.default_rng(9)
    d = small_drift(0)
    dg = build_deformation_graph(d.noisy_mesh, with_loops(d), PgmoConfig(simplification_voxel=4.0))
    problem = _Problem(dg, [Prior(2, RigidTransform.from_rotvec([0.2, 0, 0.1], [1, 0, 2]), EdgeWeight(1.0, 2.0))])
    worst_fd = max(fd_jacobian_check(problem, *random_state(dg, rng), rng) for _ in range(100))
    worst_pu = 0.0
    for _ in range(200):
        rest = rng.uniform(-5, 5, size=(int(rng.integers(1, 20)), 3))
        _, w = reskin_weights(rng.uniform(-6, 6, size=(100, 3)), rest, int(rng.integers(1, 8)))
        worst_pu = max(worst_pu, float(np.abs(w.sum(axis=1) - 1.0).max()))
    worst_id = 0.0
    for seed in range(5):
        dd = small_drift(seed)
        cfg = PgmoConfig(simplification_voxel=2.0)
        dgi = build_deformation_graph(dd.noisy_mesh, dd.noisy, cfg)
        worst_id = max(worst_id, float(np.abs(reskin(dd.noisy_mesh, dgi, cfg).positions
                                              - dd.noisy_mesh.positions).max()))
    ok = worst_fd <= 1e-5 and worst_pu <= 1e-12 and worst_id <= 1e-9
    report(capsys, "AC9", ok, f"Jacobian FD worst {worst_fd:.2e} (100 states), partition of unity {worst_pu:.1e}, "
                              f"identity reskin {worst_id:.1e}")


# --------------------------------------------------------------------------- AC10

def _run_twice(tmp_path, build):
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        files = build(d)
        outs.append([f.read_bytes() for f in files])
    return outs[0] == outs[1]


def test_ac10_cli_determinism(capsys, tmp_path):
    runner = CliRunner()

    def cli(*args):
        res = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert res.exit_code == 0, res.output
        return res

    def drift(d):
        cli("synth", "drift_loop", "--seed", 2, "--out", d, "--outlier-rate", 0.5, "--loops", 16)
        cli("optimize", "--traj", d / "noisy.g2o", "--loops", d / "loops.g2o", "--mesh", d / "noisy_mesh.ply",
            "--truth-traj", d / "truth.g2o", "--truth-mesh", d / "truth_mesh.ply", "--out-traj", d / "opt.g2o",
            "--out-mesh", d / "opt.ply", "--report", d / "report.json")
        return sorted(d.iterdir())

    def scene(d):
        cli("synth", "office", "--seed", 1, "--out", d)
        cli("parse", "--mesh", d / "mesh.ply", "--esdf", d / "scene.esdf", "--out", d / "dsg.json")
        cli("dsg", "prune", d / "dsg.json", "--node", "r1", "--out", d / "pruned.json")
        cli("plan", "--dsg", d / "dsg.json", "--esdf", d / "scene.esdf", "--query", "near class=chair",
            "--start", "1,1,1", "--compare-esdf", "--no-timings", "--out", d / "plan.json")
        cli("bench", "--replicate", 1, "--queries", 2, "--no-timings", "--out", d / "bench.csv")
        return sorted(d.iterdir())

    def humans(d):
        cli("synth", "human_stream", "--seed", 4, "--out", d)
        cli("track", "--detections", d / "detections.txt", "--out", d / "tracks.json")
        return sorted(d.iterdir())

    def pipeline(d):
        cli("pipeline", "--seed", 0, "--out", d / "report.json")
        return [d / "report.json"]

    results = {}
    for name, fn in (("drift", drift), ("scene", scene), ("humans", humans), ("pipeline", pipeline)):
        (tmp_path / name).mkdir()
        results[name] = _run_twice(tmp_path / name, fn)
    ok = all(results.values())
    report(capsys, "AC10", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in results.items()))
