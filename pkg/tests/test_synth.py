import numpy as np
import pytest
from scipy import ndimage

from dsgkit.geom import so3_log
from dsgkit.pose_graph import save_g2o
from dsgkit.synth import (DriftLoopParams, FloorplanParams, HumanStreamParams, drift_loop, floorplan,
                          human_stream, office, save_detections)

# --------------------------------------------------------------------------- drift loop

QUIET = dict(odom_sigma_trans=0.0, odom_sigma_rot=0.0, loop_sigma_trans=0.0, loop_sigma_rot=0.0)


def test_zero_noise_noisy_equals_truth():
    d = drift_loop(0, DriftLoopParams(**QUIET))
    for a, b in zip(d.truth.nodes, d.noisy.nodes):
        np.testing.assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-9)
    np.testing.assert_allclose(d.truth_mesh.positions, d.noisy_mesh.positions, atol=1e-9)
    assert d.meta["drift_fraction"] < 1e-9
    for e in d.loops:
        rel = d.truth.nodes[e.from_id].pose.inverse() @ d.truth.nodes[e.to_id].pose
        np.testing.assert_allclose(e.measurement.matrix(), rel.matrix(), atol=1e-9)


def test_drift_loop_deterministic_per_seed():
    a, b, c = drift_loop(4), drift_loop(4), drift_loop(5)
    assert save_g2o(a.noisy) == save_g2o(b.noisy)
    np.testing.assert_array_equal(a.noisy_mesh.positions, b.noisy_mesh.positions)
    assert save_g2o(a.noisy) != save_g2o(c.noisy)


def test_outlier_count_and_magnitude():
    p = DriftLoopParams(outlier_rate=0.5, n_loops=20)
    d = drift_loop(1, p)
    assert len(d.loops) == 20
    assert int(d.is_outlier.sum()) == 10
    for e, bad in zip(d.loops, d.is_outlier):
        rel = d.truth.nodes[e.from_id].pose.inverse() @ d.truth.nodes[e.to_id].pose
        t_err = np.linalg.norm(e.measurement.translation - rel.translation)
        r_err = np.linalg.norm(so3_log(rel.rotation.T @ e.measurement.rotation))
        if bad:
            assert t_err >= 20 * p.loop_sigma_trans and r_err >= 20 * p.loop_sigma_rot
        else:
            assert t_err < 6 * p.loop_sigma_trans * np.sqrt(3)


def test_yaw_bias_increases_drift():
    base = drift_loop(0).meta["drift_fraction"]
    biased = drift_loop(0, DriftLoopParams(yaw_bias=0.012)).meta["drift_fraction"]
    assert biased > base
    assert biased >= 0.05


def test_drift_loop_rejects_impossible_requests():
    with pytest.raises(ValueError):
        drift_loop(0, DriftLoopParams(n_poses=1))
    with pytest.raises(ValueError):
        drift_loop(0, DriftLoopParams(n_poses=10, poses_per_lap=9, n_loops=50))


# --------------------------------------------------------------------------- floorplans

def _free_boundary_segments(world):
    """Pieces of free-rectangle edges that border solid space, found by splitting every edge at all breakpoints."""
    rects = world.free_rects
    xs = sorted({v for r in rects for v in (r.lo[0], r.hi[0])})
    ys = sorted({v for r in rects for v in (r.lo[1], r.hi[1])})

    def free(x, y):
        return any(r.lo[0] <= x <= r.hi[0] and r.lo[1] <= y <= r.hi[1] for r in rects)

    segs = []
    eps = 1e-7
    for r in rects:
        for y in (r.lo[1], r.hi[1]):
            cuts = [r.lo[0]] + [x for x in xs if r.lo[0] < x < r.hi[0]] + [r.hi[0]]
            for a, b in zip(cuts[:-1], cuts[1:]):
                m = 0.5 * (a + b)
                if not (free(m, y - eps) and free(m, y + eps)):
                    segs.append(((a, y), (b, y)))
        for x in (r.lo[0], r.hi[0]):
            cuts = [r.lo[1]] + [y for y in ys if r.lo[1] < y < r.hi[1]] + [r.hi[1]]
            for a, b in zip(cuts[:-1], cuts[1:]):
                m = 0.5 * (a + b)
                if not (free(x - eps, m) and free(x + eps, m)):
                    segs.append(((x, a), (x, b)))
    return np.array(segs, dtype=float)


def _segment_distance(p, segs):
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return float(np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1)))


def test_esdf_matches_bruteforce_distance(rng):
    fp = floorplan(3, FloorplanParams(rooms=4, door_width=0.8))
    esdf, world = fp.esdf, fp.world
    segs = _free_boundary_segments(world)
    free_idx = np.argwhere(esdf.distances > 0)
    picks = free_idx[rng.choice(len(free_idx), 1000, replace=False)]
    h = world.height
    for idx in picks:
        x, y, z = esdf.index_to_world(idx)
        expected = min(z, h - z, _segment_distance(np.array([x, y]), segs))
        assert abs(float(esdf.distances[tuple(idx)]) - expected) < 1e-6


def test_single_room_max_distance_is_half_min_dimension():
    p = FloorplanParams(rooms=1, room_size=(4.0, 6.0), height=5.0, objects_per_room=0)
    fp = floorplan(0, p)
    assert float(fp.esdf.distances.max()) == pytest.approx(2.0, abs=0.5 * p.voxel_size + 1e-6)


def test_esdf_is_one_lipschitz():
    fp = floorplan(0)
    d = fp.esdf.distances.astype(float)
    v = fp.esdf.voxel_size
    for axis in range(3):
        assert np.abs(np.diff(d, axis=axis)).max() <= v + 1e-6


def test_office_mask_has_four_connected_rooms():
    fp = office(0)
    mask = fp.room_mask
    ids = sorted(set(np.unique(mask).tolist()) - {-1})
    assert ids == [0, 1, 2, 3]
    for k in ids:
        _, n = ndimage.label(mask == k)
        assert n == 1
    assert (fp.esdf.distances[mask >= 0] > 0).all()


def test_office_replicate_scales():
    one, two = office(0, 1), office(0, 2)
    assert len(two.world.rooms) == 2 * len(one.world.rooms)
    assert set(two.world.room_building) == {0, 1}
    assert two.meta["free_voxels"] > 1.9 * one.meta["free_voxels"]


def test_floorplan_deterministic():
    a, b = floorplan(7), floorplan(7)
    np.testing.assert_array_equal(a.esdf.distances, b.esdf.distances)
    np.testing.assert_array_equal(a.mesh.positions, b.mesh.positions)
    np.testing.assert_array_equal(a.mesh.labels, b.mesh.labels)


# --------------------------------------------------------------------------- human streams

CLEAN = dict(pos_sigma=0.0, joint_sigma=0.0, beta_sigma=0.0, outlier_rate=0.0, small_bbox_rate=0.0, boundary_rate=0.0)


def test_noise_free_stream_equals_truth():
    s = human_stream(0, HumanStreamParams(**CLEAN))
    pos = np.array([d.position for d in s.detections])
    np.testing.assert_allclose(pos, s.truth_positions, atol=1e-12)
    assert not s.is_outlier.any()
    stamps = [d.stamp for d in s.detections]
    assert stamps == sorted(stamps)


def test_separated_walkers_never_overlap():
    s = human_stream(0, HumanStreamParams(crossing=False, separation=10.0, **CLEAN))
    (_, a), (_, b) = s.truth_tracks[0], s.truth_tracks[1]
    gaps = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    assert gaps.min() >= 10.0 - 1e-9


def test_stream_regeneration_identical():
    assert save_detections(human_stream(5).detections) == save_detections(human_stream(5).detections)
    assert save_detections(human_stream(5).detections) != save_detections(human_stream(6).detections)


def test_stream_labels_outliers_and_small_boxes():
    s = human_stream(2, HumanStreamParams(duration=60.0))
    rate = s.is_outlier.mean()
    assert 0.1 < rate < 0.3
    small = np.array([d.bbox_pixels <= 30 for d in s.detections])
    assert 0.03 < small.mean() < 0.2
