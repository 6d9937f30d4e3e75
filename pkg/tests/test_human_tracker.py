import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from dsgkit.geom import RigidTransform
from dsgkit.human_tracker import (NEW_TRACK, HumanTracker, TrackerConfig, append, associate,
                                  filter_detection, new_track, optimize_track, passes_gates, prior_consistency,
                                  prune_tracks, stage_errors, tracks_document)
from dsgkit.synth import (N_BETAS, N_JOINTS, HumanDetection, HumanStreamParams, human_stream, load_detections,
                          save_detections)

CFG = TrackerConfig()


def det(stamp, pos, betas=None, bbox=100, boundary=False):
    pos = np.asarray(pos, dtype=float)
    joints = pos + np.linspace(-0.5, 0.5, 3 * N_JOINTS).reshape(N_JOINTS, 3)
    b = np.zeros(N_BETAS) if betas is None else betas
    return HumanDetection(float(stamp), RigidTransform(np.eye(3), pos), joints, b, bbox, boundary)


def track_at(tid, pos, n=1, dt=0.5):
    t = new_track(tid, det(0.0, pos), CFG)
    for k in range(1, n):
        append(t, det(k * dt, pos), CFG)
    return t


# --------------------------------------------------------------------------- screening

def test_bbox_threshold_is_exclusive():
    assert filter_detection(det(0, [0, 0, 1], bbox=31), CFG)
    assert not filter_detection(det(0, [0, 0, 1], bbox=30), CFG)


def test_boundary_detection_rejected():
    assert not filter_detection(det(0, [0, 0, 1], bbox=200, boundary=True), CFG)


# --------------------------------------------------------------------------- association

def test_slow_motion_joins_track():
    t = track_at(0, [0, 0, 1])
    assert associate([t], det(1.0, [0.5, 0, 1]), CFG) == 0


def test_fast_motion_starts_new_track():
    t = track_at(0, [0, 0, 1])
    assert associate([t], det(1.0, [5.0, 0, 1]), CFG) is NEW_TRACK


def test_nearest_gated_track_wins():
    a = track_at(0, [0.0, 0, 1])
    b = track_at(1, [1.0, 0, 1])
    d = det(1.0, [0.4, 0, 1])
    assert associate([a, b], d, CFG) == 0
    assert associate([b, a], d, CFG) == 0
    assert associate([a, b], det(1.0, [0.6, 0, 1]), CFG) == 1


def test_shape_gate_rejects_different_body():
    t = track_at(0, [0, 0, 1])
    other = det(1.0, [0.1, 0, 1], betas=np.full(N_BETAS, 0.5))
    assert associate([t], other, CFG) is NEW_TRACK
    assert associate([t], other, TrackerConfig(use_beta_gate=False)) == 0


def test_inactive_track_does_not_accept():
    t = track_at(0, [0, 0, 1])
    assert associate([t], det(2.5, [0, 0, 1]), CFG) is NEW_TRACK


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 3)), min_size=1, max_size=6),
       st.tuples(st.floats(-5, 5), st.floats(-5, 5)), st.floats(0.05, 3.0), st.randoms(use_true_random=False))
def test_association_is_permutation_invariant_and_gated(specs, q, stamp, rnd):
    tracks = []
    for k, (x, y, s) in enumerate(specs):
        t = new_track(k, det(0.0, [x, y, 1.0]), CFG)
        tracks.append(t)
    d = det(stamp, [q[0], q[1], 1.0])
    tid = associate(tracks, d, CFG)
    shuffled = list(tracks)
    rnd.shuffle(shuffled)
    assert associate(shuffled, d, CFG) == tid
    if tid is not NEW_TRACK:
        chosen = tracks[tid]
        assert passes_gates(chosen, d, CFG)
        dist = np.linalg.norm(d.position - chosen.poses[-1].translation)
        for t in tracks:
            if passes_gates(t, d, CFG):
                assert dist <= np.linalg.norm(d.position - t.poses[-1].translation)
    else:
        assert not any(passes_gates(t, d, CFG) for t in tracks)


# --------------------------------------------------------------------------- track structure

def test_append_grows_chain_with_identity_edges():
    t = track_at(0, [0, 0, 1], n=5)
    assert len(t) == 5
    g = t.pose_graph(CFG)
    assert len(g.edges) == 4
    for e in g.edges:
        np.testing.assert_array_equal(e.measurement.matrix(), np.eye(4))
        assert e.to_id == e.from_id + 1
    assert all(b > a for a, b in zip(t.stamps, t.stamps[1:]))


def test_append_rejects_non_increasing_stamp():
    t = track_at(0, [0, 0, 1], n=2)
    with pytest.raises(ValueError):
        append(t, det(0.5, [0, 0, 1]), CFG)


def test_stationary_human_is_unchanged():
    t = optimize_track(track_at(0, [1.0, 2.0, 1.0], n=12), CFG)
    assert t.prior_inliers.all()
    np.testing.assert_allclose(t.positions, np.tile([1.0, 2.0, 1.0], (12, 1)), atol=1e-9)


def test_teleport_outlier_rejected_and_error_improves():
    t = track_at(0, [0, 0, 1], n=12)
    t.poses[6] = RigidTransform(np.eye(3), np.array([2.0, 0, 1]))
    ok = prior_consistency(t, CFG)
    assert not ok[5, 6] and not ok[6, 7]
    optimize_track(t, CFG)
    expected = np.ones(12, dtype=bool)
    expected[6] = False
    np.testing.assert_array_equal(t.prior_inliers, expected)
    truth = np.tile([0, 0, 1.0], (12, 1))
    raw = np.sqrt(np.mean(np.sum((t.detection_positions - truth) ** 2, axis=1)))
    opt = np.sqrt(np.mean(np.sum((t.positions - truth) ** 2, axis=1)))
    assert opt < 0.1 * raw


def test_mutually_inconsistent_priors_keep_one():
    t = new_track(0, det(0.0, [0, 0, 1]), CFG)
    append(t, det(0.1, [10, 0, 1]), CFG)
    append(t, det(0.2, [20, 0, 1]), CFG)
    optimize_track(t, CFG)
    assert t.prior_inliers.sum() == 1
    assert np.all(np.isfinite(t.positions))


def test_prune_threshold():
    tracks = [track_at(0, [0, 0, 1], n=9), track_at(1, [5, 0, 1], n=10)]
    kept = prune_tracks(tracks, CFG)
    assert [t.id for t in kept] == [1]
    assert prune_tracks([], CFG) == []


# --------------------------------------------------------------------------- estimator and I/O

def test_tracker_on_separated_walkers():
    s = human_stream(3, HumanStreamParams(crossing=False, separation=10.0, outlier_rate=0.0, small_bbox_rate=0.0,
                                          boundary_rate=0.0))
    tr = HumanTracker().fit(s.detections)
    assert len(tr.tracks_) == 2
    for t in tr.tracks_:
        assert len(set(s.truth_ids[t.detections].tolist())) == 1


def test_tracker_estimator_api():
    tr = HumanTracker(min_track_len=5)
    assert tr.get_params()["min_track_len"] == 5
    assert clone(tr).get_params() == tr.get_params()
    s = human_stream(0)
    tr.fit(s.detections)
    assert tr.rejected_ > 0
    doc = tracks_document(tr.tracks_)
    assert doc["schema"] == "dsgkit.human_tracks"
    assert len(doc["tracks"]) == len(tr.tracks_)


def test_partial_fit_matches_fit():
    s = human_stream(1)
    a = HumanTracker().fit(s.detections)
    b = HumanTracker()
    b.partial_fit(s.detections[:20]).partial_fit(s.detections[20:])
    b.finalize()
    assert tracks_document(a.tracks_) == tracks_document(b.tracks_)


def test_stage_errors_decrease():
    s = human_stream(0)
    e = stage_errors(s.detections, s.truth_positions)
    assert e["raw"] > e["filtered"] > e["optimized"] > e["beta_gate"]


@pytest.mark.parametrize("bad", [{"min_bbox": 0}, {"min_track_len": 0}, {"pcm_confidence": 1.5}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrackerConfig(**bad)
    with pytest.raises(KeyError):
        TrackerConfig.from_dict({"speed": 1})


def test_detection_file_round_trip():
    dets = human_stream(2).detections
    data = save_detections(dets)
    back = load_detections(data)
    assert len(back) == len(dets)
    for a, b in zip(dets, back):
        assert a.stamp == b.stamp and a.bbox_pixels == b.bbox_pixels and a.boundary == b.boundary
        np.testing.assert_array_equal(a.joints, b.joints)
        np.testing.assert_array_equal(a.betas, b.betas)
        np.testing.assert_allclose(a.pelvis_pose.matrix(), b.pelvis_pose.matrix(), atol=1e-12)


@pytest.mark.parametrize("line", ["0 0 0 0 0 0 0 1 1 0 0 0", "x", "0 0 0 0 0 0 0 1 0 " + "0 " * 8 + "100 2"])
def test_detection_file_rejects_malformed(line):
    with pytest.raises(ValueError):
        load_detections(line)
