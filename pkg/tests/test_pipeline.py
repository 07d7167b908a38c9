import math

import numpy as np
import pytest

from drslam.errors import FormatError
from drslam.geometry import Pose, compose, exp_se3_vec, inverse
from drslam.pipeline import (
    DrMeasurement,
    Frame,
    KeyFrame,
    MapPoint,
    Pipeline,
    PipelineParams,
    SlamMap,
    associate_features,
    decide_keyframe,
    load_map,
    predict_pose,
    run_pipeline,
    save_map,
)
from drslam.simulator import DEFAULT_CAMERA, Dropout, WorldConfig, simulate_sequence
from drslam.weighting import TrackingStats

PARAMS = PipelineParams()


def make_frame(fid=0, pose=None, n_det=100, n_trk=50, ts=None):
    return Frame(fid, fid / 30.0 if ts is None else ts,
                 pose or Pose.identity(), TrackingStats(n_det, n_trk),
                 quality=0.5, observations=[], dr=None, tracked_ok=True)


def straight_sequence(n_frames=120, seed=0, **kw):
    cfg = WorldConfig(waypoints=[(0, 0), (8, 0)], n_frames=n_frames,
                      density=[(0.0, 70.0)], clutter=300, pixel_noise=0.5,
                      dr_sigma_t=0.002, dr_sigma_r_deg=0.05, depth_max=5.0,
                      seed=seed, **kw)
    return simulate_sequence(cfg)


def test_predict_pose_identity_delta(rng):
    prev = make_frame(pose=exp_se3_vec(rng.normal(scale=0.2, size=6)))
    pred = predict_pose(prev, DrMeasurement(Pose.identity()))
    assert np.allclose(pred.matrix(), prev.pose.matrix(), atol=1e-15)


def test_predict_pose_chain_composition(rng):
    pose = Pose.identity()
    chain = Pose.identity()
    for _ in range(20):
        delta = exp_se3_vec(rng.normal(scale=0.05, size=6))
        pose = predict_pose(make_frame(pose=pose), DrMeasurement(delta))
        chain = compose(chain, delta)
    assert np.allclose(pose.matrix(), chain.matrix(), atol=1e-12)


def simple_map_points(positions):
    return {j: MapPoint(j, np.asarray(p, float), {0}, 0) for j, p in enumerate(positions)}


def test_associate_perfect_prediction_matches_all():
    pose = Pose.identity()
    pts = [(0.5, 0.2, 3.0), (-0.4, 0.1, 2.5), (0.1, -0.3, 4.0)]
    points = simple_map_points(pts)
    detections = []
    for j, p in points.items():
        y = np.asarray(pts[j])
        detections.append((j, DEFAULT_CAMERA.fx * y[0] / y[2] + DEFAULT_CAMERA.cx,
                           DEFAULT_CAMERA.fy * y[1] / y[2] + DEFAULT_CAMERA.cy))
    detections.append((-1, 100.0, 100.0))  # clutter never matches
    obs, n_trk = associate_features(detections, points, pose, 15.0, DEFAULT_CAMERA)
    assert n_trk == 3
    assert sorted(j for j, _, _ in obs) == [0, 1, 2]


def test_associate_offset_beyond_radius_matches_nothing():
    pts = [(0.5, 0.2, 3.0), (-0.4, 0.1, 2.5)]
    points = simple_map_points(pts)
    detections = []
    for j, p in enumerate(pts):
        y = np.asarray(p)
        detections.append((j, DEFAULT_CAMERA.fx * y[0] / y[2] + DEFAULT_CAMERA.cx,
                           DEFAULT_CAMERA.fy * y[1] / y[2] + DEFAULT_CAMERA.cy))
    off = Pose(np.array([1.0, 0, 0, 0]), np.array([0.5, 0.0, 0.0]))  # ~80 px shift
    obs, n_trk = associate_features(detections, points, off, 15.0, DEFAULT_CAMERA)
    assert n_trk == 0 and obs == []


def test_associate_half_radius_offset_matches_exhaustive_oracle(rng):
    # oracle: per map point, explicit projection + distance test of its own id
    radius = 15.0
    for _ in range(20):
        pts = [(rng.uniform(-1.5, 1.5), rng.uniform(-1, 1), rng.uniform(2, 6))
               for _ in range(40)]
        points = simple_map_points(pts)
        detections = []
        for j, p in enumerate(pts):
            y = np.asarray(p)
            detections.append((j, DEFAULT_CAMERA.fx * y[0] / y[2] + DEFAULT_CAMERA.cx,
                               DEFAULT_CAMERA.fy * y[1] / y[2] + DEFAULT_CAMERA.cy))
        shift = rng.normal(size=3)
        shift = shift / np.linalg.norm(shift) * rng.uniform(0.01, 0.08)
        predicted = Pose(np.array([1.0, 0, 0, 0]), shift)
        obs, n_trk = associate_features(detections, points, predicted, radius, DEFAULT_CAMERA)
        expected = set()
        rot = predicted.rotation_matrix
        for j, p in enumerate(pts):
            y = rot.T @ (np.asarray(p) - predicted.t)
            if y[2] <= 0.05:
                continue
            u = DEFAULT_CAMERA.fx * y[0] / y[2] + DEFAULT_CAMERA.cx
            v = DEFAULT_CAMERA.fy * y[1] / y[2] + DEFAULT_CAMERA.cy
            if not (-radius <= u < DEFAULT_CAMERA.width + radius
                    and -radius <= v < DEFAULT_CAMERA.height + radius):
                continue
            du, dv = detections[j][1], detections[j][2]
            if (du - u) ** 2 + (dv - v) ** 2 <= radius ** 2:
                expected.add(j)
        assert {j for j, _, _ in obs} == expected
        assert n_trk == len(expected)


def test_decide_keyframe_rules():
    last = KeyFrame(0, 0, 0.0, Pose.identity(), [], n_trk=60, quality=1.0)
    below = make_frame(fid=5, n_trk=40)
    assert not decide_keyframe(below, last, PARAMS)
    gap = make_frame(fid=PARAMS.k_max, n_trk=40)
    assert decide_keyframe(gap, last, PARAMS)
    overlap = make_frame(fid=5, n_trk=int(60 * 0.4))
    assert decide_keyframe(overlap, last, PARAMS)
    far = make_frame(fid=5, n_trk=40,
                     pose=Pose(np.array([1.0, 0, 0, 0]), np.array([0.6, 0, 0])))
    assert decide_keyframe(far, last, PARAMS)


def test_pipeline_first_and_second_keyframe_covisibility():
    seq = straight_sequence(n_frames=40)
    pipe = Pipeline(PARAMS, seq.camera, seq.world, "adaptive")
    for rec in seq.records:
        pipe.process(rec)
    m = pipe.slam_map
    assert len(m.keyframes) >= 2
    assert m.covisibility.get(0, {}) != {}
    for a, edges in m.covisibility.items():
        for b, c in edges.items():
            assert m.covisibility[b][a] == c  # symmetry
    shared = m.covisibility[0].get(1, 0)
    manual = sum(1 for p in m.points.values() if {0, 1} <= p.observers)
    assert shared == manual and shared > 0


def test_pipeline_one_pose_per_frame_all_modes():
    seq = straight_sequence(n_frames=60, dropouts=[Dropout(20, 30, 0)])
    for mode in ("vision-only", "da-only", "fixed-dr", "adaptive", "dr-only"):
        res = run_pipeline(seq, PARAMS, mode)
        assert len(res.frames) == len(seq.records)
        for f in res.frames:
            assert np.all(np.isfinite(f.pose.t))
            assert np.all(np.isfinite(f.pose.q))


def test_textureless_frames_adaptive_follows_dr_prediction():
    seq = straight_sequence(n_frames=60, dropouts=[Dropout(25, 40, 0)])
    res = run_pipeline(seq, PARAMS, "adaptive")
    frames = {f.id: f for f in res.frames}
    for fid in range(26, 41):
        f, prev = frames[fid], frames[fid - 1]
        assert f.quality == 0.0
        predicted = compose(prev.pose, f.dr.delta)
        assert np.linalg.norm(f.pose.t - predicted.t) < 1e-9
        assert f.tracked_ok  # DR keeps the solve constrained


def test_textureless_gap_vision_only_loses_track():
    seq = straight_sequence(n_frames=60, dropouts=[Dropout(25, 40, 0)])
    res = run_pipeline(seq, PARAMS, "vision-only")
    assert res.track_lost_frame is not None
    assert 25 <= res.track_lost_frame <= 25 + PARAMS.lost_frames
    assert res.tracking_ratio() < 1.0
    assert len(res.frames) == 60  # poses still emitted after loss


def test_adaptive_track_lost_unreachable():
    seq = straight_sequence(n_frames=80, dropouts=[Dropout(10, 70, 0)])
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert res.track_lost_frame is None
    assert res.tracking_ratio() == 1.0


def test_zero_observation_keyframe_gets_dr_edge():
    seq = straight_sequence(n_frames=80, dropouts=[Dropout(20, 60, 0)])
    res = run_pipeline(seq, PARAMS, "adaptive")
    m = res.slam_map
    empty_kfs = [k for k, kf in m.keyframes.items() if not kf.observations and k > 0]
    assert empty_kfs, "blackout should create zero-observation keyframes"
    k = empty_kfs[0]
    assert m.connection_count(k) == 0
    assert (k - 1, k) in m.dr_edges
    # keyframe quality 0 puts the raw weight at the alpha_max branch
    assert m.dr_edges[(k - 1, k)] > 0.5 * PARAMS.bounds.alpha_max


def test_loop_oracle_never_fires_on_straight_line():
    seq = straight_sequence(n_frames=120)
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert res.gba_events == []
    assert res.slam_map.loop_edges == []


def closed_loop_sequence(seed=0, laps=1):
    c = 0.7
    w, h = 3.4, 2.6
    wp = [(c, 0), (w - c, 0), (w, c), (w, h - c), (w - c, h), (c, h), (0, h - c), (0, c)]
    cfg = WorldConfig(waypoints=wp, closed=True, n_frames=440 * laps,
                      density=[(0.0, 70.0)], clutter=300, pixel_noise=0.5,
                      dr_sigma_t=0.002, dr_sigma_r_deg=0.05, seed=seed)
    return simulate_sequence(cfg)


def test_loop_oracle_fires_on_closed_rectangle():
    seq = closed_loop_sequence()
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert len(res.gba_events) >= 1
    ev = res.gba_events[0]
    assert ev.kf_to - ev.kf_from >= PARAMS.loop_gap_min
    a, b, rel, scale = res.slam_map.loop_edges[0]
    gt_a = res.slam_map.keyframes[a].gt_pose
    gt_b = res.slam_map.keyframes[b].gt_pose
    assert np.allclose(rel.matrix(), compose(inverse(gt_a), gt_b).matrix(), atol=1e-12)


def test_map_round_trip_empty(tmp_path):
    m = SlamMap()
    path = tmp_path / "empty.gwmap"
    save_map(m, path)
    back = load_map(path)
    assert back.keyframes == {} and back.points == {}


def assert_maps_equal(a: SlamMap, b: SlamMap):
    assert set(a.keyframes) == set(b.keyframes)
    for k in a.keyframes:
        ka, kb = a.keyframes[k], b.keyframes[k]
        assert ka.frame_id == kb.frame_id
        assert np.allclose(ka.pose.matrix(), kb.pose.matrix(), atol=1e-12)
        assert ka.observations == kb.observations
        assert ka.n_trk == kb.n_trk
        assert (ka.lba_alpha == kb.lba_alpha) or \
            (math.isnan(ka.lba_alpha) and math.isnan(kb.lba_alpha))
        if ka.dr_to_prev is not None:
            assert np.allclose(ka.dr_to_prev.matrix(), kb.dr_to_prev.matrix(), atol=1e-12)
        if ka.gt_pose is not None:
            assert np.allclose(ka.gt_pose.matrix(), kb.gt_pose.matrix(), atol=1e-12)
    assert set(a.points) == set(b.points)
    for j in a.points:
        assert np.allclose(a.points[j].position, b.points[j].position, atol=1e-12)
        assert a.points[j].observers == b.points[j].observers
        assert a.points[j].created_kf == b.points[j].created_kf
    assert a.covisibility == b.covisibility
    assert a.dr_edges == b.dr_edges
    assert len(a.loop_edges) == len(b.loop_edges)


def test_map_round_trip_real_run(tmp_path):
    seq = straight_sequence(n_frames=200)
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert len(res.slam_map.keyframes) >= 10
    path = tmp_path / "run.gwmap"
    save_map(res.slam_map, path)
    assert_maps_equal(res.slam_map, load_map(path))


def test_map_load_truncated_raises(tmp_path):
    seq = straight_sequence(n_frames=50)
    res = run_pipeline(seq, PARAMS, "adaptive")
    path = tmp_path / "run.gwmap"
    save_map(res.slam_map, path)
    text = path.read_text().splitlines()
    (tmp_path / "bad.gwmap").write_text("\n".join(
        line[:20] if i == 2 else line for i, line in enumerate(text)) + "\n")
    with pytest.raises(FormatError):
        load_map(tmp_path / "bad.gwmap")
    (tmp_path / "nomagic.gwmap").write_text("not a map\n")
    with pytest.raises(FormatError):
        load_map(tmp_path / "nomagic.gwmap")


def test_repeat_determinism_identical_outputs():
    seq = straight_sequence(n_frames=100, seed=17)
    res1 = run_pipeline(seq, PARAMS, "adaptive")
    res2 = run_pipeline(seq, PARAMS, "adaptive")
    for a, b in zip(res1.frames, res2.frames):
        assert np.array_equal(a.pose.t, b.pose.t)
        assert np.array_equal(a.pose.q, b.pose.q)


def test_gap_drift_bounded_by_dr_random_walk():
    g = 16
    sigma_t = 0.004
    cfg = WorldConfig(waypoints=[(0, 0), (8, 0)], n_frames=90,
                      density=[(0.0, 70.0)], clutter=300, pixel_noise=0.5,
                      dr_sigma_t=sigma_t, dr_sigma_r_deg=0.05, depth_max=5.0,
                      dropouts=[Dropout(40, 40 + g - 1, 0)], seed=2)
    seq = simulate_sequence(cfg)
    res = run_pipeline(seq, PARAMS, "adaptive")
    fa = res.frames[39]
    fb = res.frames[39 + g]
    est_rel = np.linalg.inv(fa.pose.matrix()) @ fb.pose.matrix()
    gt_rel = np.linalg.inv(fa.gt_pose.matrix()) @ fb.gt_pose.matrix()
    drift = np.linalg.norm(est_rel[:3, 3] - gt_rel[:3, 3])
    assert drift <= 3.0 * math.sqrt(g) * sigma_t


def test_dr_only_emits_cadence_keyframes():
    seq = straight_sequence(n_frames=60)
    res = run_pipeline(seq, PARAMS, "dr-only")
    assert len(res.slam_map.keyframes) == 1 + (59 // PARAMS.k_max)
    assert res.slam_map.points == {}


def test_lba_edge_weights_respect_bounds():
    seq = straight_sequence(n_frames=120, dropouts=[Dropout(40, 70, 0)])
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert res.slam_map.dr_edges
    for alpha in res.slam_map.dr_edges.values():
        assert PARAMS.bounds.alpha_min - 1e-12 <= alpha <= PARAMS.bounds.alpha_max + 1e-12


def test_lba_rejects_nonpositive_fixed_weight():
    import dataclasses
    seq = straight_sequence(n_frames=40)
    params = dataclasses.replace(PARAMS, fixed_alpha=0.0)
    with pytest.raises(ValueError):
        run_pipeline(seq, params, "fixed-dr")


def test_pipeline_on_replay_sequence(tmp_path):
    # recorded statistics + odometry only: tracking degenerates to DR
    # prediction driven by the recorded counts
    from drslam.fileio import write_csv, write_tum
    from drslam.simulator import ingest_replay

    rows = []
    pose = Pose.identity()
    delta = exp_se3_vec(np.array([0.02, 0, 0.005, 0, 0.002, 0]))
    for i in range(40):
        rows.append((i / 30.0, pose))
        pose = compose(pose, delta)
    write_tum(tmp_path / "odom.tum", rows)
    write_csv(tmp_path / "stats.csv", ["timestamp", "n_det", "n_trk"],
              [(ts, 400, 90) for ts, _ in rows])
    seq = ingest_replay(tmp_path / "stats.csv", tmp_path / "odom.tum")
    res = run_pipeline(seq, PARAMS, "adaptive")
    assert len(res.frames) == 40
    for f, (_, odo) in zip(res.frames, rows):
        assert np.linalg.norm(f.pose.t - odo.t) < 1e-9
    # quality comes from the recorded statistics
    q = res.frames[5].quality
    assert q == pytest.approx(0.5 * (400 / 600) + 0.5 * (90 / 120))
