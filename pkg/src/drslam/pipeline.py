"""Hierarchical SLAM pipeline with adaptive dead-reckoning support.

Per-frame tracking (predict, associate, motion-only BA), keyframe management
with a covisibility graph, local bundle adjustment with smoothed DR edge
weights, oracle loop detection over simulated geometry, global bundle
adjustment with preserved edge weights, and map persistence.

Modes:
  vision-only  constant-velocity prediction, no DR anywhere, can lose track
  da-only      DR prediction for association only, no DR factors
  fixed-dr     DR factors everywhere at a constant weight (``fixed_alpha``)
  adaptive     DR factors weighted by the live quality score
  dr-only      integrated odometry, no visual processing
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, FormatError, NoConstraints, SingularSystem
from .factors import DrFactor, make_reprojection_factor
from .fileio import fmt
from .geometry import CameraIntrinsics, Pose, compose, inverse
from .optimizer import Problem, SolverConfig, solve_global_ba, solve_local_ba, solve_motion_only
from .weighting import (
    NominalDrInformation,
    QualityParams,
    TrackingStats,
    WeightBounds,
    compute_quality,
    dr_weight,
    keyframe_quality,
    smooth_window_weights,
    update_c_ref,
)

MODES = ("vision-only", "da-only", "fixed-dr", "adaptive", "dr-only")

MAP_MAGIC = "GWMAP v1"


@dataclass(frozen=True)
class DrMeasurement:
    """Relative SE(3) increment between consecutive frames, camera frame."""

    delta: Pose


@dataclass
class Frame:
    id: int
    timestamp: float
    pose: Pose
    stats: TrackingStats
    quality: float
    observations: list
    dr: DrMeasurement | None
    tracked_ok: bool
    alpha: float = float("nan")
    solver_iterations: int = 0
    gt_pose: Pose | None = None


@dataclass
class KeyFrame:
    id: int
    frame_id: int
    timestamp: float
    pose: Pose
    observations: list               # (point_id, u, v)
    n_trk: int
    quality: float
    lba_alpha: float = float("nan")
    dr_to_prev: Pose | None = None   # composed frame deltas since previous keyframe
    gt_pose: Pose | None = None


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observers: set
    created_kf: int


@dataclass
class SlamMap:
    keyframes: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    covisibility: dict = field(default_factory=dict)   # kf -> {kf: count}
    dr_edges: dict = field(default_factory=dict)       # (a, b) -> alpha
    loop_edges: list = field(default_factory=list)     # (a, b, relative Pose, info scale)

    def connection_count(self, kf_id: int) -> int:
        edges = self.covisibility.get(kf_id, {})
        return max(edges.values(), default=0)

    def add_covisibility(self, a: int, b: int, count: int) -> None:
        if count <= 0 or a == b:
            return
        self.covisibility.setdefault(a, {})[b] = count
        self.covisibility.setdefault(b, {})[a] = count


@dataclass
class PipelineParams:
    quality: QualityParams = field(default_factory=QualityParams)
    bounds: WeightBounds = field(default_factory=WeightBounds)
    nominal: NominalDrInformation = field(default_factory=NominalDrInformation)
    pixel_std: float = 1.0
    huber_scale: float = 2.447
    search_radius: float = 15.0
    min_inliers: int = 10
    lost_frames: int = 5
    fixed_alpha: float = 1.0
    k_max: int = 15
    overlap_ratio: float = 0.5
    d_max: float = 0.5
    kf_min_trk: int = 15
    kf_min_det: int = 50
    q_well: float = 0.8
    c_ref_init: float = 20.0
    c_ref_window: int = 10
    smoothing_halfwidth: int = 2
    max_local_keyframes: int = 10
    max_anchor_keyframes: int = 15
    loop_enabled: bool = True
    loop_radius: float = 0.5
    loop_gap_min: int = 30
    loop_info_scale: float = 100.0
    loop_cooldown: int = 30
    motion_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10))
    ba_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iterations=8, cost_tolerance=1e-6))
    gba_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iterations=15, cost_tolerance=1e-8))


def predict_pose(prev: Frame, dr: DrMeasurement) -> Pose:
    """DR motion model: compose the previous pose with the camera-frame increment."""
    return compose(prev.pose, dr.delta)


def associate_features(detections, points, predicted: Pose, search_radius: float,
                       camera: CameraIntrinsics):
    """Match map points against the frame's detections by projection gating.

    A map point matches the detection carrying its landmark identity
    (descriptor oracle) when that detection lies within ``search_radius`` of
    the point's projection under the predicted pose. Clutter detections
    (negative ids) never match. Returns (observations, n_trk).
    """
    det_by_id = {}
    for j, u, v in detections:
        if j >= 0 and j not in det_by_id:
            det_by_id[j] = (u, v)
    if not det_by_id or not points:
        return [], 0
    ids = [j for j in det_by_id if j in points]
    if not ids:
        return [], 0
    positions = np.array([points[j].position for j in ids])
    rot = predicted.rotation_matrix
    cam = (positions - predicted.t) @ rot
    observations = []
    for j, (x, y, z) in zip(ids, cam):
        if z <= 0.05:
            continue
        u = camera.fx * x / z + camera.cx
        v = camera.fy * y / z + camera.cy
        if not (-search_radius <= u < camera.width + search_radius
                and -search_radius <= v < camera.height + search_radius):
            continue
        du, dv = det_by_id[j]
        if (du - u) ** 2 + (dv - v) ** 2 <= search_radius ** 2:
            observations.append((j, du, dv))
    return observations, len(observations)


def decide_keyframe(frame: Frame, last_kf: KeyFrame, params: PipelineParams) -> bool:
    if frame.id - last_kf.frame_id >= params.k_max:
        return True
    if last_kf.n_trk > 0 and frame.stats.n_trk / last_kf.n_trk < params.overlap_ratio:
        return True
    if np.linalg.norm(frame.pose.t - last_kf.pose.t) > params.d_max:
        return True
    return False


@dataclass
class GbaEvent:
    frame_id: int
    kf_from: int
    kf_to: int
    pre_keyframes: list      # (timestamp, Pose) before global BA
    post_keyframes: list     # (timestamp, Pose) after global BA
    keyframe_gt: list        # (timestamp, Pose) ground truth, same order


@dataclass
class RunResult:
    mode: str
    frames: list
    slam_map: SlamMap
    track_lost_frame: int | None
    gba_events: list

    def frame_trajectory(self):
        return [(f.timestamp, f.pose) for f in self.frames]

    def keyframe_trajectory(self):
        return [(kf.timestamp, kf.pose) for kf in sorted(self.slam_map.keyframes.values(),
                                                         key=lambda k: k.id)]

    def tracking_ratio(self) -> float:
        if not self.frames:
            return 0.0
        return sum(1 for f in self.frames if f.tracked_ok) / len(self.frames)


class Pipeline:
    """Single-owner sequential pipeline: track, map, close loops per frame."""

    def __init__(self, params: PipelineParams, camera: CameraIntrinsics,
                 world: dict | None = None, mode: str = "adaptive"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.params = params
        self.camera = camera
        self.world = world or {}
        self.mode = mode
        self.slam_map = SlamMap()
        self.frames: list[Frame] = []
        self.prev_frame: Frame | None = None
        self.prev_prev_pose: Pose | None = None
        self.acc_delta: Pose | None = Pose.identity()
        self.c_ref = params.c_ref_init
        self.lost_streak = 0
        self.track_lost_frame: int | None = None
        self.last_gba_kf: int | None = None
        self.gba_events: list[GbaEvent] = []
        self._next_kf_id = 0

    # ----- tracking -------------------------------------------------------

    def _predict(self, dr: DrMeasurement | None) -> Pose:
        prev = self.prev_frame
        if self.mode == "vision-only" or dr is None:
            if self.prev_prev_pose is None:
                return prev.pose
            cv = compose(inverse(self.prev_prev_pose), prev.pose)
            return compose(prev.pose, cv)
        return predict_pose(prev, dr)

    def _alpha_for_quality(self, q: float) -> float | None:
        if self.mode == "adaptive":
            return dr_weight(q, self.params.bounds)
        if self.mode == "fixed-dr":
            return self.params.fixed_alpha
        return None

    def _solve_motion(self, predicted, observations, dr, alpha):
        problem = Problem(intrinsics=self.camera)
        problem.add_pose(1, predicted, fixed=False)
        for j, u, v in observations:
            problem.add_landmark(j, self.slam_map.points[j].position, fixed=True)
            problem.reprojection_factors.append(make_reprojection_factor(
                1, j, np.array([u, v]), self.params.pixel_std,
                huber_scale=self.params.huber_scale))
        if alpha is not None and dr is not None:
            problem.add_pose(0, self.prev_frame.pose, fixed=True)
            problem.dr_factors.append(DrFactor(0, 1, dr.delta, self.params.nominal.matrix()))
        return solve_motion_only(problem, alpha=alpha, nominal=self.params.nominal,
                                 config=self.params.motion_solver)

    def process(self, record) -> Frame:
        dr = DrMeasurement(record.dr_delta) if record.dr_delta is not None else None
        if self.prev_frame is None:
            pose = record.gt_pose if record.gt_pose is not None else Pose.identity()
            stats = TrackingStats(record.n_det, 0)
            frame = Frame(record.frame_id, record.timestamp, pose, stats,
                          compute_quality(stats, self.params.quality), [], dr,
                          tracked_ok=True, gt_pose=record.gt_pose)
            self.frames.append(frame)
            if self.mode == "dr-only":
                self._bare_keyframe(frame)
            else:
                self._insert_keyframe(frame, record)
            self.prev_frame = frame
            return frame

        predicted = self._predict(dr)

        if self.mode == "dr-only":
            stats = TrackingStats(record.n_det, 0)
            frame = Frame(record.frame_id, record.timestamp, predicted, stats,
                          compute_quality(stats, self.params.quality), [], dr,
                          tracked_ok=True, gt_pose=record.gt_pose)
            self._finish_frame(frame, record, mapped=False)
            return frame

        if self.track_lost_frame is not None:
            stats = TrackingStats(record.n_det, 0)
            frame = Frame(record.frame_id, record.timestamp, predicted, stats,
                          compute_quality(stats, self.params.quality), [], dr,
                          tracked_ok=False, gt_pose=record.gt_pose)
            self._finish_frame(frame, record, mapped=False)
            return frame

        observations, n_trk = associate_features(
            record.detections, self.slam_map.points, predicted,
            self.params.search_radius, self.camera)
        if not record.detections and record.n_trk_max > 0:
            n_trk = record.n_trk_max  # replay stream: recorded statistic
        stats = TrackingStats(record.n_det, min(n_trk, record.n_det))
        q = compute_quality(stats, self.params.quality)
        alpha = self._alpha_for_quality(q)

        tracked_ok = True
        iterations = 0
        try:
            pose, report = self._solve_motion(predicted, observations, dr, alpha)
            iterations = report.iterations
        except (NoConstraints, Diverged, SingularSystem):
            pose = predicted
            tracked_ok = False

        frame = Frame(record.frame_id, record.timestamp, pose, stats, q,
                      observations, dr, tracked_ok,
                      alpha=alpha if alpha is not None else float("nan"),
                      solver_iterations=iterations, gt_pose=record.gt_pose)

        if self.mode == "vision-only":
            self.lost_streak = self.lost_streak + 1 if n_trk < self.params.min_inliers else 0
            if self.lost_streak >= self.params.lost_frames:
                self.track_lost_frame = record.frame_id
                frame.tracked_ok = False

        self._finish_frame(frame, record, mapped=self.track_lost_frame is None)
        return frame

    def _finish_frame(self, frame: Frame, record, mapped: bool) -> None:
        self.frames.append(frame)
        if self.acc_delta is not None and frame.dr is not None:
            self.acc_delta = compose(self.acc_delta, frame.dr.delta)
        else:
            self.acc_delta = None if frame.dr is None else self.acc_delta
        self.prev_prev_pose = self.prev_frame.pose
        self.prev_frame = frame
        if self.mode == "dr-only":
            # trajectory snapshots only; no mapping in this mode
            last_kf = self.slam_map.keyframes[max(self.slam_map.keyframes)]
            if frame.id - last_kf.frame_id >= self.params.k_max:
                self._bare_keyframe(frame)
        elif mapped:
            last_kf = self.slam_map.keyframes[max(self.slam_map.keyframes)]
            # Few-but-nonzero matches on a degraded frame make a geometrically
            # risky keyframe. Blackout frames (zero matches, no geometry) and
            # frontier frames (plenty of fresh detections to triangulate) are
            # fine; only deny the degenerate low-texture case.
            risky = (0 < frame.stats.n_trk < self.params.kf_min_trk
                     and frame.stats.n_det < self.params.kf_min_det)
            if decide_keyframe(frame, last_kf, self.params) and not risky:
                self._insert_keyframe(frame, record)

    # ----- mapping --------------------------------------------------------

    def _bare_keyframe(self, frame: Frame) -> KeyFrame:
        kf = KeyFrame(self._next_kf_id, frame.id, frame.timestamp, frame.pose,
                      observations=[], n_trk=0, quality=frame.quality,
                      gt_pose=frame.gt_pose)
        self._next_kf_id += 1
        self.slam_map.keyframes[kf.id] = kf
        return kf

    def _depth_of(self, landmark_id: int, gt_pose: Pose | None) -> float | None:
        """RGB-D stand-in: true depth of the landmark in the actual camera."""
        if gt_pose is None or landmark_id not in self.world:
            return None
        y = gt_pose.rotation_matrix.T @ (self.world[landmark_id] - gt_pose.t)
        return float(y[2]) if y[2] > 0.05 else None

    def _insert_keyframe(self, frame: Frame, record) -> KeyFrame:
        kf_id = self._next_kf_id
        self._next_kf_id += 1
        observations = list(frame.observations)

        matched = {j for j, _, _ in observations}
        for j, u, v in record.detections:
            if j < 0 or j in matched or j in self.slam_map.points:
                continue
            depth = self._depth_of(j, frame.gt_pose)
            if depth is None:
                continue
            cam = np.array([(u - self.camera.cx) * depth / self.camera.fx,
                            (v - self.camera.cy) * depth / self.camera.fy, depth])
            position = frame.pose.rotation_matrix @ cam + frame.pose.t
            self.slam_map.points[j] = MapPoint(j, position, {kf_id}, kf_id)
            observations.append((j, u, v))

        kf = KeyFrame(kf_id, frame.id, frame.timestamp, frame.pose, observations,
                      n_trk=frame.stats.n_trk, quality=frame.quality,
                      dr_to_prev=self.acc_delta if kf_id > 0 else None,
                      gt_pose=frame.gt_pose)
        self.slam_map.keyframes[kf_id] = kf

        shared = {}
        for j, _, _ in observations:
            point = self.slam_map.points.get(j)
            if point is None:
                continue
            for other in point.observers:
                if other != kf_id:
                    shared[other] = shared.get(other, 0) + 1
            point.observers.add(kf_id)
        for other, count in shared.items():
            self.slam_map.add_covisibility(kf_id, other, count)

        self.acc_delta = Pose.identity()
        if kf_id > 0:
            self._local_ba(kf)
            self._cull_points(kf_id)
            self._update_c_ref()
            if self.params.loop_enabled:
                self._check_loop(kf)
        return kf

    def _edge_alphas(self, kf_ids) -> dict:
        """Per-keyframe DR weights for the window: quality, then smoothing."""
        p = self.params
        if self.mode in ("vision-only", "da-only"):
            return {}
        if self.mode == "fixed-dr":
            # the sweep protocol carries one constant weight through every
            # stage; only nonpositive values are rejected
            if p.fixed_alpha <= 0:
                raise ValueError("fixed DR weight must be positive")
            return {k: min(p.fixed_alpha, p.bounds.alpha_max) for k in kf_ids}
        raw = []
        for k in sorted(kf_ids):
            q_ij = keyframe_quality(self.slam_map.connection_count(k), self.c_ref)
            raw.append((k, dr_weight(q_ij, p.bounds)))
        smoothed = {}
        run = []
        for k, a in raw + [(None, None)]:
            if run and (k is None or k != run[-1][0] + 1):
                smoothed.update(smooth_window_weights(run, p.smoothing_halfwidth))
                run = []
            if k is not None:
                run.append((k, a))
        lo, hi = p.bounds.alpha_min, p.bounds.alpha_max
        return {k: min(max(a, lo), hi) for k, a in smoothed.items()}

    def _local_ba(self, new_kf: KeyFrame) -> None:
        p = self.params
        covis = self.slam_map.covisibility.get(new_kf.id, {})
        window = {new_kf.id}
        for k, _ in sorted(covis.items(), key=lambda e: (-e[1], e[0]))[:p.max_local_keyframes]:
            window.add(k)
        for k in range(new_kf.id - p.smoothing_halfwidth, new_kf.id):
            if k in self.slam_map.keyframes:
                window.add(k)

        points = set()
        for k in window:
            for j, _, _ in self.slam_map.keyframes[k].observations:
                point = self.slam_map.points.get(j)
                if point is not None and len(point.observers) >= 2:
                    points.add(j)

        anchor_votes = {}
        for j in points:
            for k in self.slam_map.points[j].observers:
                if k not in window:
                    anchor_votes[k] = anchor_votes.get(k, 0) + 1
        anchors = {k for k, _ in sorted(anchor_votes.items(),
                                        key=lambda e: (-e[1], e[0]))[:p.max_anchor_keyframes]}

        problem = Problem(intrinsics=self.camera)
        for k in sorted(window):
            problem.add_pose(k, self.slam_map.keyframes[k].pose, fixed=False)
        for k in sorted(anchors):
            problem.add_pose(k, self.slam_map.keyframes[k].pose, fixed=True)
        if not anchors:
            problem.poses[min(window)].fixed = True
        obs_lookup = {k: {j: (u, v) for j, u, v in self.slam_map.keyframes[k].observations}
                      for k in window | anchors}
        for j in sorted(points):
            problem.add_landmark(j, self.slam_map.points[j].position)
            for k in self.slam_map.points[j].observers:
                hit = obs_lookup.get(k, {}).get(j)
                if hit is not None:
                    problem.reprojection_factors.append(make_reprojection_factor(
                        k, j, np.array(hit), p.pixel_std, huber_scale=p.huber_scale))

        alphas = self._edge_alphas(window)
        in_problem = window | anchors
        for k in sorted(in_problem):
            if k - 1 not in in_problem or (k not in window and k - 1 not in window):
                continue
            delta = self.slam_map.keyframes[k].dr_to_prev
            if delta is None or not alphas:
                continue
            alpha = max(alphas.get(k - 1, p.bounds.alpha_min), alphas.get(k, p.bounds.alpha_min))
            self.slam_map.dr_edges[(k - 1, k)] = alpha
            problem.dr_factors.append(DrFactor(
                k - 1, k, delta, alpha * p.nominal.matrix()))

        if len(problem.poses) < 2:
            return
        # Reprojection-only problems carry a similarity gauge, and a weak DR
        # chain barely stiffens the scale mode; two fixed poses anchor it.
        fixed = [k for k in sorted(problem.poses) if problem.poses[k].fixed]
        free = [k for k in sorted(problem.poses) if not problem.poses[k].fixed]
        for k in free[:max(0, 2 - len(fixed))]:
            problem.poses[k].fixed = True
        if all(v.fixed for v in problem.poses.values()) and not points:
            return
        try:
            solve_local_ba(problem, p.ba_solver)
        except (Diverged, SingularSystem):
            return
        for k in window:
            if not problem.poses[k].fixed:
                self.slam_map.keyframes[k].pose = problem.poses[k].pose
            if alphas:
                self.slam_map.keyframes[k].lba_alpha = alphas[k]
        for j in points:
            self.slam_map.points[j].position = problem.landmarks[j].position

    def _cull_points(self, current_kf: int) -> None:
        doomed = [j for j, pt in self.slam_map.points.items()
                  if len(pt.observers) < 2 and current_kf - pt.created_kf >= 2]
        for j in doomed:
            point = self.slam_map.points.pop(j)
            for k in point.observers:
                kf = self.slam_map.keyframes[k]
                kf.observations = [o for o in kf.observations if o[0] != j]

    def _update_c_ref(self) -> None:
        recent = sorted(self.slam_map.keyframes)[-self.params.c_ref_window:]
        pairs = [(self.slam_map.keyframes[k].quality, self.slam_map.connection_count(k))
                 for k in recent]
        self.c_ref = update_c_ref(pairs, previous=self.c_ref, q_well=self.params.q_well)

    # ----- loop closing ---------------------------------------------------

    def _check_loop(self, new_kf: KeyFrame) -> None:
        if new_kf.gt_pose is None:
            return
        if self.last_gba_kf is not None and new_kf.id - self.last_gba_kf < self.params.loop_cooldown:
            return
        best = None
        for k in sorted(self.slam_map.keyframes):
            if new_kf.id - k < self.params.loop_gap_min:
                continue
            other = self.slam_map.keyframes[k]
            if other.gt_pose is None:
                continue
            dist = float(np.linalg.norm(other.gt_pose.t - new_kf.gt_pose.t))
            if dist <= self.params.loop_radius and (best is None or dist < best[1]):
                best = (k, dist)
        if best is None:
            return
        old_id = best[0]
        relative = compose(inverse(self.slam_map.keyframes[old_id].gt_pose), new_kf.gt_pose)
        self.slam_map.loop_edges.append((old_id, new_kf.id, relative, self.params.loop_info_scale))
        self._global_ba(old_id, new_kf.id)

    def _global_ba(self, loop_from: int, loop_to: int) -> None:
        p = self.params
        kf_ids = sorted(self.slam_map.keyframes)
        pre = [(self.slam_map.keyframes[k].timestamp, self.slam_map.keyframes[k].pose)
               for k in kf_ids]
        gt = [(self.slam_map.keyframes[k].timestamp, self.slam_map.keyframes[k].gt_pose)
              for k in kf_ids]

        problem = Problem(intrinsics=self.camera)
        for k in kf_ids:
            problem.add_pose(k, self.slam_map.keyframes[k].pose, fixed=(k == kf_ids[0]))
        live = set()
        for j, point in self.slam_map.points.items():
            if len(point.observers) >= 2:
                live.add(j)
                problem.add_landmark(j, point.position)
        for k in kf_ids:
            for j, u, v in self.slam_map.keyframes[k].observations:
                if j in live:
                    problem.reprojection_factors.append(make_reprojection_factor(
                        k, j, np.array([u, v]), p.pixel_std, huber_scale=p.huber_scale))
        for (a, b), alpha in sorted(self.slam_map.dr_edges.items()):
            delta = self.slam_map.keyframes[b].dr_to_prev
            if delta is not None and a in self.slam_map.keyframes:
                problem.dr_factors.append(DrFactor(a, b, delta, alpha * p.nominal.matrix()))
        for a, b, relative, scale in self.slam_map.loop_edges:
            problem.dr_factors.append(DrFactor(a, b, relative, scale * p.nominal.matrix()))

        try:
            solve_global_ba(problem, p.gba_solver)
        except (Diverged, SingularSystem):
            return
        last = kf_ids[-1]
        correction = compose(problem.poses[last].pose, inverse(self.slam_map.keyframes[last].pose))
        for k in kf_ids:
            self.slam_map.keyframes[k].pose = problem.poses[k].pose
        for j in live:
            self.slam_map.points[j].position = problem.landmarks[j].position
        if self.prev_frame is not None:
            self.prev_frame.pose = compose(correction, self.prev_frame.pose)
            if self.prev_prev_pose is not None:
                self.prev_prev_pose = compose(correction, self.prev_prev_pose)
        self.last_gba_kf = loop_to
        post = [(self.slam_map.keyframes[k].timestamp, self.slam_map.keyframes[k].pose)
                for k in kf_ids]
        self.gba_events.append(GbaEvent(
            frame_id=self.frames[-1].id if self.frames else -1,
            kf_from=loop_from, kf_to=loop_to,
            pre_keyframes=pre, post_keyframes=post, keyframe_gt=gt))

    def result(self) -> RunResult:
        return RunResult(mode=self.mode, frames=self.frames, slam_map=self.slam_map,
                         track_lost_frame=self.track_lost_frame,
                         gba_events=self.gba_events)


def run_pipeline(sequence, params: PipelineParams, mode: str) -> RunResult:
    pipeline = Pipeline(params, sequence.camera, sequence.world, mode)
    for record in sequence.records:
        pipeline.process(record)
    return pipeline.result()


# ----- map persistence ----------------------------------------------------


def save_map(slam_map: SlamMap, path) -> None:
    """Versioned structured text; see the README for the section layout."""
    lines = [MAP_MAGIC]
    lines.append("[keyframes]")
    for k in sorted(slam_map.keyframes):
        kf = slam_map.keyframes[k]
        w, x, y, z = kf.pose.q
        tx, ty, tz = kf.pose.t
        lines.append(" ".join([str(kf.id), str(kf.frame_id), fmt(kf.timestamp),
                               fmt(tx), fmt(ty), fmt(tz), fmt(x), fmt(y), fmt(z), fmt(w),
                               fmt(kf.lba_alpha), str(kf.n_trk), fmt(kf.quality)]))
    lines.append("[keyframe_dr]")
    for k in sorted(slam_map.keyframes):
        kf = slam_map.keyframes[k]
        if kf.dr_to_prev is None:
            continue
        w, x, y, z = kf.dr_to_prev.q
        tx, ty, tz = kf.dr_to_prev.t
        lines.append(" ".join([str(kf.id), fmt(tx), fmt(ty), fmt(tz),
                               fmt(x), fmt(y), fmt(z), fmt(w)]))
    lines.append("[keyframe_gt]")
    for k in sorted(slam_map.keyframes):
        kf = slam_map.keyframes[k]
        if kf.gt_pose is None:
            continue
        w, x, y, z = kf.gt_pose.q
        tx, ty, tz = kf.gt_pose.t
        lines.append(" ".join([str(kf.id), fmt(tx), fmt(ty), fmt(tz),
                               fmt(x), fmt(y), fmt(z), fmt(w)]))
    lines.append("[observations]")
    for k in sorted(slam_map.keyframes):
        for j, u, v in slam_map.keyframes[k].observations:
            lines.append(f"{k} {j} {fmt(u)} {fmt(v)}")
    lines.append("[points]")
    for j in sorted(slam_map.points):
        pt = slam_map.points[j]
        lines.append(f"{j} {fmt(pt.position[0])} {fmt(pt.position[1])} "
                     f"{fmt(pt.position[2])} {pt.created_kf}")
    lines.append("[covisibility]")
    for a in sorted(slam_map.covisibility):
        for b in sorted(slam_map.covisibility[a]):
            if a < b:
                lines.append(f"{a} {b} {slam_map.covisibility[a][b]}")
    lines.append("[dredges]")
    for (a, b) in sorted(slam_map.dr_edges):
        lines.append(f"{a} {b} {fmt(slam_map.dr_edges[(a, b)])}")
    lines.append("[loopedges]")
    for a, b, rel, scale in slam_map.loop_edges:
        w, x, y, z = rel.q
        tx, ty, tz = rel.t
        lines.append(" ".join([str(a), str(b), fmt(scale), fmt(tx), fmt(ty), fmt(tz),
                               fmt(x), fmt(y), fmt(z), fmt(w)]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_pose(parts, path, lineno) -> Pose:
    if len(parts) != 7:
        raise FormatError(f"expected 7 pose fields, got {len(parts)}", path=path, line=lineno)
    tx, ty, tz, x, y, z, w = (float(p) for p in parts)
    return Pose(np.array([w, x, y, z]), np.array([tx, ty, tz]))


def load_map(path) -> SlamMap:
    slam_map = SlamMap()
    section = None
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != MAP_MAGIC:
        raise FormatError(f"bad map magic: expected {MAP_MAGIC!r}", path=str(path), line=1)
    try:
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise FormatError("unterminated section header", path=str(path), line=lineno)
                section = line[1:-1]
                if section not in ("keyframes", "keyframe_dr", "keyframe_gt",
                                   "observations", "points", "covisibility",
                                   "dredges", "loopedges"):
                    raise FormatError(f"unknown section {section!r}", path=str(path), line=lineno)
                continue
            parts = line.split()
            if section == "keyframes":
                if len(parts) != 13:
                    raise FormatError(f"expected 13 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                kf = KeyFrame(
                    id=int(parts[0]), frame_id=int(parts[1]), timestamp=float(parts[2]),
                    pose=_parse_pose(parts[3:10], str(path), lineno), observations=[],
                    n_trk=int(parts[11]), quality=float(parts[12]),
                    lba_alpha=float(parts[10]))
                slam_map.keyframes[kf.id] = kf
            elif section == "keyframe_dr":
                slam_map.keyframes[int(parts[0])].dr_to_prev = \
                    _parse_pose(parts[1:], str(path), lineno)
            elif section == "keyframe_gt":
                slam_map.keyframes[int(parts[0])].gt_pose = \
                    _parse_pose(parts[1:], str(path), lineno)
            elif section == "observations":
                if len(parts) != 4:
                    raise FormatError(f"expected 4 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                k, j = int(parts[0]), int(parts[1])
                slam_map.keyframes[k].observations.append((j, float(parts[2]), float(parts[3])))
            elif section == "points":
                if len(parts) != 5:
                    raise FormatError(f"expected 5 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                j = int(parts[0])
                slam_map.points[j] = MapPoint(
                    j, np.array([float(parts[1]), float(parts[2]), float(parts[3])]),
                    set(), int(parts[4]))
            elif section == "covisibility":
                if len(parts) != 3:
                    raise FormatError(f"expected 3 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                slam_map.add_covisibility(int(parts[0]), int(parts[1]), int(parts[2]))
            elif section == "dredges":
                if len(parts) != 3:
                    raise FormatError(f"expected 3 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                slam_map.dr_edges[(int(parts[0]), int(parts[1]))] = float(parts[2])
            elif section == "loopedges":
                if len(parts) != 10:
                    raise FormatError(f"expected 10 fields, got {len(parts)}",
                                      path=str(path), line=lineno)
                slam_map.loop_edges.append((int(parts[0]), int(parts[1]),
                                            _parse_pose(parts[3:], str(path), lineno),
                                            float(parts[2])))
            else:
                raise FormatError("data line before any section", path=str(path), line=lineno)
    except FormatError:
        raise
    except (ValueError, KeyError, IndexError) as e:
        raise FormatError(f"malformed map entry: {e}", path=str(path), line=lineno) from e
    for k in sorted(slam_map.keyframes):
        for j, _, _ in slam_map.keyframes[k].observations:
            if j in slam_map.points:
                slam_map.points[j].observers.add(k)
    return slam_map
