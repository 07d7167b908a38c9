"""Synthetic sequence generation and replay ingestion.

A sequence holds per-frame ground truth, detections from an ideal pinhole
camera over a landmark field with a controllable visible-density profile,
and noisy dead-reckoning increments. Sequences round-trip losslessly through
a directory layout of TUM and CSV files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSpec, FormatError, NonMonotoneTimestamps
from .fileio import fmt, read_csv, read_tum, write_csv, write_tum
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    compose,
    exp_se3,
    inverse,
    log_se3,
)

DEFAULT_CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

META_MAGIC = "GWSEQ v1"


@dataclass(frozen=True)
class Dropout:
    """Frame range [start, end] with the detection count forced to n_det.

    With ``clustered`` the surviving detections are the ones closest to an
    off-center image anchor, which makes the remaining geometry degenerate
    the way a single low-texture wall patch is.
    """

    start: int
    end: int
    n_det: int = 0
    clustered: bool = False


@dataclass
class WorldConfig:
    waypoints: list = field(default_factory=lambda: [(0.0, 0.0), (10.0, 0.0)])
    closed: bool = False
    n_frames: int = 300
    fps: float = 30.0
    density: list = field(default_factory=lambda: [(0.0, 80.0)])  # (arc start [m], visible count)
    detection_cap: int = 800
    clutter: int = 0
    pixel_noise: float = 0.0            # [px]
    dr_sigma_t: float = 0.0             # [m/frame, per axis]
    dr_sigma_r_deg: float = 0.0         # [deg/frame, per axis]
    dr_bias_t: tuple = (0.0, 0.0, 0.0)  # [m/frame, camera frame]
    dr_bias_r_deg: tuple = (0.0, 0.0, 0.0)
    dropouts: list = field(default_factory=list)
    depth_min: float = 0.3
    depth_max: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.detection_cap <= 0:
            raise ValueError("detection cap must be positive")
        if any(d < 0 for _, d in self.density):
            raise ValueError("density values must be nonnegative")
        if self.pixel_noise < 0 or self.dr_sigma_t < 0 or self.dr_sigma_r_deg < 0:
            raise ValueError("noise standard deviations must be nonnegative")


@dataclass
class SimFrameRecord:
    frame_id: int
    timestamp: float
    gt_pose: Pose | None
    detections: list                    # (landmark_id or -1, u, v)
    dr_delta: Pose | None               # relative increment to previous frame
    odom_pose: Pose | None              # absolute DR-integrated pose
    n_det: int
    n_trk_max: int


@dataclass
class Sequence:
    records: list
    world: dict                         # landmark_id -> position (3,)
    camera: CameraIntrinsics
    meta: dict

    @property
    def has_world(self) -> bool:
        return len(self.world) > 0


def _density_at(density, s: float) -> float:
    value = density[0][1]
    for start, d in density:
        if s >= start:
            value = d
        else:
            break
    return value


def _yaw_pose(position: np.ndarray, yaw: float) -> Pose:
    # camera: +z forward along the tangent, +y down (world -z up)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([
        [s, 0.0, c],
        [-c, 0.0, s],
        [0.0, -1.0, 0.0],
    ])
    T = np.eye(4)
    T[:3, :3] = rot
    T[:3, 3] = position
    return Pose.from_matrix(T)


def generate_trajectory(config: WorldConfig):
    """Constant-speed poses along the waypoint polyline, yaw on the tangent.

    Returns (poses, arc positions). Closed specs revisit the start exactly.
    """
    points = [np.array([x, y, 0.0]) for x, y in config.waypoints]
    if config.closed and np.linalg.norm(points[0] - points[-1]) > 1e-12:
        points.append(points[0].copy())
    if len(points) < 2:
        raise DegenerateSpec("need at least two waypoints")
    seg_vecs = [b - a for a, b in zip(points, points[1:])]
    seg_lens = [float(np.linalg.norm(v)) for v in seg_vecs]
    if any(l < 1e-12 for l in seg_lens):
        raise DegenerateSpec("coincident consecutive waypoints")
    cum = np.concatenate([[0.0], np.cumsum(seg_lens)])
    total = cum[-1]
    n = config.n_frames
    poses, arcs = [], []
    for i in range(n):
        s = total * i / (n - 1) if n > 1 else 0.0
        k = int(np.searchsorted(cum, s, side="right")) - 1
        k = min(k, len(seg_vecs) - 1)
        frac = (s - cum[k]) / seg_lens[k]
        pos = points[k] + frac * seg_vecs[k]
        yaw = math.atan2(seg_vecs[k][1], seg_vecs[k][0])
        poses.append(_yaw_pose(pos, yaw))
        arcs.append(s)
    return poses, np.array(arcs)


def _camera_points(pose: Pose, positions: np.ndarray) -> np.ndarray:
    return (positions - pose.t) @ pose.rotation_matrix


def _visible_mask(cam_pts: np.ndarray, k: CameraIntrinsics, zmin: float, zmax: float):
    z = cam_pts[:, 2]
    ok = (z > zmin) & (z < zmax)
    u = np.full(len(cam_pts), -1.0)
    v = np.full(len(cam_pts), -1.0)
    u[ok] = k.fx * cam_pts[ok, 0] / z[ok] + k.cx
    v[ok] = k.fy * cam_pts[ok, 1] / z[ok] + k.cy
    ok &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return ok, u, v


def populate_landmarks(config: WorldConfig, trajectory, rng,
                       camera: CameraIntrinsics = DEFAULT_CAMERA) -> np.ndarray:
    """Landmark field whose expected frustum count matches the density profile.

    Points are sampled at uniform spatial density d / V_frustum so a camera
    frustum inside the populated region sees d points in expectation. With a
    single profile value the fill covers the bounding box of the whole
    trajectory inflated by the frustum reach (exact for any heading); with a
    piecewise profile the fill is a tube per density region around the path,
    which keeps steps localized in arc length.
    """
    del rng  # placement uses a dedicated stream keyed to the world seed
    local = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1a2b]))
    tan_x = 0.5 * camera.width / camera.fx
    tan_y = 0.5 * camera.height / camera.fy
    frustum_volume = 4.0 * tan_x * tan_y * (config.depth_max ** 3 - config.depth_min ** 3) / 3.0
    half_w = tan_x * config.depth_max
    half_h = tan_y * config.depth_max

    if len(config.density) == 1:
        d = config.density[0][1]
        if d <= 0:
            return np.zeros((0, 3))
        reach = config.depth_max * math.sqrt(1.0 + tan_x * tan_x)
        xy = np.array(config.waypoints, dtype=float)
        lo = xy.min(axis=0) - reach
        hi = xy.max(axis=0) + reach
        volume = float((hi[0] - lo[0]) * (hi[1] - lo[1]) * 2 * half_h)
        count = int(round(d / frustum_volume * volume))
        xs = local.uniform(lo[0], hi[0], count)
        ys = local.uniform(lo[1], hi[1], count)
        zs = local.uniform(-half_h, half_h, count)
        return np.column_stack([xs, ys, zs])

    points = [np.array([x, y, 0.0]) for x, y in config.waypoints]
    if config.closed and np.linalg.norm(points[0] - points[-1]) > 1e-12:
        points.append(points[0].copy())
    segments = []
    arc = 0.0
    for a, b in zip(points, points[1:]):
        length = float(np.linalg.norm(b - a))
        segments.append((arc, arc + length, a, (b - a) / length))
        arc += length
    if not config.closed:
        # phantom extension so end-of-path frustums stay populated
        s0, s1, a, direction = segments[-1]
        segments[-1] = (s0, s1 + config.depth_max, a, direction)
        arc += config.depth_max

    breaks = sorted(s for s, _ in config.density)
    edges = sorted(set(breaks) | {0.0, arc} | {s0 for s0, *_ in segments} | {s1 for _, s1, *_ in segments})
    positions = []
    for lo, hi in zip(edges, edges[1:]):
        if hi - lo < 1e-12 or hi > arc + 1e-9:
            continue
        d = _density_at(config.density, lo)
        if d <= 0:
            continue
        seg = next(s for s in segments if s[0] - 1e-9 <= lo < s[1] + 1e-9 and hi <= s[1] + 1e-9)
        _, _, origin, direction = seg
        lateral = np.array([-direction[1], direction[0], 0.0])
        volume = (hi - lo) * (2 * half_w) * (2 * half_h)
        count = int(round(d / frustum_volume * volume))
        along = local.uniform(lo, hi, count)
        off_w = local.uniform(-half_w, half_w, count)
        off_h = local.uniform(-half_h, half_h, count)
        base = origin + (along - seg[0])[:, None] * direction
        positions.append(base + off_w[:, None] * lateral + off_h[:, None] * np.array([0.0, 0.0, 1.0]))
    if not positions:
        return np.zeros((0, 3))
    return np.vstack(positions)


def _select_detections(dets, n_keep: int, clustered: bool, camera: CameraIntrinsics,
                       landmarks=None):
    """Deterministic subset when a drop-out forces the detection count down.

    Plain drop-outs keep the most central detections. Clustered drop-outs
    keep a tight 3D neighborhood (one wall patch): seeded by the detection
    nearest an off-center anchor, then grown by landmark-space distance, so
    the surviving geometry is nearly degenerate for pose estimation.
    """
    landmark_dets = [d for d in dets if d[0] >= 0]
    clutter_dets = [d for d in dets if d[0] < 0]
    if clustered and landmarks is not None and landmark_dets:
        anchor = np.array([0.2 * camera.width, 0.5 * camera.height])
        seed = min(landmark_dets,
                   key=lambda d: ((d[1] - anchor[0]) ** 2 + (d[2] - anchor[1]) ** 2, d[0]))
        center = landmarks[seed[0]]
        landmark_dets.sort(key=lambda d: (float(np.sum((landmarks[d[0]] - center) ** 2)), d[0]))
    else:
        anchor = np.array([camera.cx, camera.cy])
        landmark_dets.sort(key=lambda d: ((d[1] - anchor[0]) ** 2 + (d[2] - anchor[1]) ** 2, d[0]))
    kept = landmark_dets[:n_keep]
    if len(kept) < n_keep:
        kept += clutter_dets[:n_keep - len(kept)]
    return kept


def simulate_frame(gt_pose: Pose, prev_gt: Pose | None, landmarks: np.ndarray,
                   config: WorldConfig, rng, frame_id: int,
                   camera: CameraIntrinsics = DEFAULT_CAMERA) -> SimFrameRecord:
    detections = []
    if len(landmarks):
        cam = _camera_points(gt_pose, landmarks)
        ok, u, v = _visible_mask(cam, camera, config.depth_min, config.depth_max)
        ids = np.where(ok)[0]
        if len(ids):
            noise = rng.normal(scale=config.pixel_noise, size=(len(ids), 2)) \
                if config.pixel_noise > 0 else np.zeros((len(ids), 2))
            for j, (du, dv) in zip(ids, noise):
                uu, vv = u[j] + du, v[j] + dv
                if 0 <= uu < camera.width and 0 <= vv < camera.height:
                    detections.append((int(j), float(uu), float(vv)))
    if config.clutter:
        cu = rng.uniform(0.0, camera.width - 1e-6, config.clutter)
        cv = rng.uniform(0.0, camera.height - 1e-6, config.clutter)
        detections.extend((-1, float(a), float(b)) for a, b in zip(cu, cv))

    active = None
    for d in config.dropouts:
        if d.start <= frame_id <= d.end:
            active = d
            break
    if active is not None:
        detections = _select_detections(detections, active.n_det, active.clustered,
                                        camera, landmarks)
    elif len(detections) > config.detection_cap:
        detections = _select_detections(detections, config.detection_cap, False, camera)

    dr_delta = None
    if prev_gt is not None:
        gt_delta = compose(inverse(prev_gt), gt_pose)
        eps = np.concatenate([
            np.asarray(config.dr_bias_t, float) + rng.normal(scale=config.dr_sigma_t, size=3),
            np.radians(config.dr_bias_r_deg) + rng.normal(scale=math.radians(config.dr_sigma_r_deg), size=3),
        ])
        dr_delta = compose(gt_delta, exp_se3(Twist(eps[:3], eps[3:])))

    n_trk_max = sum(1 for d in detections if d[0] >= 0)
    return SimFrameRecord(
        frame_id=frame_id,
        timestamp=frame_id / config.fps,
        gt_pose=gt_pose,
        detections=detections,
        dr_delta=dr_delta,
        odom_pose=None,
        n_det=len(detections),
        n_trk_max=n_trk_max,
    )


def simulate_sequence(config: WorldConfig, camera: CameraIntrinsics = DEFAULT_CAMERA) -> Sequence:
    rng = np.random.default_rng(config.seed)
    trajectory = generate_trajectory(config)
    landmarks = populate_landmarks(config, trajectory, rng, camera)
    records = []
    prev = None
    for i, gt in enumerate(trajectory[0]):
        rec = simulate_frame(gt, prev, landmarks, config, rng, i, camera)
        rec.odom_pose = gt if prev is None else compose(records[-1].odom_pose, rec.dr_delta)
        records.append(rec)
        prev = gt
    world = {int(j): landmarks[j] for j in range(len(landmarks))}
    meta = _config_meta(config, camera)
    return Sequence(records=records, world=world, camera=camera, meta=meta)


def _config_meta(config: WorldConfig, camera: CameraIntrinsics) -> dict:
    meta = {
        "format": META_MAGIC,
        "waypoints": ";".join(f"{fmt(x)},{fmt(y)}" for x, y in config.waypoints),
        "closed": str(config.closed).lower(),
        "n_frames": str(config.n_frames),
        "fps": fmt(config.fps),
        "density": ";".join(f"{fmt(s)}:{fmt(d)}" for s, d in config.density),
        "detection_cap": str(config.detection_cap),
        "clutter": str(config.clutter),
        "pixel_noise": fmt(config.pixel_noise),
        "dr_sigma_t": fmt(config.dr_sigma_t),
        "dr_sigma_r_deg": fmt(config.dr_sigma_r_deg),
        "dr_bias_t": ",".join(fmt(v) for v in config.dr_bias_t),
        "dr_bias_r_deg": ",".join(fmt(v) for v in config.dr_bias_r_deg),
        "dropouts": ";".join(
            f"{d.start}:{d.end}:{d.n_det}:{int(d.clustered)}" for d in config.dropouts),
        "depth_min": fmt(config.depth_min),
        "depth_max": fmt(config.depth_max),
        "seed": str(config.seed),
        "fx": fmt(camera.fx), "fy": fmt(camera.fy),
        "cx": fmt(camera.cx), "cy": fmt(camera.cy),
        "width": str(camera.width), "height": str(camera.height),
    }
    return meta


def config_from_meta(meta: dict) -> WorldConfig:
    def floats(s):
        return tuple(float(v) for v in s.split(","))

    dropouts = []
    if meta.get("dropouts"):
        for part in meta["dropouts"].split(";"):
            a, b, n, c = part.split(":")
            dropouts.append(Dropout(int(a), int(b), int(n), bool(int(c))))
    density = []
    for part in meta["density"].split(";"):
        s, d = part.split(":")
        density.append((float(s), float(d)))
    waypoints = [floats(p) for p in meta["waypoints"].split(";")]
    return WorldConfig(
        waypoints=waypoints,
        closed=meta["closed"] == "true",
        n_frames=int(meta["n_frames"]),
        fps=float(meta["fps"]),
        density=density,
        detection_cap=int(meta["detection_cap"]),
        clutter=int(meta["clutter"]),
        pixel_noise=float(meta["pixel_noise"]),
        dr_sigma_t=float(meta["dr_sigma_t"]),
        dr_sigma_r_deg=float(meta["dr_sigma_r_deg"]),
        dr_bias_t=floats(meta["dr_bias_t"]),
        dr_bias_r_deg=floats(meta["dr_bias_r_deg"]),
        dropouts=dropouts,
        depth_min=float(meta["depth_min"]),
        depth_max=float(meta["depth_max"]),
        seed=int(meta["seed"]),
    )


def camera_from_meta(meta: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(meta["fx"]), fy=float(meta["fy"]),
        cx=float(meta["cx"]), cy=float(meta["cy"]),
        width=int(meta["width"]), height=int(meta["height"]))


def write_sequence(seq: Sequence, path) -> None:
    os.makedirs(path, exist_ok=True)
    write_tum(os.path.join(path, "gt.tum"),
              [(r.timestamp, r.gt_pose) for r in seq.records])
    write_tum(os.path.join(path, "odom.tum"),
              [(r.timestamp, r.odom_pose) for r in seq.records])
    obs_rows = []
    for r in seq.records:
        obs_rows.extend((r.frame_id, j, float(u), float(v)) for j, u, v in r.detections)
    write_csv(os.path.join(path, "obs.csv"), ["frame_id", "landmark_id", "u", "v"], obs_rows)
    write_csv(os.path.join(path, "stats.csv"), ["frame_id", "n_det"],
              [(r.frame_id, r.n_det) for r in seq.records])
    write_csv(os.path.join(path, "world.csv"), ["landmark_id", "x", "y", "z"],
              [(j, float(p[0]), float(p[1]), float(p[2])) for j, p in sorted(seq.world.items())])
    with open(os.path.join(path, "meta"), "w") as f:
        for key, value in seq.meta.items():
            f.write(f"{key} = {value}\n")


def _read_meta(path) -> dict:
    meta = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError("expected 'key = value'", path=str(path), line=lineno)
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if meta.get("format") != META_MAGIC:
        raise FormatError(f"bad meta magic: {meta.get('format')!r}", path=str(path), line=1)
    return meta


def read_sequence(path) -> Sequence:
    meta = _read_meta(os.path.join(path, "meta"))
    camera = camera_from_meta(meta)
    gt = read_tum(os.path.join(path, "gt.tum"))
    odom = read_tum(os.path.join(path, "odom.tum"))
    if len(gt) != len(odom):
        raise FormatError("gt.tum and odom.tum disagree on frame count", path=str(path))
    stats = read_csv(os.path.join(path, "stats.csv"), ["frame_id", "n_det"])
    obs = read_csv(os.path.join(path, "obs.csv"), ["frame_id", "landmark_id", "u", "v"])
    world_rows = read_csv(os.path.join(path, "world.csv"), ["landmark_id", "x", "y", "z"])
    world = {int(r[0]): np.array([float(r[1]), float(r[2]), float(r[3])]) for r in world_rows}

    by_frame = {}
    for r in obs:
        by_frame.setdefault(int(r[0]), []).append((int(r[1]), float(r[2]), float(r[3])))
    n_det = {int(r[0]): int(r[1]) for r in stats}

    records = []
    prev_odom = None
    for i, ((ts, gt_pose), (_, odom_pose)) in enumerate(zip(gt, odom)):
        dets = by_frame.get(i, [])
        delta = None if prev_odom is None else compose(inverse(prev_odom), odom_pose)
        records.append(SimFrameRecord(
            frame_id=i, timestamp=ts, gt_pose=gt_pose, detections=dets,
            dr_delta=delta, odom_pose=odom_pose,
            n_det=n_det.get(i, len(dets)),
            n_trk_max=sum(1 for d in dets if d[0] >= 0)))
        prev_odom = odom_pose
    return Sequence(records=records, world=world, camera=camera, meta=meta)


def _interp_pose(a_ts, a_pose, b_ts, b_pose, t):
    if b_ts <= a_ts:
        return a_pose
    lam = (t - a_ts) / (b_ts - a_ts)
    step = log_se3(compose(inverse(a_pose), b_pose)).as_vector()
    return compose(a_pose, exp_se3(Twist(lam * step[:3], lam * step[3:])))


def resample_poses(samples, timestamps):
    """Tangent-space linear interpolation of (ts, Pose) samples; ends held."""
    ts = np.array([s for s, _ in samples])
    if np.any(np.diff(ts) <= 0):
        raise NonMonotoneTimestamps("pose stream timestamps must be strictly increasing")
    out = []
    for t in timestamps:
        k = int(np.searchsorted(ts, t, side="right")) - 1
        if k < 0:
            out.append(samples[0][1])
        elif k >= len(samples) - 1:
            out.append(samples[-1][1])
        else:
            out.append(_interp_pose(ts[k], samples[k][1], ts[k + 1], samples[k + 1][1], t))
    return out


def ingest_replay(stats_csv, odom_file, gt_file=None,
                  camera: CameraIntrinsics = DEFAULT_CAMERA) -> Sequence:
    """Recorded statistic/odometry streams as a landmark-free sequence.

    Odometry (and optional ground truth) is resampled to the stat timestamps
    by piecewise tangent-space interpolation; tracking on such a sequence
    degenerates to DR prediction driven by the recorded counts.
    """
    rows = read_csv(stats_csv, ["timestamp", "n_det", "n_trk"])
    timestamps = [float(r[0]) for r in rows]
    if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise NonMonotoneTimestamps("stats timestamps must be strictly increasing")
    for lineno, r in enumerate(rows, start=2):
        if int(r[2]) > int(r[1]):
            raise FormatError("n_trk exceeds n_det", path=str(stats_csv), line=lineno)
    odom_samples = read_tum(odom_file)
    odom = resample_poses(odom_samples, timestamps)
    gt = resample_poses(read_tum(gt_file), timestamps) if gt_file else [None] * len(rows)

    records = []
    prev = None
    for i, (r, op, gp) in enumerate(zip(rows, odom, gt)):
        delta = None if prev is None else compose(inverse(prev), op)
        records.append(SimFrameRecord(
            frame_id=i, timestamp=timestamps[i], gt_pose=gp, detections=[],
            dr_delta=delta, odom_pose=op, n_det=int(r[1]), n_trk_max=int(r[2])))
        prev = op
    meta = {"format": META_MAGIC, "replay": "true",
            "fx": fmt(camera.fx), "fy": fmt(camera.fy), "cx": fmt(camera.cx),
            "cy": fmt(camera.cy), "width": str(camera.width), "height": str(camera.height)}
    return Sequence(records=records, world={}, camera=camera, meta=meta)
