import numpy as np
import pytest

from drslam.factors import DrFactor, make_reprojection_factor
from drslam.geometry import CameraIntrinsics, Pose, Twist, exp_se3, exp_se3_vec, compose, inverse, project, transform_point
from drslam.optimizer import Problem
from drslam.weighting import NominalDrInformation

CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_twist(rng, rot_scale=0.5, trans_scale=1.0) -> Twist:
    phi = rng.normal(size=3)
    phi = phi / np.linalg.norm(phi) * rng.uniform(0, rot_scale)
    return Twist(rng.normal(scale=trans_scale, size=3), phi)


def random_pose(rng, rot_scale=0.5, trans_scale=1.0) -> Pose:
    return exp_se3(random_twist(rng, rot_scale, trans_scale))


def make_ba_problem(rng, n_poses=5, n_landmarks=50, pixel_noise=0.0,
                    pose_perturb=0.0, lm_perturb=0.0, fix_first=True,
                    fix_landmarks=False, obs_per_landmark=None,
                    with_dr_chain=False):
    """Synthetic BA problem: poses on a gentle arc observing a point cloud.

    Returns (problem, gt_poses, gt_landmarks). Observations are exact
    projections plus optional pixel noise; initial variables are ground truth
    plus optional tangent/position perturbations. Landmarks that end up with
    fewer than two observations are dropped (matching the map-culling rule),
    so the returned problem has no under-constrained depth directions.
    """
    gt_poses = []
    for i in range(n_poses):
        xi = np.array([0.25 * i, 0.02 * i, 0.0, 0.0, 0.05 * i, 0.0])
        gt_poses.append(exp_se3_vec(xi))
    centers = np.array([p.t for p in gt_poses]).mean(axis=0)
    candidates = centers + np.column_stack([
        rng.uniform(-2.0, 2.0 + 0.25 * n_poses, 3 * n_landmarks),
        rng.uniform(-1.5, 1.5, 3 * n_landmarks),
        rng.uniform(2.5, 6.0, 3 * n_landmarks),
    ])

    observations = []
    gt_landmarks = []
    for lm in candidates:
        if len(gt_landmarks) >= n_landmarks:
            break
        observers = range(n_poses) if obs_per_landmark is None else \
            sorted(rng.choice(n_poses, size=min(obs_per_landmark, n_poses), replace=False))
        obs_here = []
        for i in observers:
            cam = transform_point(inverse(gt_poses[i]), lm)
            if cam[2] < 0.3:
                continue
            uv = project(CAMERA, cam)
            if not (0 <= uv[0] < CAMERA.width and 0 <= uv[1] < CAMERA.height):
                continue
            obs = uv + rng.normal(scale=pixel_noise, size=2) if pixel_noise else uv
            obs_here.append((i, obs))
        if len(obs_here) < 2:
            continue
        j = len(gt_landmarks)
        gt_landmarks.append(lm)
        observations.extend((i, j, obs) for i, obs in obs_here)

    problem = Problem(intrinsics=CAMERA)
    for i, gt in enumerate(gt_poses):
        anchored = fix_first and i == 0
        init = gt if (pose_perturb == 0 or anchored) else \
            compose(gt, exp_se3_vec(rng.normal(scale=pose_perturb, size=6)))
        problem.add_pose(i, init, fixed=anchored)
    for j, gt in enumerate(gt_landmarks):
        init = gt if lm_perturb == 0 else gt + rng.normal(scale=lm_perturb, size=3)
        problem.add_landmark(j, init, fixed=fix_landmarks)
    for i, j, obs in observations:
        problem.reprojection_factors.append(
            make_reprojection_factor(i, j, obs, pixel_std=max(pixel_noise, 1.0)))
    if with_dr_chain:
        info = NominalDrInformation().matrix()
        for i in range(n_poses - 1):
            delta = compose(inverse(gt_poses[i]), gt_poses[i + 1])
            problem.dr_factors.append(DrFactor(i, i + 1, delta, info))
    return problem, gt_poses, np.array(gt_landmarks)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
