import numpy as np
import pytest

from conftest import random_pose
from drslam.errors import AngleNearPi, BehindCamera, NotPositiveDefinite
from drslam.factors import (
    DrFactor,
    dr_residual,
    huber_cost,
    huber_weight,
    make_reprojection_factor,
    reprojection_residual,
    whiten,
)
from drslam.geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    compose,
    exp_se3,
    exp_se3_vec,
    inverse,
    project,
    transform_point,
)

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
FD_STEP = 1e-6
FD_RTOL = 1e-5


def project_world(pose: Pose, landmark: np.ndarray) -> np.ndarray:
    return project(K, transform_point(inverse(pose), landmark))


def in_view_landmark(rng, pose: Pose) -> np.ndarray:
    # sample a pixel and depth, then lift into the world through the pose
    u = rng.uniform(80, 560)
    v = rng.uniform(60, 420)
    z = rng.uniform(1.0, 6.0)
    cam = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return transform_point(pose, cam)


def fd_jacobian(fun, dim, step=FD_STEP):
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = step
        cols.append((fun(e) - fun(-e)) / (2 * step))
    return np.stack(cols, axis=1)


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1.0)
    return np.max(np.abs(analytic - numeric)) / scale


def test_reprojection_residual_zero_for_consistent_geometry(rng):
    for _ in range(20):
        pose = random_pose(rng)
        lm = in_view_landmark(rng, pose)
        obs = project_world(pose, lm)
        factor = make_reprojection_factor(0, 0, obs, pixel_std=1.0)
        r, _, _ = reprojection_residual(factor, pose, lm, K)
        assert np.allclose(r, 0, atol=1e-9)


def test_reprojection_behind_camera_raises(rng):
    pose = Pose.identity()
    factor = make_reprojection_factor(0, 0, np.array([320.0, 240.0]), pixel_std=1.0)
    with pytest.raises(BehindCamera):
        reprojection_residual(factor, pose, np.array([0.0, 0.0, -1.0]), K)


def test_reprojection_jacobians_match_finite_differences(rng):
    for _ in range(100):
        pose = random_pose(rng)
        lm = in_view_landmark(rng, pose)
        obs = project_world(pose, lm) + rng.normal(scale=2.0, size=2)
        factor = make_reprojection_factor(0, 0, obs, pixel_std=1.0)
        _, j_pose, j_lm = reprojection_residual(factor, pose, lm, K)

        def r_of_pose(d):
            p = compose(pose, exp_se3_vec(d))
            return reprojection_residual(factor, p, lm, K)[0]

        def r_of_lm(d):
            return reprojection_residual(factor, pose, lm + d, K)[0]

        assert rel_err(j_pose, fd_jacobian(r_of_pose, 6)) < FD_RTOL
        assert rel_err(j_lm, fd_jacobian(r_of_lm, 3)) < FD_RTOL


def make_dr_factor(delta: Pose, info=None) -> DrFactor:
    info = np.eye(6) if info is None else info
    return DrFactor(0, 1, delta, info)


def test_dr_residual_zero_for_consistent_motion(rng):
    for _ in range(50):
        pose_from = random_pose(rng, rot_scale=2.0)
        delta = random_pose(rng, rot_scale=2.0)
        pose_to = compose(pose_from, delta)
        r, _, _ = dr_residual(make_dr_factor(delta), pose_from, pose_to)
        assert np.linalg.norm(r.as_vector()) < 1e-9


def test_dr_residual_identity_delta():
    p = Pose.identity()
    r, _, _ = dr_residual(make_dr_factor(Pose.identity()), p, p)
    assert np.allclose(r.as_vector(), 0, atol=1e-15)


def test_dr_jacobians_match_finite_differences(rng):
    for _ in range(100):
        pose_from = random_pose(rng, rot_scale=1.0)
        pose_to = random_pose(rng, rot_scale=1.0)
        delta = random_pose(rng, rot_scale=1.0)
        factor = make_dr_factor(delta)
        _, j_from, j_to = dr_residual(factor, pose_from, pose_to)

        def r_of_from(d):
            p = compose(pose_from, exp_se3_vec(d))
            return dr_residual(factor, p, pose_to)[0].as_vector()

        def r_of_to(d):
            p = compose(pose_to, exp_se3_vec(d))
            return dr_residual(factor, pose_from, p)[0].as_vector()

        assert rel_err(j_from, fd_jacobian(r_of_from, 6)) < FD_RTOL
        assert rel_err(j_to, fd_jacobian(r_of_to, 6)) < FD_RTOL


def test_dr_residual_near_pi_propagates():
    half_turn = exp_se3(Twist(np.zeros(3), np.array([0.0, 0.0, np.pi - 1e-9])))
    factor = make_dr_factor(Pose.identity())
    with pytest.raises(AngleNearPi):
        dr_residual(factor, Pose.identity(), half_turn)


def test_huber_weight():
    assert huber_weight(0.0, 2.0) == 1.0
    assert huber_weight(2.0, 2.0) == 1.0
    assert huber_weight(4.0, 2.0) == pytest.approx(0.5)


def test_huber_cost_continuous_and_monotone():
    k = 1.345
    ns = np.linspace(0, 10, 2001)
    costs = np.array([huber_cost(n, k) for n in ns])
    assert np.all(np.diff(costs) >= 0)
    jumps = np.abs(np.diff(costs))
    assert jumps.max() < 0.1  # no discontinuity at the threshold


def test_whiten_identity_information(rng):
    r = rng.normal(size=2)
    j = rng.normal(size=(2, 6))
    rw, (jw,) = whiten(r, [j], np.eye(2))
    assert np.allclose(rw, r)
    assert np.allclose(jw, j)


def test_whiten_diagonal_scales_rows():
    d = np.diag([4.0, 9.0])
    rw, (jw,) = whiten(np.array([1.0, 1.0]), [np.ones((2, 3))], d)
    assert np.allclose(rw, [2.0, 3.0])
    assert np.allclose(jw[0], 2.0)
    assert np.allclose(jw[1], 3.0)


def test_whiten_preserves_mahalanobis_norm(rng):
    for _ in range(50):
        a = rng.normal(size=(6, 6))
        info = a @ a.T + 6 * np.eye(6)
        r = rng.normal(size=6)
        rw, _ = whiten(r, [], info)
        assert abs(rw @ rw - r @ info @ r) < 1e-12 * max(1.0, abs(r @ info @ r))


def test_whiten_rejects_indefinite():
    info = np.diag([1.0, -1.0])
    with pytest.raises(NotPositiveDefinite):
        whiten(np.zeros(2), [], info)


def test_dr_factor_validates_information():
    bad = np.eye(6)
    bad[0, 1] = 0.5  # asymmetric
    with pytest.raises(ValueError):
        DrFactor(0, 1, Pose.identity(), bad)
