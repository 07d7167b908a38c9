"""Residuals, analytic Jacobians, and robust/whitening machinery.

Two factor types: pixel reprojection of a landmark into a camera, and a
relative-pose prior from dead reckoning between consecutive poses. Pose
variables are camera-in-world; Jacobians are taken with respect to a
right-multiplicative tangent perturbation, twist ordering (rho, phi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NotPositiveDefinite
from .geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    Z_MIN,
    adjoint,
    compose,
    hat,
    inverse,
    log_se3,
    log_se3_saturated,
    se3_left_jacobian_inverse,
    se3_right_jacobian_inverse,
)

# 95% chi-square quantile with 2 DoF, as a multiple of the pixel std.
HUBER_PIXEL_SCALE = 2.447


@dataclass(frozen=True)
class ReprojectionFactor:
    frame_id: int
    landmark_id: int
    observed: np.ndarray            # pixel measurement (2,)
    pixel_std: float                # isotropic measurement noise [px]
    huber_threshold: float          # robust kernel threshold [px, whitened units]

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ValueError("pixel std must be positive")
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=float))


def make_reprojection_factor(frame_id, landmark_id, observed, pixel_std,
                             huber_scale: float = HUBER_PIXEL_SCALE) -> ReprojectionFactor:
    return ReprojectionFactor(frame_id, landmark_id, np.asarray(observed, float),
                              pixel_std, huber_scale)


@dataclass(frozen=True)
class DrFactor:
    from_id: int
    to_id: int
    delta: Pose                     # relative increment, camera frame
    information: np.ndarray         # 6x6 SPD, alpha-scaled

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information must be symmetric 6x6")
        object.__setattr__(self, "information", info)


def projection_jacobian(k: CameraIntrinsics, x_cam: np.ndarray) -> np.ndarray:
    x, y, z = x_cam
    return np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])


def reprojection_residual(factor: ReprojectionFactor, pose: Pose,
                          landmark: np.ndarray, k: CameraIntrinsics):
    """Pixel residual plus Jacobians w.r.t. the pose and the landmark.

    Raises BehindCamera when the landmark falls behind the near plane; the
    caller marks the factor inactive for the iteration.
    """
    R = pose.rotation_matrix
    y = R.T @ (np.asarray(landmark, float) - pose.t)
    if y[2] <= Z_MIN:
        raise BehindCamera(f"landmark {factor.landmark_id} behind camera")
    jp = projection_jacobian(k, y)
    u = np.array([k.fx * y[0] / y[2] + k.cx, k.fy * y[1] / y[2] + k.cy])
    residual = factor.observed - u
    # d(camera point)/d(xi) = [-I | hat(y)] under P <- P exp(xi).
    j_pose = np.hstack([jp, -jp @ hat(y)])
    j_landmark = -jp @ R.T
    return residual, j_pose, j_landmark


def dr_residual(factor: DrFactor, pose_from: Pose, pose_to: Pose):
    """Relative-pose residual log(delta^-1 from^-1 to) with both Jacobians.

    Zero exactly when the estimated relative motion equals the measured
    increment. AngleNearPi from the log propagates to the caller.
    """
    err = compose(inverse(factor.delta), compose(inverse(pose_from), pose_to))
    r = log_se3(err).as_vector()
    j_to = se3_right_jacobian_inverse(r)
    j_from = -se3_left_jacobian_inverse(r) @ adjoint(inverse(factor.delta))
    return Twist.from_vector(r), j_from, j_to


def dr_residual_saturated(factor: DrFactor, pose_from: Pose, pose_to: Pose) -> np.ndarray:
    """Residual with the rotation clamped below pi; cost evaluation only."""
    err = compose(inverse(factor.delta), compose(inverse(pose_from), pose_to))
    return log_se3_saturated(err).as_vector()


def huber_weight(residual_norm: float, threshold: float) -> float:
    """IRLS weight of the Huber kernel: 1 inside, threshold/norm outside."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if residual_norm <= threshold:
        return 1.0
    return threshold / residual_norm


def huber_cost(residual_norm: float, threshold: float) -> float:
    if residual_norm <= threshold:
        return 0.5 * residual_norm * residual_norm
    return threshold * (residual_norm - 0.5 * threshold)


def information_sqrt(information: np.ndarray) -> np.ndarray:
    """Upper-triangular square root U with U^T U = information."""
    try:
        lower = np.linalg.cholesky(np.asarray(information, float))
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite("information matrix is not positive definite") from e
    return lower.T


def whiten(residual: np.ndarray, jacobians, information: np.ndarray):
    """Left-multiply residual and Jacobians by the information square root.

    The squared norm of the whitened residual equals the Mahalanobis norm
    r^T Sigma^-1 r of the raw residual.
    """
    u = information_sqrt(information)
    return u @ np.asarray(residual, float), [u @ j for j in jacobians]
