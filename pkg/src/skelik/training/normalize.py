"""Mean pose and pose normalisation ``dTheta = Theta_m^-1 Theta``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rotmath as rm
from ..bodymodel import PoseParams, Skeleton, mirror_rotations


@dataclass(frozen=True)
class MeanPose:
    theta_m: np.ndarray   # (J, 3, 3)

    def is_symmetric(self, skel: Skeleton, tol=1e-6) -> bool:
        return bool(np.abs(mirror_rotations(skel, self.theta_m) - self.theta_m).max() <= tol)


def compute_mean_pose(skel: Skeleton, rotations) -> MeanPose:
    """Per-joint quaternion average of ``rotations (N, J, 3, 3)`` and their mirror images."""
    R = np.asarray(rotations, dtype=float)
    if R.ndim == 3:
        R = R[None]
    if len(R) < 1:
        raise ValueError("need at least one pose")
    both = np.concatenate([R, mirror_rotations(skel, R)])
    q = rm.matrix_to_quaternion(both)
    return MeanPose(rm.quaternion_to_matrix(rm.quaternion_average(q)))


def normalize_rotations(mean: MeanPose, rotations):
    return np.swapaxes(mean.theta_m, -1, -2) @ np.asarray(rotations, dtype=float)


def denormalize_rotations(mean: MeanPose, delta):
    return mean.theta_m @ np.asarray(delta, dtype=float)


def normalize_pose(mean: MeanPose, pose: PoseParams) -> PoseParams:
    return PoseParams(normalize_rotations(mean, pose.local_rotations), pose.root_translation)


def denormalize_pose(mean: MeanPose, pose: PoseParams) -> PoseParams:
    return PoseParams(denormalize_rotations(mean, pose.local_rotations), pose.root_translation)
