"""Keypoint corruption and consistent target transforms for training."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import rotmath as rm
from ..bodymodel import MIRROR, BodyModel, fk_numpy, mirror_points, mirror_rotations
from ..rng import stream


@dataclass
class AugmentConfig:
    mask_prob: float = 0.20
    yaw_range: float = np.pi
    lie_down_prob: float = 0.05
    noise_scale: float = 0.05
    mirror_prob: float = 0.50
    shape_noise_std: np.ndarray | float = 1.0
    outlier_prob: float = 0.01
    outlier_std: float = 1.0
    sigma_table: np.ndarray | float = 1.0

    def __post_init__(self):
        for name in ("mask_prob", "lie_down_prob", "mirror_prob", "outlier_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def off(cls):
        """No corruption at all: the identity augmentation."""
        return cls(mask_prob=0.0, yaw_range=0.0, lie_down_prob=0.0, noise_scale=0.0, mirror_prob=0.0,
                   shape_noise_std=0.0, outlier_prob=0.0, outlier_std=0.0)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d


@dataclass
class Batch:
    """Network inputs plus the targets they are consistent with."""

    keypoints: np.ndarray          # corrupted input (N, K, 3)
    visible: np.ndarray            # (N, K)
    rotations: np.ndarray          # target local rotations (N, J, 3, 3)
    betas: np.ndarray
    translation: np.ndarray
    clean_keypoints: np.ndarray    # transformed, uncorrupted (N, K, 3)
    joints: np.ndarray
    vertices: np.ndarray
    flags: dict = field(default_factory=dict)


def _draws(rng, n_kp, n_shape):
    """Fixed set of draws per sample so every stream is consumed identically."""
    return {
        "shape": rng.standard_normal(n_shape),
        "mirror": rng.uniform(),
        "yaw": rng.uniform(-1.0, 1.0),
        "lie": rng.uniform(),
        "lie_sign": rng.uniform(),
        "noise": rng.standard_normal((n_kp, 3)),
        "outlier": rng.uniform(size=n_kp),
        "outlier_value": rng.standard_normal((n_kp, 3)),
        "mask": rng.uniform(size=n_kp),
    }


def augment_arrays(cfg: AugmentConfig, model: BodyModel, reg_weights, kp_mirror, rotations, betas, trans,
                   rngs, keypoints=None, hip_joints=None) -> Batch:
    """Augment a batch of clean samples given one rng per sample.

    Order: shape resampling (keypoints recomputed through FK), mirroring,
    yaw about the mid-hip point, occasional 90 degree tilt onto the back or
    front, per-joint Gaussian noise, outliers, and masking. Masking only
    clears the visibility flag; positions are left in place.
    """
    skel = model.skeleton
    n = len(rotations)
    n_kp = reg_weights.shape[0]
    d = [_draws(r, n_kp, model.n_shape) for r in rngs]
    stack = lambda k: np.stack([x[k] for x in d])

    betas = np.clip(betas + stack("shape") * np.asarray(cfg.shape_noise_std), -5.0, 5.0)
    rots = np.array(rotations, dtype=float, copy=True)
    fk = fk_numpy(model, rots, betas, np.zeros((n, 3)))
    # root position relative to translation is shape dependent but rotation free
    root_rest = model.template_joints[0] + np.einsum("kb,nb->nk", model.joint_shape_dirs[0], betas)
    joints = fk["joints"] + trans[:, None]
    verts = fk["vertices"] + trans[:, None]
    if keypoints is not None and not np.any(cfg.shape_noise_std):
        kps = np.array(keypoints, dtype=float, copy=True)
    else:
        kps = np.einsum("jv,nvk->njk", reg_weights, verts)
    root = root_rest + trans

    mir = stack("mirror") < cfg.mirror_prob
    if mir.any():
        rots[mir] = mirror_rotations(skel, rots[mir])
        joints[mir] = mirror_points(joints[mir], skel.mirror_map)
        verts[mir] = mirror_points(verts[mir], model.vertex_mirror_map)
        kps[mir] = mirror_points(kps[mir], kp_mirror)
        root[mir] = root[mir] @ MIRROR

    hips = hip_joints if hip_joints is not None else (skel.index("l_hip"), skel.index("r_hip"))
    centre = joints[:, list(hips)].mean(1)
    Q = rm.rot_y(stack("yaw") * cfg.yaw_range)
    lie = stack("lie") < cfg.lie_down_prob
    tilt = np.where(stack("lie_sign") < 0.5, -np.pi / 2, np.pi / 2)
    Q = np.where(lie[:, None, None], rm.rot_x(tilt) @ Q, Q)

    moved = (Q != np.eye(3)).any(axis=(1, 2))

    def about(points):
        turned = np.einsum("nij,npj->npi", Q, points - centre[:, None]) + centre[:, None]
        return np.where(moved[:, None, None], turned, points)

    joints, verts, kps = about(joints), about(verts), about(kps)
    root = about(root[:, None])[:, 0]
    rots[:, 0] = Q @ rots[:, 0]
    trans_out = root - root_rest

    clean = kps.copy()
    sigma = cfg.noise_scale * np.broadcast_to(np.asarray(cfg.sigma_table, dtype=float), (n_kp,))
    noisy = kps + stack("noise") * sigma[None, :, None] if np.any(sigma) else kps.copy()
    out = stack("outlier") < cfg.outlier_prob
    noisy = np.where(out[..., None], noisy + cfg.outlier_std * stack("outlier_value"), noisy)
    visible = ~(stack("mask") < cfg.mask_prob)
    return Batch(noisy, visible, rots, betas, trans_out, clean, joints, verts,
                 {"mirror": mir, "lie": lie, "outlier": out})


def sample_rngs(seed, iteration, n):
    return [stream(seed, "augment", iteration, i) for i in range(n)]


def augment(cfg: AugmentConfig, model: BodyModel, regressor, sample, rng, kp_mirror=None):
    """Single-sample augmentation of a MotionSample; returns ``(KeypointFrame, Batch)``."""
    from ..multiview import KeypointFrame
    kp_mirror = model.skeleton.mirror_map if kp_mirror is None else kp_mirror
    b = augment_arrays(cfg, model, regressor.weights, kp_mirror, sample.pose.local_rotations[None],
                       sample.shape.beta[None], sample.pose.root_translation[None], [rng],
                       keypoints=sample.keypoints.positions[None])
    return KeypointFrame(b.keypoints[0], b.visible[0]), b
