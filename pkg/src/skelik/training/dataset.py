"""Synthetic motion data: random-walk pose chains on the toy body."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .. import rotmath as rm
from ..bodymodel import (BETA_CLAMP, BodyModel, JointRegressor, PoseParams, ShapeParams,
                         fk_numpy, regress_keypoints)
from ..fileio import read_container, write_container
from ..multiview import KeypointFrame
from ..rng import stream

SPLITS = ("train", "val", "test")
CHAIN_LENGTH = 50

# per-joint rotation limits (radians) keyed by name without side prefix
ANGLE_LIMITS = {
    "pelvis": 0.35, "hip": 1.2, "knee": 1.4, "ankle": 0.6, "foot": 0.3, "spine1": 0.5,
    "spine2": 0.4, "spine3": 0.4, "neck": 0.5, "collar": 0.3, "head": 0.5, "shoulder": 1.4,
    "elbow": 1.6, "wrist": 0.8, "hand": 0.3,
}
ROOT_YAW_RANGE = np.pi / 3


@dataclass(frozen=True)
class MotionSample:
    pose: PoseParams
    shape: ShapeParams
    keypoints: KeypointFrame


@dataclass
class MotionDataset:
    rotations: np.ndarray      # (N, J, 3, 3)
    translations: np.ndarray   # (N, 3)
    betas: np.ndarray          # (N, B)
    keypoints: np.ndarray      # (N, K, 3)
    visible: np.ndarray        # (N, K) bool
    chain: np.ndarray          # (N,) chain id
    split: np.ndarray          # (N,) 0 train, 1 val, 2 test

    def __len__(self):
        return len(self.rotations)

    def __getitem__(self, i) -> MotionSample:
        return MotionSample(PoseParams(self.rotations[i], self.translations[i]),
                            ShapeParams(self.betas[i]),
                            KeypointFrame(self.keypoints[i], self.visible[i]))

    def indices(self, split: str) -> np.ndarray:
        return np.nonzero(self.split == SPLITS.index(split))[0]

    def subset(self, idx) -> "MotionDataset":
        idx = np.asarray(idx)
        return MotionDataset(self.rotations[idx], self.translations[idx], self.betas[idx],
                             self.keypoints[idx], self.visible[idx], self.chain[idx], self.split[idx])

    def counts(self) -> dict:
        return {s: int(np.sum(self.split == i)) for i, s in enumerate(SPLITS)}


def joint_limits(skel) -> np.ndarray:
    out = []
    for name in skel.names:
        key = name[2:] if name[:2] in ("l_", "r_") else name
        out.append(ANGLE_LIMITS.get(key, 0.5))
    return np.array(out)


def _clamp_angle(R, limits):
    aa = rm.matrix_to_axis_angle(R)
    ang = np.linalg.norm(aa, axis=-1, keepdims=True)
    scale = np.where(ang > limits[..., None], limits[..., None] / np.maximum(ang, 1e-12), 1.0)
    return rm.axis_angle_to_matrix(aa * scale)


def _random_axis_angle(rng, shape, max_angle):
    axis = rng.standard_normal(shape + (3,))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    ang = rng.uniform(0.0, 1.0, shape) * max_angle
    return axis * ang[..., None]


def sample_pose_chains(skel, n, seed, chain_length=CHAIN_LENGTH, step=0.08):
    """Rotations ``(n, J, 3, 3)``, translations and chain ids from SO(3) random walks.

    Chains start at a random pose inside the joint limits and take small random
    steps ``R <- R exp(w)``, projected back inside the limits. The root keeps a
    limited yaw and a near-upright tilt. All chains advance together; the last
    one is truncated to make ``n`` frames.
    """
    rng = stream(seed, "data", 0)
    limits = joint_limits(skel)
    n_j = skel.n_joints
    n_c = -(-n // chain_length)
    R = rm.axis_angle_to_matrix(_random_axis_angle(rng, (n_c, n_j), limits))
    heading = rm.rot_y(rng.uniform(-ROOT_YAW_RANGE, ROOT_YAW_RANGE, n_c))
    R[:, 0] = heading @ R[:, 0]
    t = np.stack([rng.uniform(-1.0, 1.0, n_c), 0.95 + 0.02 * rng.standard_normal(n_c),
                  rng.uniform(-1.0, 1.0, n_c)], axis=1)
    rots = np.empty((n_c, chain_length, n_j, 3, 3))
    trans = np.empty((n_c, chain_length, 3))
    for f in range(chain_length):
        rots[:, f] = R
        trans[:, f] = t
        d = rng.standard_normal((n_c, n_j, 3)) * (step * limits)[:, None]
        R = R @ rm.axis_angle_to_matrix(d)
        R[:, 1:] = _clamp_angle(R[:, 1:], limits[1:])
        # root tilt is limited relative to the chain's heading
        R[:, 0] = heading @ _clamp_angle(np.swapaxes(heading, -1, -2) @ R[:, 0], limits[0])
        t = t + np.array([0.01, 0.0, 0.01]) * rng.standard_normal((n_c, 3))
    chain = np.repeat(np.arange(n_c), chain_length)
    return (rots.reshape(-1, n_j, 3, 3)[:n], trans.reshape(-1, 3)[:n], chain[:n])


def generate_synthetic_dataset(model: BodyModel, regressor: JointRegressor, n: int, seed: int,
                               chain_length=CHAIN_LENGTH) -> MotionDataset:
    """Synthetic frames with keypoints from FK + ``regressor``, split 80/10/10 by chain."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rots, trans, chain = sample_pose_chains(model.skeleton, n, seed, chain_length)
    n_chains = int(chain.max()) + 1
    rng = stream(seed, "data", 1)
    chain_betas = np.clip(rng.standard_normal((n_chains, model.n_shape)), -BETA_CLAMP, BETA_CLAMP)
    betas = chain_betas[chain]
    keypoints = np.empty((n, regressor.n_keypoints, 3))
    for s in range(0, n, 2048):
        sl = slice(s, min(n, s + 2048))
        verts = fk_numpy(model, rots[sl], betas[sl], trans[sl])["vertices"]
        keypoints[sl] = regress_keypoints(regressor, verts)
    order = stream(seed, "split").permutation(n_chains)
    code = np.zeros(n_chains, dtype=np.int64)
    n_train = max(1, int(round(0.8 * n_chains)))
    n_val = int(round(0.1 * n_chains))
    code[order[n_train:n_train + n_val]] = 1
    code[order[n_train + n_val:]] = 2
    return MotionDataset(rots, trans, betas, keypoints, np.ones((n, regressor.n_keypoints), bool),
                         chain, code[chain])


def consistency_error(model, regressor, ds: MotionDataset) -> float:
    """Max deviation between stored keypoints and FK + regressor (metres)."""
    worst = 0.0
    for s in range(0, len(ds), 2048):
        sl = slice(s, min(len(ds), s + 2048))
        verts = fk_numpy(model, ds.rotations[sl], ds.betas[sl], ds.translations[sl])["vertices"]
        worst = max(worst, float(np.abs(regress_keypoints(regressor, verts) - ds.keypoints[sl]).max()))
    return worst


DATASET_KIND = "dataset"
DATASET_VERSION = 1


def save_dataset(path, ds: MotionDataset, meta=None):
    n = len(ds)
    write_container(path, DATASET_KIND, DATASET_VERSION, {"n": n, **(meta or {})}, {
        "rotations": ds.rotations.reshape(n, -1, 9),
        "translations": ds.translations,
        "betas": ds.betas,
        "keypoints": ds.keypoints,
        "visible": ds.visible.astype(np.uint8),
        "chain": ds.chain,
        "split": ds.split,
    })


def load_dataset(path) -> MotionDataset:
    meta, a = read_container(path, DATASET_KIND, DATASET_VERSION)
    n = meta["n"]
    return MotionDataset(a["rotations"].reshape(n, -1, 3, 3), a["translations"], a["betas"],
                         a["keypoints"], a["visible"].astype(bool), a["chain"], a["split"])


def write_split_manifest(path, ds: MotionDataset, dataset_path=None):
    doc = {"dataset": str(dataset_path) if dataset_path else None, "counts": ds.counts(),
           "chains": {s: sorted(int(c) for c in np.unique(ds.chain[ds.split == i]))
                      for i, s in enumerate(SPLITS)}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
