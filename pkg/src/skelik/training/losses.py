"""Training objective: rotation, position and shape terms."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from ..skelnet.rotations import geodesic

SMOOTH_L1_DELTA = 0.01


@dataclass
class LossWeights:
    rotation: float = 1.0
    position: float = 1.0
    shape: float = 1.0


def smooth_l1(pred, target, delta=SMOOTH_L1_DELTA):
    """Mean over entries of ``0.5 x^2 / delta`` inside ``|x| < delta``, ``|x| - delta / 2`` outside."""
    x = (pred - target).abs()
    return torch.where(x < delta, 0.5 * x * x / delta, x - 0.5 * delta).mean()


def loss_terms(pred: dict, target: dict, weights: LossWeights | None = None, delta=SMOOTH_L1_DELTA):
    """Per-term losses and their weighted sum.

    ``pred`` and ``target`` hold batched ``rotations``, ``global_rotations``,
    ``keypoints``, ``vertices`` and ``betas``. The rotation term averages the
    local plus global geodesic distance over joints and frames; the position
    term is smooth-L1 on keypoints plus vertices; the shape term is the squared
    L2 distance of coefficients averaged over frames.
    """
    w = weights or LossWeights()
    l_rot = (geodesic(pred["rotations"], target["rotations"])
             + geodesic(pred["global_rotations"], target["global_rotations"])).mean()
    l_pos = smooth_l1(pred["keypoints"], target["keypoints"], delta)
    if "vertices" in pred:
        l_pos = l_pos + smooth_l1(pred["vertices"], target["vertices"], delta)
    l_shape = ((pred["betas"] - target["betas"]) ** 2).sum(-1).mean()
    total = w.rotation * l_rot + w.position * l_pos + w.shape * l_shape
    return total, {"rotation": l_rot, "position": l_pos, "shape": l_shape}
