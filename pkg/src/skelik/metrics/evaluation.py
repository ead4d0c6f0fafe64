"""Pose-estimation metrics: MPJPE, PA-MPJPE, MPVPE, PCK, AUC and rotation error."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import rotmath as rm
from ..errors import ShapeMismatch

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(0.0, 150.0 + 1e-9, 5.0)


@dataclass(frozen=True)
class EvalResult:
    mpjpe: float
    pa_mpjpe: float
    mpvpe: float
    pa_mpvpe: float
    pck150: float
    auc: float
    rot_error: float

    def __post_init__(self):
        for k in ("pck150", "auc"):
            v = getattr(self, k)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{k} must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _check(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: prediction {a.shape} vs ground truth {b.shape}")


def _per_point(pred, gt):
    return np.linalg.norm(pred - gt, axis=-1) * 1000.0


def root_centred_errors(pred, gt, root=0):
    """Per-joint errors in mm after subtracting each skeleton's root joint."""
    return _per_point(pred - pred[..., root:root + 1, :], gt - gt[..., root:root + 1, :])


def evaluate_arrays(pred_joints, gt_joints, pred_rots=None, gt_rots=None, pred_verts=None, gt_verts=None,
                    root=0, pck_threshold=PCK_THRESHOLD_MM, auc_thresholds=AUC_THRESHOLDS_MM) -> EvalResult:
    """Metrics averaged over frames of ``(F, J, 3)`` arrays (metres in, mm out).

    Vertices are centred on the corresponding root joint. PA variants align
    each frame with a similarity Procrustes fit over all points. Missing
    vertices or rotations give NaN for the matching fields.
    """
    pj = np.asarray(pred_joints, dtype=float)
    gj = np.asarray(gt_joints, dtype=float)
    _check(pj, gj, "joints")
    if pj.ndim == 2:
        pj, gj = pj[None], gj[None]
    err = root_centred_errors(pj, gj, root)
    pa = _per_point(rm.procrustes_apply_batch(pj, gj), gj)
    pck = float(np.mean(err <= pck_threshold))
    auc = float(np.mean([np.mean(err <= t) for t in auc_thresholds]))
    mpvpe = pa_mpvpe = rot = float("nan")
    if pred_verts is not None and gt_verts is not None:
        pv = np.asarray(pred_verts, dtype=float)
        gv = np.asarray(gt_verts, dtype=float)
        _check(pv, gv, "vertices")
        if pv.ndim == 2:
            pv, gv = pv[None], gv[None]
        mpvpe = float(np.mean(_per_point(pv - pj[:, root:root + 1], gv - gj[:, root:root + 1])))
        pa_mpvpe = float(np.mean(_per_point(rm.procrustes_apply_batch(pv, gv), gv)))
    if pred_rots is not None and gt_rots is not None:
        pr = np.asarray(pred_rots, dtype=float)
        gr = np.asarray(gt_rots, dtype=float)
        _check(pr, gr, "rotations")
        rot = float(np.degrees(np.mean(rm.geodesic_distance(pr, gr))))
    return EvalResult(float(np.mean(err)), float(np.mean(pa)), mpvpe, pa_mpvpe, pck, auc, rot)


def evaluate(pred_joints, gt_joints, pred_verts=None, gt_verts=None, pred_rots=None, gt_rots=None,
             root=0) -> EvalResult:
    """Single frame or batch of frames; see :func:`evaluate_arrays`."""
    return evaluate_arrays(pred_joints, gt_joints, pred_rots, gt_rots, pred_verts, gt_verts, root)


def unrooted_mpjpe(pred, gt) -> float:
    """Mean per-joint error in mm without root centring."""
    return float(np.mean(_per_point(np.asarray(pred, dtype=float), np.asarray(gt, dtype=float))))
