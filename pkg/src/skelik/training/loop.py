"""Learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..bodymodel import BodyModel, fk_numpy
from ..errors import NonFinite
from ..rng import stream
from ..skelnet import Predictor, SkelNet, SkelNetConfig, save_checkpoint
from ..skelnet.rotations import OrthogonalizeStats
from .augment import AugmentConfig, augment_arrays, sample_rngs
from .dataset import MotionDataset
from .losses import SMOOTH_L1_DELTA, LossWeights, loss_terms
from .normalize import compute_mean_pose


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    warmup_factor: float = 1e-4
    warmup_iters: int = 200
    total_iters: int = 5000
    final_lr: float = 1e-7
    weight_decay: float = 0.01
    seed: int = 0
    val_every: int = 1000
    val_frames: int = 500
    smooth_l1_delta: float = SMOOTH_L1_DELTA
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not self.warmup_iters < self.total_iters:
            raise ValueError("warmup_iters must be below total_iters")
        if not self.final_lr < self.lr:
            raise ValueError("final_lr must be below lr")

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "desk": dict(batch_size=64, warmup_iters=200, total_iters=5000),
    "paper": dict(batch_size=1024, warmup_iters=2000, total_iters=50000),
}


def lr_at(cfg: TrainConfig, it: int) -> float:
    """Linear warm-up from ``lr * warmup_factor`` to ``lr``, then cosine decay to ``final_lr``."""
    if it < 0 or it > cfg.total_iters:
        raise ValueError("iteration outside the schedule")
    if it < cfg.warmup_iters:
        start = cfg.lr * cfg.warmup_factor
        return start + (cfg.lr - start) * it / cfg.warmup_iters
    frac = (it - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return cfg.final_lr + 0.5 * (cfg.lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


def _targets(batch, dtype):
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return {"rotations": t(batch.rotations), "betas": t(batch.betas),
            "keypoints": t(batch.clean_keypoints), "vertices": t(batch.vertices)}


def _global_rotations(model, rotations):
    return fk_numpy(model, rotations, np.zeros((len(rotations), model.n_shape)),
                    np.zeros((len(rotations), 3)), with_vertices=False)["global_rotations"]


def validate(predictor: Predictor, ds: MotionDataset) -> dict:
    """Clean-input MPJPE (mm, root-centred) and rotation error (deg) on ``ds``."""
    from ..metrics import evaluate_arrays
    out = predictor.predict(ds.keypoints, ds.visible)
    gt = fk_numpy(predictor.model, ds.rotations, ds.betas, ds.translations)
    res = evaluate_arrays(out["joints"], gt["joints"], out["rotations"], ds.rotations)
    return {"mpjpe": res.mpjpe, "rot_error": res.rot_error}


@dataclass
class TrainResult:
    predictor: Predictor
    best_iter: int
    best_val: dict
    history: list
    val_history: list
    fallbacks: int


def train(model: BodyModel, regressor_weights, train_ds: MotionDataset, val_ds: MotionDataset | None,
          net_cfg: SkelNetConfig, cfg: TrainConfig, aug: AugmentConfig, out_dir=None,
          kp_mirror=None, log_every=1, progress=None, dtype=torch.float32) -> TrainResult:
    """Train the skeletal transformer with AdamW under :func:`lr_at`.

    Writes ``metrics.jsonl`` (one record per logged iteration and validation)
    and ``best.ckpt`` (best validation MPJPE) into ``out_dir`` when given.
    Given the same seed and inputs, runs are bit-identical on the same
    thread count.
    """
    regressor_weights = np.asarray(regressor_weights, dtype=float)
    kp_mirror = model.skeleton.mirror_map if kp_mirror is None else np.asarray(kp_mirror)
    mean = compute_mean_pose(model.skeleton, train_ds.rotations)
    net = SkelNet(net_cfg, model.skeleton, seed=cfg.seed).to(dtype)
    predictor = Predictor(net, model, mean.theta_m, regressor_weights, kp_mirror)
    opt = torch.optim.AdamW(net.parameters(), lr=lr_at(cfg, 0), weight_decay=cfg.weight_decay)
    # normalised targets need global rotations of the true pose; FK gives them
    val_sub = None
    if val_ds is not None and len(val_ds):
        pick = np.sort(stream(cfg.seed, "split", 1).permutation(len(val_ds))[:cfg.val_frames])
        val_sub = val_ds.subset(pick)
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
    OrthogonalizeStats.reset()
    history, val_history = [], []
    best = (None, math.inf, None)
    n_train = len(train_ds)
    t0 = time.time()
    try:
        for it in range(1, cfg.total_iters + 1):
            lr = lr_at(cfg, it - 1)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = stream(cfg.seed, "batch", it).integers(0, n_train, cfg.batch_size)
            batch = augment_arrays(aug, model, regressor_weights, kp_mirror, train_ds.rotations[idx],
                                   train_ds.betas[idx], train_ds.translations[idx],
                                   sample_rngs(cfg.seed, it, cfg.batch_size), keypoints=train_ds.keypoints[idx])
            target = _targets(batch, dtype)
            target["global_rotations"] = torch.as_tensor(_global_rotations(model, batch.rotations), dtype=dtype)
            net.train()
            pred = predictor(torch.as_tensor(batch.keypoints, dtype=dtype), torch.as_tensor(batch.visible))
            total, terms = loss_terms(pred, target, cfg.loss_weights, cfg.smooth_l1_delta)
            rec = {"iter": it, "lr": lr, "loss": total.item(), **{k: v.item() for k, v in terms.items()}}
            if not math.isfinite(rec["loss"]):
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                raise NonFinite(f"loss became non-finite at iteration {it}", where=it)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            history.append(rec)
            if log_fh and (it % log_every == 0 or it == cfg.total_iters):
                log_fh.write(json.dumps(rec) + "\n")
            if val_sub is not None and (it % cfg.val_every == 0 or it == cfg.total_iters):
                net.eval()
                v = validate(predictor, val_sub)
                vrec = {"iter": it, "val_mpjpe": v["mpjpe"], "val_rot_error": v["rot_error"]}
                val_history.append(vrec)
                if log_fh:
                    log_fh.write(json.dumps(vrec) + "\n")
                if v["mpjpe"] < best[1]:
                    best = (it, v["mpjpe"], v)
                    if out_dir is not None:
                        save_checkpoint(os.path.join(out_dir, "best.ckpt"), predictor,
                                        {"iter": it, "seed": cfg.seed})
            if progress is not None:
                progress(it, rec, time.time() - t0)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), predictor, {"iter": cfg.total_iters, "seed": cfg.seed})
    net.eval()
    return TrainResult(predictor, best[0], best[2], history, val_history, OrthogonalizeStats.fallbacks)
