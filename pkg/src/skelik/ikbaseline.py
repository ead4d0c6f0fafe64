"""Iterative IK: fit pose, shape and translation to 3D keypoints by descent.

The objective per frame is the smooth-L1 keypoint residual summed over
visible coordinates plus ``lambda * sum_j geodesic(R_j, mean_j)^2`` over
non-root joints. Rotations are updated in the tangent space (``R <- R
exp(w)``) so iterates stay on SO(3). Steps use an Adam-style preconditioned
direction with per-frame Armijo backtracking; a frame whose preconditioned
step fails falls back to plain steepest descent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rotmath as rm
from .bodymodel import BodyModel, PoseParams, ShapeParams
from .errors import InsufficientConstraints
from .multiview import KeypointFrame
from .skelnet.rotations import axis_angle_exp, geodesic

TORSO = ("pelvis", "l_hip", "r_hip", "spine1", "spine2", "spine3", "neck", "l_collar", "r_collar")


@dataclass
class FitConfig:
    max_iters: int = 300
    init: str = "tpose"
    step_rule: str = "adam"
    memory: int = 10
    lambda_prior: float = 1e-3
    tolerance: float = 1e-6
    step: float = 0.02
    max_step: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    armijo_c: float = 1e-4
    backtracks: int = 8
    delta: float = 0.01

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.step_rule not in ("lbfgs", "adam"):
            raise ValueError("step_rule must be 'lbfgs' or 'adam'")
        if self.init not in ("tpose", "from_network"):
            raise ValueError("init must be 'tpose' or 'from_network'")


@dataclass
class FitResult:
    rotations: np.ndarray
    betas: np.ndarray
    translation: np.ndarray
    residual: np.ndarray       # data term per frame at the returned iterate
    objective: np.ndarray
    n_iters: np.ndarray        # accepted steps per frame
    initial_residual: np.ndarray
    history: list              # per-iteration objective (frames, ) arrays


class _Problem:
    def __init__(self, model, reg_weights, theta_m, keypoints, visible, cfg):
        self.bt = model.tensors(torch.float64)
        self.W = torch.as_tensor(np.asarray(reg_weights, dtype=float))
        self.theta_m = torch.as_tensor(np.asarray(theta_m, dtype=float))
        self.K = torch.as_tensor(np.asarray(keypoints, dtype=float))
        self.vis = torch.as_tensor(np.asarray(visible, dtype=bool))
        self.cfg = cfg

    def keypoints(self, R, beta, t):
        out = self.bt.forward(R, beta, t)
        return torch.einsum("jv,nvk->njk", self.W, out["vertices"])

    def data(self, R, beta, t):
        d = self.cfg.delta
        x = (self.keypoints(R, beta, t) - self.K).abs()
        e = torch.where(x < d, 0.5 * x * x / d, x - 0.5 * d)
        return (e * self.vis.unsqueeze(-1)).sum((1, 2))

    def prior(self, R):
        th = geodesic(R[:, 1:], self.theta_m[1:].expand_as(R[:, 1:]))
        return self.cfg.lambda_prior * (th * th).sum(1)

    def objective(self, R, beta, t):
        data = self.data(R, beta, t)
        return data + self.prior(R), data


def _two_loop(g, pairs, h0):
    """Batched L-BFGS product ``H g``; invalid pairs are skipped per frame."""
    q = g.clone()
    coeffs = []
    for s, y, valid in reversed(pairs):
        rho = torch.where(valid, 1.0 / (s * y).sum(1).where(valid, torch.ones_like(h0)), torch.zeros_like(h0))
        a = rho * (s * q).sum(1)
        q = q - a[:, None] * y
        coeffs.append((rho, a))
    q = q * h0[:, None]
    for (s, y, _v), (rho, a) in zip(pairs, reversed(coeffs)):
        b = rho * (y * q).sum(1)
        q = q + (a - b)[:, None] * s
    return q


def _apply(R, beta, t, w, db, dt):
    return R @ axis_angle_exp(w), beta + db, t + dt


def _kabsch_root(model, keypoints, visible, reg_weights):
    """Root rotation aligning the rest-pose torso keypoints to the observed ones."""
    skel = model.skeleton
    rest_kp = np.asarray(reg_weights) @ model.template_vertices
    W = np.asarray(reg_weights)
    torso_j = [skel.index(n) for n in TORSO if n in skel.names]
    # keypoints dominated by torso-joint vertices
    owner = np.argmax(model.skinning_weights, axis=1)
    kp_owner = np.array([np.bincount(owner, weights=W[k], minlength=skel.n_joints).argmax() for k in range(len(W))])
    torso_kp = np.isin(kp_owner, torso_j)
    out = np.empty((len(keypoints), 3, 3))
    for f in range(len(keypoints)):
        use = visible[f] & torso_kp
        if use.sum() < 3:
            use = visible[f]
        X = rest_kp[use] - rest_kp[use].mean(0)
        Y = keypoints[f][use] - keypoints[f][use].mean(0)
        U, S, V = rm.svd3(Y.T @ X)
        d = np.sign(np.linalg.det(U) * np.linalg.det(V)) or 1.0
        out[f] = (U * np.array([1.0, 1.0, d])) @ V.T
    return out


def fit_batch(model: BodyModel, reg_weights, theta_m, keypoints, visible, cfg: FitConfig | None = None,
              init_rotations=None, init_betas=None, init_translation=None, record_history=False) -> FitResult:
    """Fit every frame of ``keypoints (F, K, 3)`` independently (vectorised).

    Without an initial pose the solver starts from the identity (T) pose with
    the root rotation found by a Kabsch fit on the torso keypoints. The
    translation always starts at its closed-form optimum for the initial pose.
    """
    cfg = cfg or FitConfig()
    keypoints = np.asarray(keypoints, dtype=float)
    visible = np.asarray(visible, dtype=bool)
    if keypoints.ndim == 2:
        keypoints, visible = keypoints[None], visible[None]
    n_vis = visible.sum(1)
    if np.any(n_vis < 4):
        raise InsufficientConstraints(f"need at least 4 visible keypoints, frame {int(np.argmin(n_vis))} "
                                      f"has {int(n_vis.min())}")
    F = len(keypoints)
    J = model.n_joints
    B = model.n_shape
    prob = _Problem(model, reg_weights, theta_m, keypoints, visible, cfg)
    if init_rotations is None:
        R0 = np.broadcast_to(np.eye(3), (F, J, 3, 3)).copy()
        R0[:, 0] = _kabsch_root(model, keypoints, visible, reg_weights)
    else:
        R0 = np.array(init_rotations, dtype=float, copy=True)
    b0 = np.zeros((F, B)) if init_betas is None else np.array(init_betas, dtype=float, copy=True)
    R = torch.as_tensor(R0)
    beta = torch.as_tensor(b0)
    with torch.no_grad():
        if init_translation is None:
            kp0 = prob.keypoints(R, beta, torch.zeros(F, 3, dtype=torch.float64))
            vis = prob.vis.unsqueeze(-1)
            t = torch.where(vis, prob.K - kp0, torch.zeros_like(kp0)).sum(1) / vis.sum(1)
        else:
            t = torch.as_tensor(np.array(init_translation, dtype=float, copy=True))

    n_par = J * 3 + B + 3
    m = torch.zeros(F, n_par, dtype=torch.float64)
    v = torch.zeros(F, n_par, dtype=torch.float64)
    pairs = []                      # (s, y, valid) curvature pairs for the quasi-Newton rule
    gamma = torch.zeros(F, dtype=torch.float64)
    alpha = torch.full((F,), cfg.step, dtype=torch.float64)
    active = torch.ones(F, dtype=torch.bool)
    n_iters = torch.zeros(F, dtype=torch.int64)
    history = []
    g_prev = None
    with torch.no_grad():
        f, data = prob.objective(R, beta, t)
    initial_residual = data.numpy().copy()
    for it in range(1, cfg.max_iters + 1):
        x = torch.zeros(F, n_par, dtype=torch.float64, requires_grad=True)
        w, db, dt = x[:, :J * 3].view(F, J, 3), x[:, J * 3:J * 3 + B], x[:, J * 3 + B:]
        fx, _ = prob.objective(*_apply(R, beta, t, w, db, dt))
        g, = torch.autograd.grad(fx.sum(), x)
        gnorm = g.norm(dim=1)
        active &= gnorm >= cfg.tolerance
        if not bool(active.any()):
            break
        with torch.no_grad():
            if cfg.step_rule == "lbfgs":
                if g_prev is not None:
                    y = g - g_prev
                    sy = (s_last * y).sum(1)
                    ok_pair = accepted & (sy > 1e-12 * (y * y).sum(1))
                    pairs.append((s_last, y, ok_pair))
                    pairs = pairs[-cfg.memory:]
                    gamma = torch.where(ok_pair, sy / (y * y).sum(1).clamp_min(1e-300), gamma)
                first = gamma <= 0
                h0 = torch.where(first, cfg.step / gnorm.clamp_min(1e-300), gamma)
                d = -_two_loop(g, pairs, h0)
                step0 = torch.ones(F, dtype=torch.float64)
            else:
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                mh = m / (1 - cfg.beta1 ** it)
                vh = v / (1 - cfg.beta2 ** it)
                d = -mh / (vh.sqrt() + 1e-12)
                step0 = alpha.clone()
            slope = (g * d).sum(1)
            bad = slope >= 0
            d = torch.where(bad[:, None], -g * (cfg.step / gnorm.clamp_min(1e-300))[:, None], d)
            slope = (g * d).sum(1)
            accepted = torch.zeros(F, dtype=torch.bool)
            step = step0
            newR, newb, newt, newf = R.clone(), beta.clone(), t.clone(), f.clone()
            for attempt in range(2 * cfg.backtracks + 2):
                if attempt == cfg.backtracks + 1:
                    # preconditioned direction failed: fall back to steepest descent
                    sd = ~accepted & active
                    d = torch.where(sd[:, None], -g / gnorm.clamp_min(1e-300)[:, None], d)
                    slope = torch.where(sd, -gnorm, slope)
                    step = torch.where(sd, alpha, step)
                    if cfg.step_rule == "lbfgs":
                        pairs = [(ps, py, pv & ~sd) for ps, py, pv in pairs]
                s = step[:, None] * d
                tR, tb, tt = _apply(R, beta, t, s[:, :J * 3].view(F, J, 3), s[:, J * 3:J * 3 + B], s[:, J * 3 + B:])
                ft, _ = prob.objective(tR, tb, tt)
                ok = (ft <= f + cfg.armijo_c * step * slope) & active & ~accepted & torch.isfinite(ft)
                if ok.any():
                    newR[ok], newb[ok], newt[ok], newf[ok] = tR[ok], tb[ok], tt[ok], ft[ok]
                    accepted |= ok
                if bool((accepted | ~active).all()):
                    break
                step = torch.where(accepted, step, step * 0.5)
            # Armijo only guarantees f_new <= f up to round-off; never accept an increase
            accepted &= newf <= f
            R = torch.where(accepted[:, None, None, None], newR, R)
            beta = torch.where(accepted[:, None], newb, beta)
            t = torch.where(accepted[:, None], newt, t)
            f = torch.where(accepted, newf, f)
            s_last = torch.where(accepted[:, None], step[:, None] * d, torch.zeros_like(d))
            g_prev = g
            n_iters += accepted.long()
            grown = torch.clamp(step * 1.5, max=cfg.max_step)
            alpha = torch.where(accepted, grown, alpha * 0.1)
            # a frame that cannot make progress even with tiny steps has stalled
            active &= alpha > 1e-12
            if record_history:
                history.append(f.numpy().copy())
    with torch.no_grad():
        f, data = prob.objective(R, beta, t)
        # re-project to SO(3) to wash out round-off accumulated by retractions
        R = torch.as_tensor(rm.symmetric_orthogonalize(R.numpy(), check=False))
    return FitResult(R.numpy(), beta.numpy(), t.numpy(), data.numpy(), f.numpy(), n_iters.numpy(),
                     initial_residual, history)


def fit_frame(model: BodyModel, mean, keypoints: KeypointFrame, cfg: FitConfig | None = None,
              reg_weights=None, init=None):
    """Fit one frame; returns ``(PoseParams, ShapeParams, residual)``.

    ``init`` optionally holds ``(rotations, betas[, translation])``.
    """
    theta_m = getattr(mean, "theta_m", mean)
    kw = {}
    if init is not None:
        kw = {"init_rotations": np.asarray(init[0])[None], "init_betas": np.asarray(init[1])[None]}
        if len(init) > 2 and init[2] is not None:
            kw["init_translation"] = np.asarray(init[2])[None]
    res = fit_batch(model, reg_weights, theta_m, keypoints.positions[None], keypoints.visible[None], cfg, **kw)
    return (PoseParams(res.rotations[0], res.translation[0]), ShapeParams(res.betas[0]), float(res.residual[0]))


def fit_frame_initialized(model: BodyModel, mean, keypoints: KeypointFrame, net_pose: PoseParams,
                          net_shape: ShapeParams, cfg: FitConfig | None = None, reg_weights=None):
    """As :func:`fit_frame`, starting from a network prediction."""
    return fit_frame(model, mean, keypoints, cfg, reg_weights,
                     init=(net_pose.local_rotations, net_shape.beta, None))
