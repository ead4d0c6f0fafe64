"""Differentiable rotation heads and geodesic distances in torch."""
from __future__ import annotations

import numpy as np
import torch

from .. import rotmath as rm
from ..errors import DegenerateInput

# smallest admissible lambda_i + lambda_j before the analytic gradient is abandoned
DEGENERACY_TOL = 1e-6


class OrthogonalizeStats:
    """Counts straight-through fallbacks taken by the SVD head's backward pass."""

    fallbacks = 0

    @classmethod
    def reset(cls):
        cls.fallbacks = 0


class _SymmetricOrthogonalize(torch.autograd.Function):
    """``R = U diag(1, 1, det(U V^T)) V^T`` with an analytic backward.

    Writing ``M = R S`` with ``S = V diag(l) V^T`` and ``l = (s1, s2, d s3)``,
    a perturbation gives ``R^T dM = W S + dS`` for skew ``W``. In the V basis
    ``W_ij = (A_ij - A_ji) / (l_i + l_j)`` with ``A = V^T R^T dM V``, which
    transposes to ``dL/dM = R V (C - C^T) V^T`` where ``C = B / (l_i + l_j)``
    and ``B = V^T R^T G V``.
    """

    @staticmethod
    def forward(ctx, M, check):
        M64 = M.detach().cpu().double().numpy()
        if not np.all(np.isfinite(M64)):
            raise DegenerateInput("non-finite entries in rotation head output")
        U, S, V, d = rm._orthogonalize_parts(M64)
        lam = S.copy()
        lam[..., 2] *= d
        if check and np.any(lam[..., 1] + lam[..., 2] <= 1e-12 * np.maximum(S[..., 0], 1.0)):
            raise DegenerateInput("nearest rotation is not unique")
        D = np.ones(S.shape)
        D[..., 2] = d
        R = (U * D[..., None, :]) @ np.swapaxes(V, -1, -2)
        R_t = torch.from_numpy(R)
        ctx.save_for_backward(R_t, torch.from_numpy(V), torch.from_numpy(lam))
        return R_t.to(M.dtype)

    @staticmethod
    def backward(ctx, G):
        R, V, lam = ctx.saved_tensors
        G64 = G.double()
        denom = lam[..., :, None] + lam[..., None, :]
        # lambda_2 + lambda_3 is the smallest off-diagonal pair sum
        bad = lam[..., 1] + lam[..., 2] < DEGENERACY_TOL
        B = V.transpose(-1, -2) @ R.transpose(-1, -2) @ G64 @ V
        C = B / torch.where(denom.abs() < DEGENERACY_TOL, torch.ones_like(denom), denom)
        grad = R @ V @ (C - C.transpose(-1, -2)) @ V.transpose(-1, -2)
        if bool(bad.any()):
            OrthogonalizeStats.fallbacks += int(bad.sum())
            grad = torch.where(bad[..., None, None], G64, grad)
        return grad.to(G.dtype), None


def symmetric_orthogonalize(M: torch.Tensor, check: bool = False) -> torch.Tensor:
    """Nearest rotation to each ``(..., 3, 3)`` matrix, differentiable."""
    return _SymmetricOrthogonalize.apply(M, check)


def sixdof_to_rotation(v: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt of ``(..., 6)`` into rotation columns."""
    a1, a2 = v[..., :3], v[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def geodesic(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Angle of ``a b^T`` via ``atan2(|skew|, (tr - 1) / 2)``.

    Equal to the clamped arccos form on rotations but with a bounded gradient
    near 0 and pi.
    """
    rel = a @ b.transpose(-1, -2)
    cos = (rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2] - 1.0) / 2.0
    w = torch.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0],
                     rel[..., 1, 0] - rel[..., 0, 1]], -1)
    sq = (w * w).sum(-1)
    # clamp keeps the sqrt gradient finite; below it the true gradient is ~0 anyway
    sin = torch.sqrt(sq.clamp_min(1e-30)) / 2.0
    return torch.atan2(sin, cos)


def axis_angle_exp(w: torch.Tensor) -> torch.Tensor:
    """Rodrigues map ``(..., 3) -> (..., 3, 3)`` with a Taylor branch near zero."""
    th2 = (w * w).sum(-1, keepdim=True)[..., None]
    small = th2 < 1e-8
    th2s = torch.where(small, torch.ones_like(th2), th2)
    th = torch.sqrt(th2s)
    a = torch.where(small, 1.0 - th2 / 6.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2s)
    zero = torch.zeros_like(w[..., 0])
    K = torch.stack([zero, -w[..., 2], w[..., 1], w[..., 2], zero, -w[..., 0],
                     -w[..., 1], w[..., 0], zero], -1).reshape(w.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=w.dtype).expand(K.shape)
    return eye + a * K + b * (K @ K)
