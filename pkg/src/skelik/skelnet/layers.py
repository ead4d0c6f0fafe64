"""Masked multi-head attention and the transformer blocks built from it."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..bodymodel import Skeleton


def kinematic_mask(skel: Skeleton, d) -> np.ndarray:
    """``allowed[q, k]`` is true iff joints q and k are fewer than ``d`` tree edges apart.

    ``d=None`` allows every pair.
    """
    n = skel.n_joints
    if d is None:
        return np.ones((n, n), bool)
    if d < 1:
        raise ValueError("attention distance must be at least 1")
    return skel.tree_distances() < d


def masked_softmax(scores, allowed):
    """Softmax over the last axis restricted to ``allowed`` keys.

    Disallowed keys get exactly zero weight; a row with no allowed key gives
    an all-zero row instead of NaN.
    """
    neg_inf = torch.tensor(float("-inf"), dtype=scores.dtype)
    s = torch.where(allowed, scores, neg_inf)
    m = s.amax(dim=-1, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m)).detach()
    e = torch.exp(s - m)
    den = e.sum(-1, keepdim=True)
    return e / torch.where(den > 0, den, torch.ones_like(den))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        if dim % n_heads:
            raise ValueError("embedding size must be divisible by the head count")
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, xq, xkv, allowed):
        """xq (B, Q, D), xkv (B, K, D), allowed broadcastable to (B, Q, K)."""
        b, nq, dim = xq.shape
        nk = xkv.shape[1]
        h = self.n_heads
        dh = dim // h
        q = self.q(xq).view(b, nq, h, dh).transpose(1, 2)
        k = self.k(xkv).view(b, nk, h, dh).transpose(1, 2)
        v = self.v(xkv).view(b, nk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        w = masked_softmax(scores, allowed.unsqueeze(1))
        ctx = (w @ v).transpose(1, 2).reshape(b, nq, dim)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block.

    Normalising only the branch inputs keeps an untouched residual path from
    the embedding to the heads; the post-norm variant let some seeds squeeze
    the input signal out of the tokens and settle on a constant output.
    """

    def __init__(self, dim, n_heads, ff_hidden):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, allowed):
        h = self.norm1(x)
        x = x + self.attn(h, h, allowed)
        return x + self.ff(self.norm2(x))


class DecoderBlock(nn.Module):
    """Pre-norm optional masked self-attention, cross-attention to the encoder, feed-forward."""

    def __init__(self, dim, n_heads, ff_hidden, self_attention=True):
        super().__init__()
        if self_attention:
            self.self_attn = MultiHeadAttention(dim, n_heads)
            self.norm0 = nn.LayerNorm(dim)
        else:
            self.self_attn = None
        self.cross = MultiHeadAttention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, memory, self_allowed, cross_allowed):
        if self.self_attn is not None:
            h = self.norm0(x)
            x = x + self.self_attn(h, h, self_allowed)
        x = x + self.cross(self.norm1(x), memory, cross_allowed)
        return x + self.ff(self.norm2(x))


class ResidualHead(nn.Module):
    """One wide residual block followed by a linear read-out."""

    def __init__(self, dim, hidden, out):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.readout = nn.Linear(dim, out)

    def forward(self, x):
        return self.readout(x + self.fc2(torch.relu(self.fc1(x))))
