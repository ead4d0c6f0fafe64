"""Finite-difference verification of autograd gradients."""
from __future__ import annotations

import numpy as np
import torch

FD_STEP = 1e-5


def grad_check(fn, inputs, probe=None, step=FD_STEP, max_entries=None, seed=0) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``fn(*inputs)`` must return a tensor; non-scalar outputs are reduced with a
    fixed random probe of the same shape. ``inputs`` are float64 leaf tensors
    (module parameters work too: ``fn`` may ignore its arguments and read them
    directly, since entries are perturbed in place). With ``max_entries`` only
    that many random entries per input are differenced. The per-entry error is
    ``|g - g_fd| / max(1, |g_fd|)``.
    """
    inputs = list(inputs)
    for x in inputs:
        if x.dtype != torch.float64:
            raise TypeError("grad_check needs float64 inputs")
        x.requires_grad_(True)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        out = fn(*inputs)
    if probe is None and out.numel() > 1:
        probe = torch.from_numpy(rng.standard_normal(tuple(out.shape)))

    def scalar():
        o = fn(*inputs)
        return (o * probe).sum() if probe is not None else o.sum()

    grads = torch.autograd.grad(scalar(), inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = rng.choice(idx, max_entries, replace=False)
            gf = g.reshape(-1)
            for i in idx:
                old = flat[i].item()
                flat[i] = old + step
                fp = scalar().item()
                flat[i] = old - step
                fm = scalar().item()
                flat[i] = old
                fd = (fp - fm) / (2 * step)
                worst = max(worst, abs(gf[i].item() - fd) / max(1.0, abs(fd)))
    return worst
