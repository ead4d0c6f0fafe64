"""Limited-memory BFGS with a strong-Wolfe line search."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

from .errors import NonFinite


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool
    history: list = field(default_factory=list)


class _Cached:
    """Evaluate ``fun_grad`` once per point even when scipy asks for f and g separately."""

    def __init__(self, fun_grad):
        self.fun_grad = fun_grad
        self.x = None
        self.f = None
        self.g = None

    def __call__(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            f, g = self.fun_grad(x)
            self.x, self.f, self.g = x.copy(), float(f), np.asarray(g, dtype=float)
        return self.f, self.g

    def f_only(self, x):
        return self(x)[0]

    def g_only(self, x):
        return self(x)[1]


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def lbfgs(fun_grad, x0, memory=10, max_iter=500, gtol=1e-6, c1=1e-4, c2=0.9) -> LBFGSResult:
    """Minimise ``fun_grad(x) -> (f, grad)`` starting at ``x0``.

    Stops when the gradient 2-norm drops below ``gtol`` or after ``max_iter``
    accepted steps. Every accepted step satisfies the strong Wolfe conditions,
    so the objective never increases.
    """
    ev = _Cached(fun_grad)
    x = np.asarray(x0, dtype=float).copy()
    f, g = ev(x)
    if not np.isfinite(f):
        raise NonFinite("objective is not finite at the starting point", where=0)
    s_list, y_list = [], []
    history = [f]
    f_prev = None
    n_iter = 0
    converged = False
    while n_iter < max_iter:
        gnorm = float(np.linalg.norm(g))
        if gnorm < gtol:
            converged = True
            break
        d = _two_loop(g, s_list, y_list)
        if not s_list:
            d = -g / max(gnorm, 1e-300)
        if np.dot(d, g) >= 0:
            s_list.clear(), y_list.clear()
            d = -g / gnorm
        alpha, *_rest, f_new, _, _ = line_search(ev.f_only, ev.g_only, x, d, g, f, f_prev,
                                                 c1=c1, c2=c2, maxiter=40)
        if alpha is None and s_list:
            # drop the curvature memory and retry along steepest descent
            s_list.clear(), y_list.clear()
            d = -g / gnorm
            alpha, *_rest, f_new, _, _ = line_search(ev.f_only, ev.g_only, x, d, g, f, None,
                                                     c1=c1, c2=c2, maxiter=40)
        if alpha is None:
            break
        x_new = x + alpha * d
        f_new, g_new = ev(x_new)
        if not np.isfinite(f_new):
            raise NonFinite("objective became non-finite", where=n_iter + 1)
        if f_new > f:
            break
        s, y = x_new - x, g_new - g
        if np.dot(s, y) > 1e-12 * np.dot(y, y):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        f_prev, f = f, f_new
        x, g = x_new, g_new
        n_iter += 1
        history.append(f)
    return LBFGSResult(x=x, fun=f, grad_norm=float(np.linalg.norm(g)), n_iter=n_iter,
                       converged=converged, history=history)
