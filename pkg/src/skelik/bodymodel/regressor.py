"""Temperature-softmax joint regressor ``K = softmax(phi / T) V`` and its fit."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import NonFinite, ShapeMismatch
from ..optim import lbfgs
from .model import BodyModel, fk_numpy
from .skeleton import KeypointLayout

DEFAULT_TEMPERATURE = 10.0


def softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class JointRegressor:
    phi: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def weights(self) -> np.ndarray:
        return softmax_rows(self.phi / self.temperature)

    @property
    def n_keypoints(self) -> int:
        return self.phi.shape[0]


def regress_keypoints(reg: JointRegressor, vertices) -> np.ndarray:
    """Keypoints ``(..., J, 3)`` as convex combinations of ``vertices (..., V, 3)``."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape[-2] != reg.phi.shape[1]:
        raise ShapeMismatch(f"regressor expects {reg.phi.shape[1]} vertices, got {vertices.shape[-2]}")
    return np.einsum("jv,...vk->...jk", reg.weights, vertices)


def effective_support(weights) -> np.ndarray:
    """Per-row perplexity ``exp(H)``: the entropy-based count of contributing vertices."""
    w = np.asarray(weights, dtype=float)
    logw = np.log(np.where(w > 0, w, 1.0))
    return np.exp(-(w * logw).sum(axis=1))


def planted_weights(model: BodyModel, layout: KeypointLayout, seed: int = 0,
                    k_range=(4, 10)) -> np.ndarray:
    """Sparse ground-truth regressor: each keypoint averages 4-10 nearby vertices.

    Weights are close to uniform so that each row's perplexity lies inside the
    chosen support range. Mirror pairs of keypoints get mirrored rows and midline
    keypoints use symmetric vertex pairs, keeping the keypoints symmetric.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9E6,)))
    verts = model.template_vertices
    joints = model.template_joints
    vm = model.vertex_mirror_map
    n_kp = layout.n_keypoints
    W = np.zeros((n_kp, model.n_vertices))
    done = set()
    for i in range(n_kp):
        if i in done:
            continue
        mi = int(layout.mirror_map[i])
        target = joints[layout.source_joints[i]]
        order = np.argsort(np.linalg.norm(verts - target, axis=1), kind="stable")
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        if mi == i:
            pairs = []
            for v in order:
                a, b = int(v), int(vm[v])
                if a == b or (b, a) in pairs or (a, b) in pairs:
                    continue
                pairs.append((a, b))
                if 2 * len(pairs) >= k:
                    break
            w = rng.dirichlet(np.full(len(pairs), 30.0))
            for (a, b), wi in zip(pairs, w):
                W[i, a] += wi / 2
                W[i, b] += wi / 2
        else:
            sel = order[:k]
            w = rng.dirichlet(np.full(k, 30.0))
            W[i, sel] = w
            W[mi, vm[sel]] = w
            done.add(mi)
        done.add(i)
    return W


def planted_regressor(model, layout, seed=0, temperature=DEFAULT_TEMPERATURE) -> JointRegressor:
    """A regressor whose realised weights equal :func:`planted_weights` up to 1e-30 tails."""
    W = planted_weights(model, layout, seed)
    phi = temperature * np.log(np.maximum(W, 1e-300))
    phi = np.maximum(phi, -temperature * 700.0)
    return JointRegressor(phi, temperature)


def sample_vertices(model: BodyModel, samples) -> np.ndarray:
    rots = np.stack([p.local_rotations for p, _s, _k in samples])
    betas = np.stack([s.beta for _p, s, _k in samples])
    trans = np.stack([p.root_translation for p, _s, _k in samples])
    return fk_numpy(model, rots, betas, trans)["vertices"]


def _simplex_start(Vc, Kc, T, floor=1e-30):
    """Logits of the simplex-constrained least-squares weights, one NNLS per row.

    The problem is convex in the weights, so this lands in the right basin;
    starting L-BFGS from uniform logits lets some rows collapse onto a couple of
    vertices where the softmax gradient vanishes. The sum-to-one constraint is
    an appended row with a large weight.
    """
    from scipy.optimize import nnls
    n_s, n_j, _ = Kc.shape
    rho = 1e3 * max(1.0, float(np.abs(Vc).max()))
    A = np.vstack([Vc.transpose(0, 2, 1).reshape(-1, Vc.shape[1]), np.full((1, Vc.shape[1]), rho)])
    out = np.empty((n_j, Vc.shape[1]))
    for j in range(n_j):
        w, _ = nnls(A, np.r_[Kc[:, j].reshape(-1), rho], maxiter=50 * A.shape[1])
        w = w / w.sum() if w.sum() > 0 else np.full_like(w, 1.0 / len(w))
        out[j] = T * np.log(np.maximum(w, floor))
    return out


def fit_regressor(model: BodyModel, samples, temperature=DEFAULT_TEMPERATURE, max_iter=500,
                  gtol=1e-6, memory=10, phi0=None, vertices=None, return_result=False):
    """Fit softmax logits to ``samples = [(pose, shape, target (J, 3)), ...]`` with L-BFGS.

    The objective is the mean squared keypoint error in mm^2. It separates over
    keypoints (each row of ``phi`` only sees its own keypoint), so every row is
    minimised by its own L-BFGS run with the same stopping rule. Without
    ``phi0`` each row starts from its simplex least-squares weights. ``vertices``
    may be passed to skip FK when the caller already has them.
    """
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    targets = np.stack([np.asarray(k, dtype=float) for _p, _s, k in samples])
    for i, t in enumerate(targets):
        if not np.all(np.isfinite(t)):
            raise NonFinite("non-finite target keypoints", where=i)
    V = sample_vertices(model, samples) if vertices is None else np.asarray(vertices, dtype=float)
    # weights sum to one, so a per-sample shift cancels; centring keeps the
    # residual arithmetic well conditioned
    centre = V.mean(axis=1, keepdims=True)
    Vc = (V - centre) * 1e3
    Kc = (targets - centre) * 1e3
    n_s, n_j = targets.shape[0], targets.shape[1]
    n_v = V.shape[1]
    T = float(temperature)
    x0 = _simplex_start(Vc, Kc, T) if phi0 is None else np.asarray(phi0, dtype=float).reshape(n_j, n_v)

    results = []
    phi = np.zeros((n_j, n_v))
    for j in range(n_j):
        target_j = Kc[:, j]

        def fun_grad(x):
            w = softmax_rows((x / T)[None])[0]
            resid = np.einsum("v,svk->sk", w, Vc) - target_j
            loss = np.sum(resid * resid) / n_s
            if not np.isfinite(loss):
                bad = int(np.argmax(~np.isfinite(resid).all(axis=1)))
                raise NonFinite(f"regressor loss is not finite for keypoint {j}", where=bad)
            dw = 2.0 * np.einsum("sk,svk->v", resid, Vc) / n_s
            return loss, w * (dw - np.dot(w, dw)) / T

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = lbfgs(fun_grad, x0[j], memory=memory, max_iter=max_iter, gtol=gtol)
        phi[j] = res.x
        results.append(res)
    reg = JointRegressor(phi, T)
    return (reg, results) if return_result else reg


def mean_loss(results) -> float:
    """Mean squared keypoint error (mm^2) over all keypoints of a fit."""
    return float(np.mean([r.fun for r in results]))


REGRESSOR_KIND = "regressor"
REGRESSOR_VERSION = 1


def save_regressor(path, reg: JointRegressor, meta=None):
    from ..fileio import write_container
    write_container(path, REGRESSOR_KIND, REGRESSOR_VERSION,
                    {"temperature": reg.temperature, **(meta or {})}, {"phi": reg.phi})


def load_regressor(path) -> JointRegressor:
    from ..fileio import read_container
    meta, arrays = read_container(path, REGRESSOR_KIND, REGRESSOR_VERSION)
    return JointRegressor(arrays["phi"], meta["temperature"])
