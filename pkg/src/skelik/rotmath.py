"""Rotation math on batched numpy arrays.

Rotations are ``(..., 3, 3)`` float arrays, quaternions ``(..., 4)`` arrays in
``(w, x, y, z)`` order. Every function accepts arbitrary leading batch
dimensions unless stated otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousAverage, DegenerateInput

_JACOBI_SWEEPS = 12
_PAIRS3 = ((0, 1), (0, 2), (1, 2))


# ---------------------------------------------------------------------------
# constructors / helpers

def _axis_rotation(angle, i, j):
    a = np.asarray(angle, dtype=float)
    R = np.zeros(a.shape + (3, 3))
    c, s = np.cos(a), np.sin(a)
    k = 3 - i - j
    R[..., k, k] = 1.0
    R[..., i, i] = c
    R[..., j, j] = c
    R[..., i, j] = -s
    R[..., j, i] = s
    return R


def rot_x(angle):
    return _axis_rotation(angle, 1, 2)


def rot_y(angle):
    return _axis_rotation(angle, 2, 0)


def rot_z(angle):
    return _axis_rotation(angle, 0, 1)


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_to_matrix(aa):
    """Rodrigues formula for rotation vectors of shape ``(..., 3)``."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    K = skew(aa)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    """Inverse of :func:`axis_angle_to_matrix`, via the quaternion."""
    q = matrix_to_quaternion(R)
    q = np.where(q[..., :1] < 0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    safe = np.where(s < 1e-12, 1.0, s)
    scale = np.where(s < 1e-12, 2.0, angle / safe)
    return q[..., 1:] * scale[..., None]


def random_rotations(rng: np.random.Generator, n: int):
    """Uniformly distributed rotations (Haar measure)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quaternion_to_matrix(q)


def is_rotation(R, tol=1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max(initial=0.0)
    det = np.abs(np.linalg.det(R) - 1.0).max(initial=0.0)
    return bool(ortho <= tol and det <= tol)


def check_rotation(R, tol=1e-9):
    """Validate rotation invariants; used by tests and debug paths only."""
    if not is_rotation(R, tol):
        raise DegenerateInput("matrix is not a rotation within %g" % tol)
    return R


# ---------------------------------------------------------------------------
# distances

def geodesic_distance(a, b):
    """Angle in radians of the relative rotation ``a b^T``, in ``[0, pi]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rel = a @ np.swapaxes(b, -1, -2)
    tr = np.trace(rel, axis1=-2, axis2=-1)
    v = np.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0],
                  rel[..., 1, 0] - rel[..., 0, 1]], axis=-1)
    # atan2 keeps full precision near 0 and pi where arccos does not
    return np.arctan2(np.linalg.norm(v, axis=-1), tr - 1.0)


# ---------------------------------------------------------------------------
# 3x3 SVD by one-sided Jacobi

def svd3(M):
    """Batched SVD of 3x3 matrices by one-sided (Hestenes) Jacobi.

    Returns ``U, S, V`` with ``M = U diag(S) V^T``, singular values sorted in
    descending order and ``U``, ``V`` orthogonal (det may be -1).
    """
    M = np.asarray(M, dtype=float)
    batch = M.shape[:-2]
    A = M.reshape(-1, 3, 3).copy()
    n = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    for _ in range(_JACOBI_SWEEPS):
        for p, q in _PAIRS3:
            ap = A[:, :, p]
            aq = A[:, :, q]
            alpha = np.einsum("ni,ni->n", ap, ap)
            beta = np.einsum("ni,ni->n", aq, aq)
            gamma = np.einsum("ni,ni->n", ap, aq)
            active = np.abs(gamma) > 1e-300
            active &= np.abs(gamma) > 1e-17 * np.sqrt(alpha * beta)
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for X in (A, V):
                xp = X[:, :, p].copy()
                xq = X[:, :, q]
                X[:, :, p] = c[:, None] * xp - s[:, None] * xq
                X[:, :, q] = s[:, None] * xp + c[:, None] * xq
    S = np.linalg.norm(A, axis=1)
    order = np.argsort(-S, axis=1, kind="stable")
    S = np.take_along_axis(S, order, axis=1)
    A = np.take_along_axis(A, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)

    scale = np.maximum(S[:, :1], 1e-300)
    tiny = S <= 1e-15 * scale
    safe = np.where(tiny, 1.0, S)
    U = A / safe[:, None, :]
    # complete U where singular values vanish
    u0_bad = tiny[:, 0]
    if np.any(u0_bad):
        U[u0_bad, :, 0] = np.array([1.0, 0.0, 0.0])
    u1_bad = tiny[:, 1]
    if np.any(u1_bad):
        u0 = U[u1_bad, :, 0]
        pick = np.where(np.abs(u0[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
        u1 = pick - np.einsum("ni,ni->n", pick, u0)[:, None] * u0
        U[u1_bad, :, 1] = u1 / np.linalg.norm(u1, axis=1, keepdims=True)
    u2_bad = tiny[:, 2]
    if np.any(u2_bad):
        U[u2_bad, :, 2] = np.cross(U[u2_bad, :, 0], U[u2_bad, :, 1])
    return U.reshape(batch + (3, 3)), S.reshape(batch + (3,)), V.reshape(batch + (3, 3))


def _orthogonalize_parts(M):
    U, S, V = svd3(M)
    d = np.sign(np.linalg.det(U @ np.swapaxes(V, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    return U, S, V, d


def symmetric_orthogonalize(M, check=True):
    """Nearest special-orthogonal matrix to ``M`` in Frobenius norm.

    ``R = U diag(1, 1, det(U V^T)) V^T`` from the SVD ``M = U S V^T``. The
    minimizer is non-unique when ``s2 + det * s3`` vanishes; with ``check`` set
    that case raises :class:`DegenerateInput`.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise DegenerateInput("non-finite entries")
    U, S, V, d = _orthogonalize_parts(M)
    if check:
        gap = S[..., 1] + d * S[..., 2]
        if np.any(gap <= 1e-12 * np.maximum(S[..., 0], 1.0)):
            raise DegenerateInput("nearest rotation is not unique (two smallest signed singular values cancel)")
    D = np.ones(S.shape)
    D[..., 2] = d
    return (U * D[..., None, :]) @ np.swapaxes(V, -1, -2)


def sixdof_to_rotation(v):
    """Gram-Schmidt of two stacked 3-vectors ``(..., 6)`` into rotation columns."""
    v = np.asarray(v, dtype=float)
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-9):
        raise DegenerateInput("first vector has vanishing norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-9 * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1.0)):
        raise DegenerateInput("vectors are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


# ---------------------------------------------------------------------------
# quaternions

def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quaternion(R):
    """Shepperd's method; returns unit quaternions with an arbitrary sign."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    cand = np.stack([
        1.0 + m00 + m11 + m22,
        1.0 + m00 - m11 - m22,
        1.0 - m00 + m11 - m22,
        1.0 - m00 - m11 + m22,
    ], axis=-1)
    k = np.argmax(cand, axis=-1)
    r = np.sqrt(np.maximum(np.take_along_axis(cand, k[..., None], -1)[..., 0], 1e-300))
    s = 0.5 / r
    w = np.select([k == 0, k == 1, k == 2, k == 3], [
        0.5 * r, (R[..., 2, 1] - R[..., 1, 2]) * s,
        (R[..., 0, 2] - R[..., 2, 0]) * s, (R[..., 1, 0] - R[..., 0, 1]) * s])
    x = np.select([k == 0, k == 1, k == 2, k == 3], [
        (R[..., 2, 1] - R[..., 1, 2]) * s, 0.5 * r,
        (R[..., 0, 1] + R[..., 1, 0]) * s, (R[..., 0, 2] + R[..., 2, 0]) * s])
    y = np.select([k == 0, k == 1, k == 2, k == 3], [
        (R[..., 0, 2] - R[..., 2, 0]) * s, (R[..., 0, 1] + R[..., 1, 0]) * s,
        0.5 * r, (R[..., 1, 2] + R[..., 2, 1]) * s])
    z = np.select([k == 0, k == 1, k == 2, k == 3], [
        (R[..., 1, 0] - R[..., 0, 1]) * s, (R[..., 0, 2] + R[..., 2, 0]) * s,
        (R[..., 1, 2] + R[..., 2, 1]) * s, 0.5 * r])
    q = np.stack([w, x, y, z], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical_quaternion(q):
    """Pick the sign with a non-negative leading nonzero component."""
    q = np.asarray(q, dtype=float)
    idx = np.argmax(np.abs(q) > 1e-12, axis=-1)
    lead = np.take_along_axis(q, idx[..., None], -1)
    return np.where(lead < 0, -q, q)


def jacobi_eigh(A, sweeps=_JACOBI_SWEEPS):
    """Cyclic Jacobi eigen-decomposition of symmetric matrices ``(..., n, n)``.

    Rotations are applied in a fixed pair order so results are reproducible.
    Returns eigenvalues sorted descending and matching eigenvector columns.
    """
    A = np.asarray(A, dtype=float)
    batch = A.shape[:-2]
    n = A.shape[-1]
    A = A.reshape(-1, n, n).copy()
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    pairs = [(p, q) for p in range(n) for q in range(p + 1, n)]
    rows = np.arange(A.shape[0])
    for _ in range(sweeps):
        for p, q in pairs:
            apq = A[:, p, q]
            app = A[:, p, p]
            aqq = A[:, q, q]
            active = np.abs(apq) > 1e-300
            g = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * g)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(1.0, theta))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J with J the Givens rotation in the (p, q) plane
            ap = A[:, :, p].copy()
            aq = A[:, :, q].copy()
            A[:, :, p] = c[:, None] * ap - s[:, None] * aq
            A[:, :, q] = s[:, None] * ap + c[:, None] * aq
            ap = A[:, p, :].copy()
            aq = A[:, q, :].copy()
            A[:, p, :] = c[:, None] * ap - s[:, None] * aq
            A[:, q, :] = s[:, None] * ap + c[:, None] * aq
            vp = V[:, :, p].copy()
            vq = V[:, :, q]
            V[:, :, p] = c[:, None] * vp - s[:, None] * vq
            V[:, :, q] = s[:, None] * vp + c[:, None] * vq
    w = A[:, np.arange(n), np.arange(n)]
    order = np.argsort(-w, axis=1, kind="stable")
    w = w[rows[:, None], order]
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w.reshape(batch + (n,)), V.reshape(batch + (n, n))


def quaternion_average(qs, weights=None, tol=1e-10):
    """Weighted Markley average: leading eigenvector of ``sum w q q^T``.

    ``qs`` is ``(N, ..., 4)``; averaging runs over the first axis so several
    independent averages (e.g. one per joint) can be taken at once.
    """
    qs = np.asarray(qs, dtype=float)
    if qs.ndim < 2 or qs.shape[0] < 1:
        raise ValueError("need at least one quaternion")
    w = np.ones(qs.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    qs = qs / np.linalg.norm(qs, axis=-1, keepdims=True)
    w = w / w.sum()
    acc = np.einsum("n,n...i,n...j->...ij", w, qs, qs)
    vals, vecs = jacobi_eigh(acc)
    if np.any(vals[..., 0] - vals[..., 1] <= tol):
        raise AmbiguousAverage("top eigenvalues of the quaternion accumulator coincide")
    return canonical_quaternion(vecs[..., :, 0])


def average_rotations(Rs, weights=None):
    """Markley average of rotations ``(N, ..., 3, 3)``."""
    return quaternion_to_matrix(quaternion_average(matrix_to_quaternion(Rs), weights))


# ---------------------------------------------------------------------------
# similarity alignment

@dataclass(frozen=True)
class RigidAlignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise DegenerateInput("alignment scale must be positive")

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(pred, gt, mask=None) -> RigidAlignment:
    """Similarity transform ``gt ~ s R pred + t`` over the unmasked points.

    ``mask`` marks the points to use (True = use); ``None`` uses all of them.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DegenerateInput("pred and gt must both be N x 3")
    use = np.ones(len(pred), bool) if mask is None else np.asarray(mask, bool)
    X, Y = pred[use], gt[use]
    if len(X) < 3:
        raise DegenerateInput("need at least 3 unmasked points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    for P in (Xc, Yc):
        sv = np.linalg.svd(P, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateInput("unmasked points are collinear")
    cov = Yc.T @ Xc / len(X)
    U, S, V = svd3(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(V))
    D = np.array([1.0, 1.0, d])
    R = (U * D) @ V.T
    var_x = np.mean(np.sum(Xc * Xc, axis=1))
    scale = float(np.sum(S * D) / var_x)
    t = my - scale * R @ mx
    return RigidAlignment(scale=scale, rotation=R, translation=t)


def procrustes_apply_batch(pred, gt):
    """Align each frame of ``pred (F, N, 3)`` to ``gt`` and return aligned points.

    Unmasked, vectorised variant used by the metrics. A frame whose
    prediction has no spread collapses onto the ground-truth centroid, the
    least-squares optimum at scale zero, rather than raising.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mx = pred.mean(1, keepdims=True)
    my = gt.mean(1, keepdims=True)
    Xc, Yc = pred - mx, gt - my
    cov = np.einsum("fni,fnj->fij", Yc, Xc) / pred.shape[1]
    U, S, V = svd3(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(V))
    d = np.where(d == 0, 1.0, d)
    D = np.ones_like(S)
    D[:, 2] = d
    R = (U * D[:, None, :]) @ np.swapaxes(V, -1, -2)
    var_x = np.mean(np.sum(Xc * Xc, axis=2), axis=1)
    ok = var_x > 1e-18
    scale = np.where(ok, np.sum(S * D, axis=1) / np.where(ok, var_x, 1.0), 1.0)
    out = scale[:, None, None] * np.einsum("fij,fnj->fni", R, Xc) + my
    return np.where(ok[:, None, None], out, np.broadcast_to(my, pred.shape))
