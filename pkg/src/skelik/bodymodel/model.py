"""Toy parametric body model: shape blendshapes, rigid chain FK and LBS."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from .skeleton import MIRROR, Skeleton, toy_skeleton

N_SHAPE = 16
BETA_CLAMP = 5.0

# per-joint capsule radius of the toy mesh, metres
_RADII = {
    "pelvis": 0.12, "hip": 0.08, "knee": 0.06, "ankle": 0.045, "foot": 0.035,
    "spine1": 0.11, "spine2": 0.11, "spine3": 0.10, "neck": 0.05, "head": 0.09,
    "collar": 0.05, "shoulder": 0.05, "elbow": 0.04, "wrist": 0.035, "hand": 0.03,
}


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        if not np.all(np.isfinite(b)):
            raise ValueError("shape coefficients must be finite")
        object.__setattr__(self, "beta", np.clip(b, -BETA_CLAMP, BETA_CLAMP))

    @classmethod
    def zeros(cls, n=N_SHAPE):
        return cls(np.zeros(n))


@dataclass(frozen=True)
class PoseParams:
    local_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "local_rotations", np.asarray(self.local_rotations, dtype=float))
        object.__setattr__(self, "root_translation", np.asarray(self.root_translation, dtype=float))

    @classmethod
    def identity(cls, n_joints):
        return cls(np.broadcast_to(np.eye(3), (n_joints, 3, 3)).copy(), np.zeros(3))


@dataclass(frozen=True, eq=False)
class BodyModel:
    skeleton: Skeleton
    template_vertices: np.ndarray      # (V, 3)
    shape_dirs: np.ndarray             # (V, 3, B)
    joint_shape_dirs: np.ndarray       # (J, 3, B)
    skinning_weights: np.ndarray       # (V, J)
    vertex_mirror_map: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.skinning_weights, dtype=float)
        if np.any(w < 0) or np.abs(w.sum(1) - 1.0).max() > 1e-9:
            raise ValueError("skinning weights must be non-negative rows summing to one")
        if self.vertex_mirror_map is None:
            object.__setattr__(self, "vertex_mirror_map", np.arange(len(w)))

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @cached_property
    def template_joints(self) -> np.ndarray:
        return self.skeleton.rest_joints()

    def tensors(self, dtype=torch.float64) -> "BodyTensors":
        cache = self.__dict__.setdefault("_tensor_cache", {})
        if dtype not in cache:
            cache[dtype] = BodyTensors(self, dtype)
        return cache[dtype]


class BodyTensors:
    """Torch copies of the model constants plus the batched FK layer."""

    def __init__(self, model: BodyModel, dtype=torch.float64):
        self.dtype = dtype
        self.parents = [int(p) for p in model.skeleton.parents]
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
        self.j_template = t(model.template_joints)
        self.v_template = t(model.template_vertices)
        self.shape_dirs = t(model.shape_dirs)
        self.joint_shape_dirs = t(model.joint_shape_dirs)
        self.weights = t(model.skinning_weights)

    def rest(self, betas):
        joints = self.j_template + torch.einsum("jkb,nb->njk", self.joint_shape_dirs, betas)
        verts = self.v_template + torch.einsum("vkb,nb->nvk", self.shape_dirs, betas)
        return joints, verts

    def chain(self, rotations, joints_rest, trans):
        """Global rotations and joint positions by composing down the tree."""
        g_rot = [rotations[:, 0]]
        g_pos = [joints_rest[:, 0] + trans]
        for j in range(1, len(self.parents)):
            p = self.parents[j]
            off = joints_rest[:, j] - joints_rest[:, p]
            g_rot.append(g_rot[p] @ rotations[:, j])
            g_pos.append(g_pos[p] + (g_rot[p] @ off.unsqueeze(-1)).squeeze(-1))
        return torch.stack(g_rot, 1), torch.stack(g_pos, 1)

    def forward(self, rotations, betas, trans, with_vertices=True):
        """Batched FK.

        rotations (N, J, 3, 3), betas (N, B), trans (N, 3) -> dict with
        ``joints`` (N, J, 3), ``global_rotations`` and optionally ``vertices``.
        """
        joints_rest, verts_rest = self.rest(betas)
        g_rot, g_pos = self.chain(rotations, joints_rest, trans)
        out = {"joints": g_pos, "global_rotations": g_rot}
        if with_vertices:
            a_trans = g_pos - (g_rot @ joints_rest.unsqueeze(-1)).squeeze(-1)
            blend_rot = torch.einsum("vj,njkl->nvkl", self.weights, g_rot)
            blend_trans = torch.einsum("vj,njk->nvk", self.weights, a_trans)
            out["vertices"] = (blend_rot @ verts_rest.unsqueeze(-1)).squeeze(-1) + blend_trans
        return out


def fk_numpy(model: BodyModel, rotations, betas, trans, with_vertices=True):
    """Batched FK on numpy inputs in float64; returns numpy arrays."""
    bt = model.tensors(torch.float64)
    with torch.no_grad():
        out = bt.forward(torch.from_numpy(np.array(rotations, dtype=float)),
                         torch.from_numpy(np.array(betas, dtype=float)),
                         torch.from_numpy(np.array(trans, dtype=float)), with_vertices)
    return {k: v.numpy() for k, v in out.items()}


def forward_kinematics(model: BodyModel, pose: PoseParams, shape: ShapeParams):
    """Joint positions ``(J, 3)`` and skinned vertices ``(V, 3)`` of one body."""
    out = fk_numpy(model, pose.local_rotations[None], shape.beta[None], pose.root_translation[None])
    return out["joints"][0], out["vertices"][0]


def mirror_rotations(skel: Skeleton, rotations):
    """Mediolateral reflection of local rotations ``(..., J, 3, 3)``."""
    R = np.asarray(rotations)[..., skel.mirror_map, :, :]
    return MIRROR @ R @ MIRROR


def mirror_pose(skel: Skeleton, pose: PoseParams) -> PoseParams:
    return PoseParams(mirror_rotations(skel, pose.local_rotations), MIRROR @ pose.root_translation)


def mirror_points(points, mirror_map):
    """Reflect ``(..., N, 3)`` points across the YZ plane and swap sides."""
    P = np.asarray(points)[..., mirror_map, :].copy()
    P[..., 0] *= -1.0
    return P


# ---------------------------------------------------------------------------
# procedural toy model

def _radius(name: str) -> float:
    key = name[2:] if name[:2] in ("l_", "r_") else name
    return _RADII[key]


def _segment_end(skel: Skeleton, rest: np.ndarray, j: int) -> np.ndarray:
    kids = skel.children(j)
    if kids:
        return rest[kids].mean(0)
    p = skel.parents[j]
    d = rest[j] - rest[p]
    return rest[j] + 0.4 * d / max(np.linalg.norm(d), 1e-9) * max(np.linalg.norm(d), 0.1)


def _frame(axis):
    a = axis / max(np.linalg.norm(axis), 1e-12)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return a, e1, e2


def _joint_vertices(skel, rest, j, n, rng):
    """Sample ``n`` capsule-surface vertices for the body part owned by joint j."""
    start = rest[j]
    end = _segment_end(skel, rest, j)
    if j == 0:
        end = start + np.array([0.0, 0.08, 0.0])
    axis, e1, e2 = _frame(end - start)
    length = np.linalg.norm(end - start)
    r = _radius(skel.names[j])
    s = rng.uniform(0.05, 0.95, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    rad = r * rng.uniform(0.8, 1.2, n)
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    pos = start + s[:, None] * length * axis + rad[:, None] * radial
    # skinning: own bone dominates, blend toward parent near the start and
    # toward the children near the end
    w = np.zeros((n, skel.n_joints))
    p = skel.parents[j]
    kids = skel.children(j)
    a = 0.45 * (1 - s) ** 3 if p >= 0 else np.zeros(n)
    b = 0.45 * s ** 3 if kids else np.zeros(n)
    w[:, j] = 1.0 - a - b
    if p >= 0:
        w[:, p] += a
    for k in kids:
        w[:, k] += b / len(kids)
    return pos, w, radial


def build_toy_model(seed: int = 0, n_shape: int = N_SHAPE, skeleton: Skeleton | None = None,
                    verts_midline: int = 28, verts_lateral: int = 24) -> BodyModel:
    """Deterministic, mediolaterally symmetric toy body model.

    Midline joints get mirrored vertex pairs, right-side parts are mirror images
    of the left ones, and shape directions are symmetrized, so reflecting any
    posed body reproduces the body of the mirrored pose.
    """
    skel = skeleton or toy_skeleton()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB0D7,)))
    rest = skel.rest_joints()
    mm = skel.mirror_map
    n_j = skel.n_joints
    pos, wts, radial, owner, mirror_of = [], [], [], [], []

    def add(p, w, rad, j):
        start = sum(len(x) for x in pos)
        pos.append(p)
        wts.append(w)
        radial.append(rad)
        owner.append(np.full(len(p), j))
        return start

    for j in range(n_j):
        mj = mm[j]
        if mj == j:
            half = verts_midline // 2
            p, w, rad = _joint_vertices(skel, rest, j, half, rng)
            i0 = add(p, w, rad, j)
            i1 = add(p @ MIRROR, w[:, mm], rad @ MIRROR, j)
            mirror_of.append((np.arange(i0, i0 + half), np.arange(i1, i1 + half)))
        elif skel.names[j].startswith("l_"):
            p, w, rad = _joint_vertices(skel, rest, j, verts_lateral, rng)
            i0 = add(p, w, rad, j)
            i1 = add(p @ MIRROR, w[:, mm], rad @ MIRROR, mj)
            mirror_of.append((np.arange(i0, i0 + verts_lateral), np.arange(i1, i1 + verts_lateral)))
    verts = np.concatenate(pos)
    weights = np.concatenate(wts)
    radial = np.concatenate(radial)
    owner = np.concatenate(owner)
    vmirror = np.arange(len(verts))
    for a, b in mirror_of:
        vmirror[a] = b
        vmirror[b] = a

    # shape fields: a smooth part (low-frequency waves over the rest mesh and a
    # per-part girth change) plus a per-vertex radial bump that keeps vertex
    # trajectories linearly independent
    V = len(verts)
    dirs = np.zeros((V, 3, n_shape))
    for k in range(n_shape):
        field_ = np.zeros((V, 3))
        for _ in range(3):
            freq = rng.normal(0.0, 4.0, 3)
            amp = rng.normal(0.0, 1.0, 3)
            field_ += np.cos(verts @ freq + rng.uniform(0, 2 * np.pi))[:, None] * amp
        girth = rng.normal(0.0, 1.0, n_j)
        field_ += girth[owner][:, None] * radial
        field_ += rng.normal(0.0, 0.7, V)[:, None] * radial
        field_ = 0.5 * (field_ + field_[vmirror] @ MIRROR)
        dirs[:, :, k] = field_
    flat = dirs.reshape(V * 3, n_shape)
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))[None, :]
    dirs = q.reshape(V, 3, n_shape) * (0.01 * np.sqrt(V))

    # joints follow the mean shape displacement of the vertices they own
    jdirs = np.zeros((n_j, 3, n_shape))
    for j in range(n_j):
        sel = owner == j
        p = skel.parents[j]
        if p >= 0:
            sel = sel | (owner == p)
        jdirs[j] = dirs[sel].mean(0)
    jdirs[0] = 0.0
    return BodyModel(skel, verts, dirs, jdirs, weights, vmirror)


# ---------------------------------------------------------------------------
# serialisation

BODYMODEL_KIND = "bodymodel"
BODYMODEL_VERSION = 1


def save_body_model(path, model: BodyModel):
    from ..fileio import write_container
    write_container(path, BODYMODEL_KIND, BODYMODEL_VERSION, {"skeleton": model.skeleton.to_dict()}, {
        "template_vertices": model.template_vertices,
        "shape_dirs": model.shape_dirs,
        "joint_shape_dirs": model.joint_shape_dirs,
        "skinning_weights": model.skinning_weights,
        "vertex_mirror_map": np.asarray(model.vertex_mirror_map, dtype=np.int64),
    })


def load_body_model(path) -> BodyModel:
    from ..fileio import read_container
    meta, arrays = read_container(path, BODYMODEL_KIND, BODYMODEL_VERSION)
    return BodyModel(Skeleton.from_dict(meta["skeleton"]), arrays["template_vertices"],
                     arrays["shape_dirs"], arrays["joint_shape_dirs"], arrays["skinning_weights"],
                     arrays["vertex_mirror_map"])
