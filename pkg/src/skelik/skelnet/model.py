"""The skeletal transformer: keypoints in, body pose and shape out."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..bodymodel import BodyModel, MIRROR, PoseParams, ShapeParams
from ..errors import ShapeMismatch
from ..multiview import KeypointFrame
from ..rng import torch_generator
from .layers import DecoderBlock, EncoderBlock, ResidualHead, kinematic_mask
from .rotations import sixdof_to_rotation, symmetric_orthogonalize


@dataclass
class SkelNetConfig:
    j_in: int = 24
    j_body: int = 24
    embed_dim: int = 128
    pos_embed_dim: int = 64
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    n_heads: int = 4
    ff_hidden: int = 256
    head_hidden: int = 1024
    attention_distance: int | None = 4
    rotation_head: str = "svd"
    n_shape: int = 16
    # centred metre coordinates are ~0.3 in size against unit-variance joint
    # ids; without the gain some seeds never pick up the pose signal
    coord_scale: float = 5.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.attention_distance is not None and self.attention_distance < 1:
            raise ValueError("attention_distance must be at least 1")
        if self.rotation_head not in ("svd", "sixdof"):
            raise ValueError("rotation_head must be 'svd' or 'sixdof'")
        if not self.coord_scale > 0:
            raise ValueError("coord_scale must be positive")

    @property
    def rot_dim(self):
        return 9 if self.rotation_head == "svd" else 6

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SkelNet(nn.Module):
    def __init__(self, cfg: SkelNetConfig, skeleton, seed: int = 0):
        super().__init__()
        if skeleton.n_joints != cfg.j_body:
            raise ShapeMismatch("skeleton joint count differs from j_body")
        self.cfg = cfg
        D, P = cfg.embed_dim, cfg.pos_embed_dim
        self.joint_ids = nn.Parameter(torch.zeros(cfg.j_in, P))
        self.embed = nn.Linear(3 + P, D)
        self.encoder = nn.ModuleList(EncoderBlock(D, cfg.n_heads, cfg.ff_hidden)
                                     for _ in range(cfg.n_encoder_blocks))
        self.encoder_norm = nn.LayerNorm(D)
        self.body_queries = nn.Parameter(torch.zeros(cfg.j_body, P))
        self.query_lift = nn.Linear(P, D)
        self.pose_decoder = nn.ModuleList(DecoderBlock(D, cfg.n_heads, cfg.ff_hidden)
                                          for _ in range(cfg.n_decoder_blocks))
        self.pose_norm = nn.LayerNorm(D)
        self.pose_head = ResidualHead(D, cfg.head_hidden, cfg.rot_dim)
        self.shape_query = nn.Parameter(torch.zeros(1, P))
        self.shape_decoder = nn.ModuleList(DecoderBlock(D, cfg.n_heads, cfg.ff_hidden, self_attention=False)
                                           for _ in range(cfg.n_decoder_blocks))
        self.shape_norm = nn.LayerNorm(D)
        self.shape_head = ResidualHead(D, cfg.head_hidden, cfg.n_shape)
        self.register_buffer("pose_mask", torch.from_numpy(kinematic_mask(skeleton, cfg.attention_distance)))
        base = torch.eye(3).reshape(9) if cfg.rotation_head == "svd" else torch.tensor([1.0, 0, 0, 0, 1, 0])
        self.register_buffer("rot_offset", base)
        self.reset_parameters(seed)

    def reset_parameters(self, seed):
        """Uniform(+-1/sqrt(fan_in)) for linear layers, N(0, 1) embeddings.

        The read-outs start 100x smaller so initial rotations sit near the
        mean pose and shapes near zero.
        """
        g = torch_generator(seed, "init")
        with torch.no_grad():
            for name, mod in self.named_modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    if name.endswith("readout"):
                        bound *= 0.01
                    mod.weight.uniform_(-bound, bound, generator=g)
                    mod.bias.uniform_(-bound, bound, generator=g)
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.zero_()
            for p in (self.joint_ids, self.body_queries, self.shape_query):
                p.normal_(0.0, 1.0, generator=g)

    # -- stages ---------------------------------------------------------------
    def encode(self, keypoints, visible):
        """keypoints (B, J, 3), visible (B, J) -> tokens (B, J, D).

        Coordinates are centred on the visible centroid and multiplied by
        ``coord_scale``; hidden joints get a zero coordinate input and are
        never used as attention keys.
        """
        b, j, _ = keypoints.shape
        if j != self.cfg.j_in:
            raise ShapeMismatch(f"expected {self.cfg.j_in} keypoints, got {j}")
        vis = visible.unsqueeze(-1)
        x = torch.where(vis, keypoints, torch.zeros_like(keypoints))
        n_vis = vis.sum(1, keepdim=True).clamp_min(1).to(x.dtype)
        centre = x.sum(1, keepdim=True) / n_vis
        x = torch.where(vis, x - centre, torch.zeros_like(x))
        x = x * self.cfg.coord_scale
        ids = self.joint_ids.unsqueeze(0).expand(b, -1, -1)
        h = self.embed(torch.cat([x, ids], -1))
        allowed = visible.unsqueeze(1)
        for blk in self.encoder:
            h = blk(h, allowed)
        return self.encoder_norm(h)

    def decode_pose(self, tokens, visible):
        """Raw per-joint rotation parameters (B, J_body, 9 or 6)."""
        b = tokens.shape[0]
        q = self.query_lift(self.body_queries).unsqueeze(0).expand(b, -1, -1)
        self_allowed = self.pose_mask.unsqueeze(0)
        cross_allowed = visible.unsqueeze(1)
        for blk in self.pose_decoder:
            q = blk(q, tokens, self_allowed, cross_allowed)
        return self.pose_head(self.pose_norm(q)) + self.rot_offset

    def decode_shape(self, tokens, visible):
        b = tokens.shape[0]
        q = self.query_lift(self.shape_query).unsqueeze(0).expand(b, -1, -1)
        cross_allowed = visible.unsqueeze(1)
        for blk in self.shape_decoder:
            q = blk(q, tokens, None, cross_allowed)
        return self.shape_head(self.shape_norm(q))[:, 0]

    def rotations(self, raw, check=False):
        """Map raw head outputs to rotations (the normalised pose delta)."""
        if self.cfg.rotation_head == "svd":
            return symmetric_orthogonalize(raw.reshape(raw.shape[:-1] + (3, 3)), check)
        return sixdof_to_rotation(raw)

    def forward(self, keypoints, visible, check=False):
        tokens = self.encode(keypoints, visible)
        delta = self.rotations(self.decode_pose(tokens, visible), check)
        return delta, self.decode_shape(tokens, visible)


class Predictor:
    """Bundles a network with the body model, mean pose and keypoint regressor.

    ``theta_m`` (J_body, 3, 3) de-normalises the predicted delta and
    ``regressor_weights`` (J_in, V) maps vertices to keypoints. The root
    translation is solved in closed form: the regressor rows sum to one, so a
    translation shifts every keypoint equally and the least-squares offset is
    the mean residual over visible keypoints.
    """

    def __init__(self, net: SkelNet, model: BodyModel, theta_m, regressor_weights, keypoint_mirror_map=None):
        self.net = net
        self.model = model
        self.theta_m = np.asarray(theta_m, dtype=float)
        self.regressor_weights = np.asarray(regressor_weights, dtype=float)
        if keypoint_mirror_map is None:
            keypoint_mirror_map = model.skeleton.mirror_map
        self.keypoint_mirror_map = np.asarray(keypoint_mirror_map, dtype=np.int64)
        self._consts = {}

    def consts(self, dtype):
        if dtype not in self._consts:
            self._consts[dtype] = (torch.tensor(self.theta_m, dtype=dtype),
                                   torch.tensor(self.regressor_weights, dtype=dtype))
        return self._consts[dtype]

    def __call__(self, keypoints, visible, check=False, with_vertices=True):
        """Differentiable forward on tensors; returns a dict of batched outputs."""
        dtype = keypoints.dtype
        theta_m, W = self.consts(dtype)
        delta, betas = self.net(keypoints, visible, check)
        rots = theta_m @ delta
        bt = self.model.tensors(dtype)
        zero = torch.zeros(keypoints.shape[0], 3, dtype=dtype)
        fk = bt.forward(rots, betas, zero, with_vertices=True)
        kp0 = torch.einsum("jv,nvk->njk", W, fk["vertices"])
        vis = visible.unsqueeze(-1)
        n_vis = vis.sum(1).clamp_min(1).to(dtype)
        resid = torch.where(vis, keypoints - kp0, torch.zeros_like(kp0))
        trans = resid.sum(1) / n_vis
        out = {"delta": delta, "rotations": rots, "betas": betas, "translation": trans,
               "global_rotations": fk["global_rotations"],
               "joints": fk["joints"] + trans[:, None], "keypoints": kp0 + trans[:, None]}
        if with_vertices:
            out["vertices"] = fk["vertices"] + trans[:, None]
        return out

    def predict(self, keypoints, visible, batch_size=512):
        """Numpy-in, numpy-out inference without gradients."""
        keypoints = np.asarray(keypoints, dtype=float)
        visible = np.asarray(visible, dtype=bool)
        dtype = next(self.net.parameters()).dtype
        outs = []
        with torch.no_grad():
            for s in range(0, len(keypoints), batch_size):
                o = self(torch.as_tensor(keypoints[s:s + batch_size], dtype=dtype),
                         torch.as_tensor(visible[s:s + batch_size]), check=True)
                outs.append({k: v.double().numpy() for k, v in o.items()})
        return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}

    def predict_mirrored(self, keypoints, visible, batch_size=512):
        """Mirror test: average the prediction with the back-mirrored prediction on mirrored input."""
        from .. import rotmath as rm
        from ..bodymodel import mirror_points, mirror_rotations
        mirror_map = self.keypoint_mirror_map
        keypoints = np.asarray(keypoints, dtype=float)
        visible = np.asarray(visible, dtype=bool)
        a = self.predict(keypoints, visible, batch_size)
        b = self.predict(mirror_points(keypoints, mirror_map), visible[:, mirror_map], batch_size)
        skel = self.model.skeleton
        rb = mirror_rotations(skel, b["rotations"])
        qa = rm.matrix_to_quaternion(a["rotations"])
        qb = rm.matrix_to_quaternion(rb)
        rots = rm.quaternion_to_matrix(rm.quaternion_average(np.stack([qa, qb])))
        betas = 0.5 * (a["betas"] + b["betas"])
        trans_b = b["translation"] @ MIRROR
        return self.finish(rots, betas, keypoints, visible, 0.5 * (a["translation"] + trans_b))

    def finish(self, rots, betas, keypoints, visible, trans_guess=None):
        """FK for given rotations/shapes with the closed-form translation."""
        from ..bodymodel import fk_numpy
        n = len(rots)
        fk = fk_numpy(self.model, rots, betas, np.zeros((n, 3)))
        kp0 = np.einsum("jv,nvk->njk", self.regressor_weights, fk["vertices"])
        vis = visible[..., None]
        trans = np.where(vis, keypoints - kp0, 0.0).sum(1) / np.maximum(vis.sum(1), 1)
        return {"rotations": rots, "betas": betas, "translation": trans,
                "global_rotations": fk["global_rotations"], "joints": fk["joints"] + trans[:, None],
                "vertices": fk["vertices"] + trans[:, None], "keypoints": kp0 + trans[:, None]}


def encode(net: SkelNet, keypoints: KeypointFrame) -> torch.Tensor:
    """Tokens (J_in, D) for a single frame."""
    dtype = next(net.parameters()).dtype
    return net.encode(torch.as_tensor(keypoints.positions, dtype=dtype)[None],
                      torch.as_tensor(keypoints.visible)[None])[0]


def forward(predictor: Predictor, keypoints: KeypointFrame):
    """Single-frame inference: ``(PoseParams, ShapeParams, joints, vertices)``."""
    out = predictor.predict(keypoints.positions[None], keypoints.visible[None])
    pose = PoseParams(out["rotations"][0], out["translation"][0])
    return pose, ShapeParams(out["betas"][0]), out["joints"][0], out["vertices"][0]


def mirror_test_infer(predictor: Predictor, keypoints: KeypointFrame):
    """Single-frame mirror-test inference: ``(PoseParams, ShapeParams)``."""
    out = predictor.predict_mirrored(keypoints.positions[None], keypoints.visible[None])
    return PoseParams(out["rotations"][0], out["translation"][0]), ShapeParams(out["betas"][0])


CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, predictor: Predictor, meta=None):
    """Config, every parameter tensor, mean pose and regressor weights in one container."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in predictor.net.state_dict().items()
              if k not in ("pose_mask", "rot_offset")}
    arrays["theta_m"] = predictor.theta_m
    arrays["regressor_weights"] = predictor.regressor_weights
    arrays["keypoint_mirror_map"] = predictor.keypoint_mirror_map
    head = {"config": predictor.net.cfg.to_dict(),
            "dtype": str(next(predictor.net.parameters()).dtype).replace("torch.", ""), **(meta or {})}
    from ..fileio import write_container
    write_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, head, arrays)


def load_checkpoint(path, model: BodyModel):
    """Rebuild the :class:`Predictor`; returns ``(predictor, meta)``."""
    from ..fileio import read_container
    meta, arrays = read_container(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
    cfg = SkelNetConfig.from_dict(meta["config"])
    net = SkelNet(cfg, model.skeleton).to(getattr(torch, meta["dtype"]))
    state = net.state_dict()
    for k in list(state):
        if f"param/{k}" in arrays:
            state[k] = torch.from_numpy(arrays[f"param/{k}"])
    net.load_state_dict(state)
    net.eval()
    pred = Predictor(net, model, arrays["theta_m"], arrays["regressor_weights"], arrays["keypoint_mirror_map"])
    return pred, meta
