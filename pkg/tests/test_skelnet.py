import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import shortest_path

from skelik import rotmath as rm
from skelik.bodymodel import mirror_points
from skelik.errors import DegenerateInput, ShapeMismatch
from skelik.multiview import KeypointFrame
from skelik.skelnet import (DecoderBlock, EncoderBlock, FeedForward, MultiHeadAttention, OrthogonalizeStats,
                            Predictor, ResidualHead, SkelNet, SkelNetConfig, axis_angle_exp, encode, forward,
                            geodesic, grad_check, kinematic_mask, load_checkpoint, masked_softmax,
                            mirror_test_infer, save_checkpoint, sixdof_to_rotation, symmetric_orthogonalize)
from skelik.training import loss_terms

SMALL = dict(embed_dim=16, pos_embed_dim=8, ff_hidden=16, head_hidden=32, n_heads=2)


def make_net(model, dtype=torch.float64, seed=0, **kw):
    cfg = SkelNetConfig(**{**SMALL, **kw})
    return SkelNet(cfg, model.skeleton, seed=seed).to(dtype)


def inputs(model, small_ds, n=3, dtype=torch.float64, hide=()):
    kp = torch.as_tensor(small_ds.keypoints[:n], dtype=dtype)
    vis = torch.ones(n, model.n_joints, dtype=torch.bool)
    for j in hide:
        vis[:, j] = False
    return kp, vis


# rotation heads --------------------------------------------------------------

def test_orthogonalize_matches_numpy():
    M = torch.randn(50, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    R = symmetric_orthogonalize(M)
    np.testing.assert_allclose(R.numpy(), rm.symmetric_orthogonalize(M.numpy()), atol=1e-12)


def test_orthogonalize_gradcheck_including_negative_det():
    g = torch.Generator().manual_seed(1)
    M = torch.randn(6, 3, 3, dtype=torch.float64, generator=g)
    M[:3, :, 0] *= -1
    assert (torch.det(M) < 0).any()
    OrthogonalizeStats.reset()
    assert grad_check(symmetric_orthogonalize, [M]) < 1e-4
    assert OrthogonalizeStats.fallbacks == 0


def test_orthogonalize_straight_through_fallback():
    OrthogonalizeStats.reset()
    M = torch.tensor(np.diag([2.0, 1.0, -1.0]), requires_grad=True)
    R = symmetric_orthogonalize(M)
    G = torch.arange(9.0, dtype=torch.float64).reshape(3, 3)
    (R * G).sum().backward()
    assert OrthogonalizeStats.fallbacks == 1
    np.testing.assert_array_equal(M.grad.numpy(), G.numpy())
    with pytest.raises(DegenerateInput):
        symmetric_orthogonalize(M.detach(), check=True)


def test_sixdof_gradcheck():
    v = torch.randn(5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    assert grad_check(sixdof_to_rotation, [v]) < 1e-4
    np.testing.assert_allclose(sixdof_to_rotation(v).detach().numpy(), rm.sixdof_to_rotation(v.detach().numpy()),
                               atol=1e-12)


def test_geodesic_matches_arccos_and_gradcheck():
    rng = np.random.default_rng(3)
    a, b = rm.random_rotations(rng, 20), rm.random_rotations(rng, 20)
    d = geodesic(torch.as_tensor(a), torch.as_tensor(b)).numpy()
    np.testing.assert_allclose(d, rm.geodesic_distance(a, b), atol=1e-7)
    keep = rm.geodesic_distance(a, b) < np.pi - 0.1
    A = torch.as_tensor(a[keep])
    B = torch.as_tensor(b[keep])
    assert grad_check(lambda x: geodesic(x, B), [A]) < 1e-4


def test_axis_angle_exp():
    w = torch.randn(10, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    np.testing.assert_allclose(axis_angle_exp(w).numpy(), rm.axis_angle_to_matrix(w.numpy()), atol=1e-12)
    assert grad_check(axis_angle_exp, [w]) < 1e-4
    assert grad_check(axis_angle_exp, [torch.full((2, 3), 1e-6, dtype=torch.float64)]) < 1e-4


# layers ------------------------------------------------------------------------

def layer_cases():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(2, 5, 8, dtype=torch.float64, generator=g)
    mem = torch.randn(2, 6, 8, dtype=torch.float64, generator=g)
    allowed = torch.rand(2, 5, 5, generator=g) > 0.3
    allowed |= torch.eye(5, dtype=torch.bool)
    cross = torch.rand(2, 1, 6, generator=g) > 0.3
    torch.manual_seed(0)
    return [
        (MultiHeadAttention(8, 2), lambda m: m(x, mem, cross)),
        (FeedForward(8, 12), lambda m: m(x)),
        (EncoderBlock(8, 2, 12), lambda m: m(x, allowed)),
        (DecoderBlock(8, 2, 12), lambda m: m(x, mem, allowed, cross)),
        (DecoderBlock(8, 2, 12, self_attention=False), lambda m: m(x, mem, None, cross)),
        (ResidualHead(8, 16, 9), lambda m: m(x)),
    ]


def test_linear_gradcheck():
    lin = torch.nn.Linear(4, 3).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    assert grad_check(lambda *_: lin(x), list(lin.parameters())) < 1e-6


@pytest.mark.parametrize("case", range(6))
def test_layer_gradcheck(case):
    mod, fn = layer_cases()[case]
    mod = mod.double()
    assert grad_check(lambda *_: fn(mod), list(mod.parameters()), max_entries=40) < 1e-4


def test_masked_softmax():
    s = torch.randn(2, 3, 4, dtype=torch.float64)
    allowed = torch.tensor([[True, False, True, False], [False] * 4, [True] * 4])
    w = masked_softmax(s, allowed)
    assert torch.all(w[:, ~allowed] == 0)
    np.testing.assert_allclose(w[:, 0].sum(-1).numpy(), 1.0)
    assert torch.all(w[:, 1] == 0)
    s2 = s.clone()
    s2[..., 1] = 1e6
    assert torch.equal(masked_softmax(s2, allowed)[:, 0], w[:, 0])


def test_kinematic_mask(model):
    skel = model.skeleton
    np.testing.assert_array_equal(kinematic_mask(skel, 1), np.eye(24, dtype=bool))
    m2 = kinematic_mask(skel, 2)
    for j in range(1, 24):
        assert m2[j, skel.parents[j]] and m2[skel.parents[j], j]
    adj = np.zeros((24, 24))
    for j in range(1, 24):
        adj[j, skel.parents[j]] = adj[skel.parents[j], j] = 1
    oracle = shortest_path(adj, unweighted=True, directed=False)
    np.testing.assert_array_equal(kinematic_mask(skel, 4), oracle < 4)
    assert kinematic_mask(skel, None).all()
    with pytest.raises(ValueError):
        kinematic_mask(skel, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SkelNetConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        SkelNetConfig(attention_distance=0)
    with pytest.raises(ValueError):
        SkelNetConfig(rotation_head="quat")
    with pytest.raises(ValueError):
        SkelNetConfig(coord_scale=0.0)
    cfg = SkelNetConfig(rotation_head="sixdof", attention_distance=None)
    assert SkelNetConfig.from_dict(cfg.to_dict()) == cfg


# encoder -----------------------------------------------------------------------

def test_encode_occlusion_isolation(model, small_ds):
    net = make_net(model)
    kp, vis = inputs(model, small_ds, 2)
    vis[:] = False
    vis[:, 5] = True
    a = net.encode(kp, vis)
    kp2 = kp.clone()
    kp2[:, :5] += 3.0
    kp2[:, 6:] = torch.nan
    b = net.encode(kp2, vis)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_encode_masked_coordinates_bit_identical(model, small_ds, seed):
    rng = np.random.default_rng(seed)
    net = make_net(model)
    kp, vis = inputs(model, small_ds, 2)
    hidden = torch.as_tensor(rng.random((2, 24)) < 0.3)
    vis &= ~hidden
    kp2 = kp + torch.as_tensor(rng.normal(size=kp.shape)) * hidden.unsqueeze(-1)
    assert torch.equal(net.encode(kp, vis), net.encode(kp2, vis))
    delta, betas = net(kp, vis)
    delta2, betas2 = net(kp2, vis)
    assert torch.equal(delta, delta2) and torch.equal(betas, betas2)


def test_encode_permutation_equivariance(model, small_ds):
    net = make_net(model)
    kp, vis = inputs(model, small_ds, 2, hide=(3, 7))
    perm = torch.as_tensor(np.random.default_rng(0).permutation(24))
    a = net.encode(kp, vis)
    with torch.no_grad():
        net.joint_ids.copy_(net.joint_ids[perm])
    b = net.encode(kp[:, perm], vis[:, perm])
    torch.testing.assert_close(b, a[:, perm], atol=1e-12, rtol=0)
    with pytest.raises(ShapeMismatch):
        net.encode(kp[:, :10], vis[:, :10])


# decoders ----------------------------------------------------------------------

def test_decode_pose_mask_effect(model, small_ds):
    kp, vis = inputs(model, small_ds, 2)
    raw = {}
    for d in (1, 4):
        net = make_net(model, attention_distance=d)
        raw[d] = net.decode_pose(net.encode(kp, vis), vis)
    # same seed, same parameter layout: only the self-attention mask differs
    assert not torch.allclose(raw[1], raw[4])


def test_decode_zero_readout_deterministic(model, small_ds):
    net = make_net(model)
    with torch.no_grad():
        net.pose_head.readout.weight.zero_()
    kp, vis = inputs(model, small_ds, 2)
    raw = net.decode_pose(net.encode(kp, vis), vis)
    expect = net.pose_head.readout.bias + net.rot_offset
    torch.testing.assert_close(raw, expect.expand_as(raw), atol=0, rtol=0)
    assert torch.equal(raw, net.decode_pose(net.encode(kp, vis), vis))


def test_batch_independence(model, small_ds):
    net = make_net(model)
    kp, vis = inputs(model, small_ds, 1)
    kp2, vis2 = kp.repeat(2, 1, 1), vis.repeat(2, 1)
    d, b = net(kp2, vis2)
    assert torch.equal(d[0], d[1]) and torch.equal(b[0], b[1])


def test_decode_shape_only_through_cross_attention(model, small_ds):
    net = make_net(model)
    with torch.no_grad():
        for blk in net.shape_decoder:
            blk.cross.out.weight.zero_()
    kp, vis = inputs(model, small_ds, 1)
    a = net.decode_shape(net.encode(kp, vis), vis)
    vis2 = vis.clone()
    vis2[:, :20] = False
    b = net.decode_shape(net.encode(kp * 2, vis2), vis2)
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)
    assert a.shape == (1, 16)


def test_decode_shape_all_hidden_but_one(model, small_ds):
    net = make_net(model)
    kp, vis = inputs(model, small_ds, 1)
    vis[:] = False
    vis[:, 0] = True
    d, b = net(kp, vis)
    assert torch.isfinite(b).all() and torch.isfinite(d).all()


# forward -------------------------------------------------------------------------

@pytest.mark.parametrize("head", ["svd", "sixdof"])
def test_forward_outputs_rotations(model, small_ds, mean_pose, regressor, head):
    net = make_net(model, rotation_head=head)
    with torch.no_grad():
        for p in net.parameters():
            p.mul_(50.0)         # adversarial scale
    pred = Predictor(net, model, mean_pose.theta_m, regressor.weights)
    kp, vis = inputs(model, small_ds, 4, hide=(2,))
    out = pred.predict(kp.numpy(), vis.numpy())
    assert rm.is_rotation(out["rotations"], 1e-9)
    assert all(np.isfinite(v).all() for v in out.values())


def test_forward_single_frame(model, small_ds, mean_pose, regressor):
    pred = Predictor(make_net(model), model, mean_pose.theta_m, regressor.weights)
    frame = KeypointFrame(small_ds.keypoints[0], small_ds.visible[0])
    pose, shape, joints, verts = forward(pred, frame)
    assert pose.local_rotations.shape == (24, 3, 3) and shape.beta.shape == (16,)
    assert joints.shape == (24, 3) and verts.shape == (600, 3)
    assert encode(pred.net, frame).shape == (24, 16)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_translation_closed_form(model, small_ds, mean_pose, regressor, x, y, z):
    pred = Predictor(make_net(model), model, mean_pose.theta_m, regressor.weights)
    kp, vis = inputs(model, small_ds, 2, hide=(4,))
    t = np.array([x, y, z])
    a = pred.predict(kp.numpy(), vis.numpy())
    b = pred.predict(kp.numpy() + t, vis.numpy())
    np.testing.assert_allclose(b["rotations"], a["rotations"], atol=1e-9)
    np.testing.assert_allclose(b["translation"], a["translation"] + t, atol=1e-9)
    # least squares: mean visible residual is zero
    r = np.where(vis.numpy()[..., None], a["keypoints"] - kp.numpy(), 0).sum(1)
    np.testing.assert_allclose(r, 0, atol=1e-9)


def test_loss_through_forward_gradcheck(model, small_ds, mean_pose, regressor):
    net = make_net(model)
    pred = Predictor(net, model, mean_pose.theta_m, regressor.weights)
    kp, vis = inputs(model, small_ds, 2, hide=(1,))
    from skelik.bodymodel import fk_numpy
    gt = fk_numpy(model, small_ds.rotations[:2], small_ds.betas[:2], small_ds.translations[:2])
    target = {"rotations": torch.as_tensor(small_ds.rotations[:2]), "betas": torch.as_tensor(small_ds.betas[:2]),
              "keypoints": kp, "vertices": torch.as_tensor(gt["vertices"]),
              "global_rotations": torch.as_tensor(gt["global_rotations"])}

    def loss(*_):
        return loss_terms(pred(kp, vis), target)[0]

    params = [p for n, p in net.named_parameters() if "readout" in n or "embed" in n]
    assert grad_check(loss, params, max_entries=15) < 1e-3


def test_checkpoint_roundtrip(tmp_path, model, small_ds, mean_pose, regressor):
    net = make_net(model, dtype=torch.float32, seed=3)
    pred = Predictor(net, model, mean_pose.theta_m, regressor.weights)
    kp, vis = inputs(model, small_ds, 3, hide=(0,))
    before = pred.predict(kp.numpy(), vis.numpy())
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, pred, {"iter": 1})
    back, meta = load_checkpoint(p, model)
    after = back.predict(kp.numpy(), vis.numpy())
    for k in before:
        assert np.array_equal(before[k], after[k]), k
    assert meta["iter"] == 1
    p2 = tmp_path / "c2.ckpt"
    save_checkpoint(p2, back, {"iter": 1})
    assert p.read_bytes() == p2.read_bytes()


def test_seeded_init_deterministic(model):
    a, b = make_net(model, seed=7), make_net(model, seed=7)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = make_net(model, seed=8)
    assert not torch.equal(a.embed.weight, c.embed.weight)


# mirror test -----------------------------------------------------------------------

class _ConstNet(torch.nn.Module):
    """Stub network predicting the mean pose and zero shape for every input."""

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, kp, vis, check=False):
        b = kp.shape[0]
        return torch.eye(3, dtype=kp.dtype).expand(b, 24, 3, 3) + 0 * self.w, torch.zeros(b, 16, dtype=kp.dtype)


def test_mirror_test_fixed_point(model, small_ds, mean_pose, regressor):
    pred = Predictor(_ConstNet(), model, mean_pose.theta_m, regressor.weights)
    kp, vis = small_ds.keypoints[:4], small_ds.visible[:4]
    a = pred.predict(kp, vis)
    b = pred.predict_mirrored(kp, vis)
    np.testing.assert_allclose(b["rotations"], a["rotations"], atol=1e-6)
    np.testing.assert_allclose(b["joints"], a["joints"], atol=1e-6)


def test_mirror_test_equivariance(model, small_ds, mean_pose, regressor):
    # mirror-test output on mirrored input is the mirror of the output on the input
    pred = Predictor(make_net(model, seed=2), model, mean_pose.theta_m, regressor.weights)
    kp, vis = small_ds.keypoints[:3], small_ds.visible[:3]
    a = pred.predict_mirrored(kp, vis)
    mm = model.skeleton.mirror_map
    b = pred.predict_mirrored(mirror_points(kp, mm), vis[:, mm])
    np.testing.assert_allclose(b["joints"], mirror_points(a["joints"], mm), atol=1e-9)
    pose, shape = mirror_test_infer(pred, KeypointFrame(kp[0], vis[0]))
    np.testing.assert_allclose(pose.local_rotations, a["rotations"][0], atol=1e-12)
