import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelik import rotmath as rm
from skelik.errors import BehindCamera, FormatError, ShapeMismatch
from skelik.multiview import (CameraParams, Detection2D, KeypointFrame, load_calibration, load_detections,
                              load_keypoint_stream, parse_keypoint_record, project, save_calibration,
                              save_keypoint_stream, triangulate_dlt)

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "skelik", "data")


def simple_cam(f=500.0, pp=(320.0, 240.0), R=np.eye(3), t=np.zeros(3)):
    K = np.array([[f, 0, pp[0]], [0, f, pp[1]], [0, 0, 1.0]])
    return CameraParams(K, R, t)


def rig(rng, n_cams=4, radius=3.0, focal=None):
    cams = []
    for a in rng.uniform(0, 2 * np.pi, n_cams):
        eye = radius * np.array([np.sin(a), rng.uniform(-0.3, 0.3), np.cos(a)])
        f = rng.uniform(500, 1500) if focal is None else focal
        cams.append(CameraParams.look_at(eye, rng.normal(scale=0.1, size=3), focal=f))
    return cams


def dets_for(cams, X, conf=None):
    uv = np.stack([project(c, X) for c in cams])
    c = np.ones(uv.shape[:2]) if conf is None else conf
    return np.concatenate([uv, c[..., None]], axis=-1)


def test_project_examples():
    cam = simple_cam()
    np.testing.assert_allclose(project(cam, [0, 0, 1.0]), [320, 240])
    np.testing.assert_allclose(project(cam, [0.1, 0, 1.0]), [370, 240])
    with pytest.raises(BehindCamera):
        project(cam, [0, 0, -1.0])


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraParams(np.diag([1.0, 1.0, 2.0]), np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        CameraParams(np.array([[1.0, 0, 0], [1.0, 1, 0], [0, 0, 1]]), np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Detection2D([0, 0], 1.5)


def test_dlt_four_views():
    rng = np.random.default_rng(0)
    cams = rig(rng)
    X = rng.normal(scale=0.5, size=(24, 3))
    f = triangulate_dlt(cams, dets_for(cams, X))
    assert f.visible.all()
    assert np.abs(f.positions - X).max() < 1e-7


def test_dlt_accepts_detection_objects():
    rng = np.random.default_rng(1)
    cams = rig(rng, 2)
    X = rng.normal(scale=0.5, size=(3, 3))
    d = dets_for(cams, X)
    nested = [[Detection2D(d[c, j, :2], d[c, j, 2]) for j in range(3)] for c in range(2)]
    np.testing.assert_array_equal(triangulate_dlt(cams, nested).positions, triangulate_dlt(cams, d).positions)
    with pytest.raises(ShapeMismatch):
        triangulate_dlt(cams, [nested[0], nested[1][:2]])


def test_dlt_low_confidence_marks_invisible():
    rng = np.random.default_rng(2)
    cams = rig(rng)
    X = rng.normal(scale=0.5, size=(2, 3))
    conf = np.ones((4, 2))
    conf[:3, 0] = 0.0
    f = triangulate_dlt(cams, dets_for(cams, X, conf), conf_threshold=0.5)
    assert not f.visible[0] and f.visible[1]
    np.testing.assert_array_equal(f.positions[0], 0.0)


def test_dlt_noise_regression_baseline():
    # median error with 2px noise over 1000 trials; measured 6.42 mm
    rng = np.random.default_rng(3)
    errs = []
    for _ in range(1000):
        cams = rig(rng, focal=1000.0)
        X = rng.normal(scale=0.3, size=(1, 3))
        d = dets_for(cams, X)
        d[..., :2] += rng.normal(scale=2.0, size=d[..., :2].shape)
        errs.append(np.linalg.norm(triangulate_dlt(cams, d).positions - X) * 1000)
    med = float(np.median(errs))
    assert med < 10.0
    assert med == pytest.approx(6.42, abs=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
def test_dlt_camera_permutation_exact(seed, perm):
    rng = np.random.default_rng(seed)
    cams = rig(rng)
    X = rng.normal(scale=0.5, size=(5, 3))
    d = dets_for(cams, X)
    d[..., :2] += rng.normal(scale=1.0, size=d[..., :2].shape)
    a = triangulate_dlt(cams, d)
    b = triangulate_dlt([cams[i] for i in perm], d[list(perm)])
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.visible, b.visible)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dlt_ignored_camera_exact(seed):
    rng = np.random.default_rng(seed)
    cams = rig(rng, 4)
    X = rng.normal(scale=0.5, size=(5, 3))
    d = dets_for(cams, X)
    d[..., :2] += rng.normal(scale=1.0, size=d[..., :2].shape)
    base = triangulate_dlt(cams[:3], d[:3])
    low = d.copy()
    low[3, :, 2] = 0.1
    extra = triangulate_dlt(cams, low)
    np.testing.assert_array_equal(base.positions, extra.positions)


def test_keypoint_frame_validation():
    with pytest.raises(ShapeMismatch):
        KeypointFrame(np.zeros((3, 3)), np.ones(4, bool))


def test_calibration_roundtrip(tmp_path):
    cams = rig(np.random.default_rng(5), 3)
    p = tmp_path / "cal.json"
    save_calibration(p, cams)
    back = load_calibration(p)
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.projection, b.projection)
    p.write_text(p.read_text().replace('"version": 1', '"version": 9'))
    with pytest.raises(FormatError, match="version 1"):
        load_calibration(p)


def test_keypoint_stream_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    frames = [(i, KeypointFrame(rng.normal(size=(5, 3)), rng.random(5) > 0.3)) for i in range(4)]
    p = tmp_path / "kp.txt"
    save_keypoint_stream(p, frames)
    back = load_keypoint_stream(p)
    for (i, a), (j, b) in zip(frames, back):
        assert i == j
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.visible, b.visible)
    for bad in ("0 2 1 2 3 1", "0 1 1 2 3 7", "x 1 1 2 3 1"):
        with pytest.raises(FormatError):
            parse_keypoint_record(bad)


def test_shipped_example_matches_golden():
    cams = load_calibration(os.path.join(DATA, "example_calibration.json"))
    dets = load_detections(os.path.join(DATA, "example_detections.json"))
    golden = load_keypoint_stream(os.path.join(DATA, "example_keypoints_golden.txt"))
    assert len(dets) == len(golden)
    for (fid, d), (gid, g) in zip(dets, golden):
        f = triangulate_dlt(cams, d)
        assert fid == gid
        np.testing.assert_array_equal(f.visible, g.visible)
        np.testing.assert_allclose(f.positions, g.positions, atol=1e-12)
        assert not g.visible[21] and g.visible[4]
