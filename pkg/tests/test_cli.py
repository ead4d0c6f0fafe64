import json
import os

import numpy as np
import pytest

import skelik
from skelik.cli import main
from skelik.training import consistency_error, load_dataset

DATA = os.path.join(os.path.dirname(skelik.__file__), "data")
TINY = ["--set", "train.total_iters=12", "--set", "train.warmup_iters=2", "--set", "train.batch_size=4",
        "--set", "train.val_every=6", "--set", "train.val_frames=8", "--set", "net.embed_dim=16",
        "--set", "net.pos_embed_dim=8", "--set", "net.ff_hidden=16", "--set", "net.head_hidden=32",
        "--set", "net.n_heads=2"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """gen-data + fit-regressor + a tiny train run shared by the tests below."""
    d = str(tmp_path_factory.mktemp("cli"))
    assert main(["--threads", "1", "gen-data", "--out", d, "--n", "1000", "--seed", "7"]) == 0
    assert main(["--threads", "1", "fit-regressor", "--out", d, "--seed", "7", "--samples", "500",
                 "--heldout", "100"]) == 0
    assert main(["--threads", "1", "train", "--out", d, "--seed", "7", *TINY]) == 0
    return d


def test_help(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("gen-data", "fit-regressor", "train", "infer", "triangulate", "sweep", "plot"):
        assert cmd in out
    assert main(["sweep", "--help"]) == 0
    assert "--solvers" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["fit-regressor", "--out", str(tmp_path), "--body-model", str(tmp_path / "none.bin")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--set", "bogus"]) == 2


def test_gen_data_deterministic(tmp_path, model, regressor):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["--threads", "1", "gen-data", "--out", str(d), "--n", "1000", "--seed", "7"]) == 0
    for f in ("dataset.bin", "body_model.bin", "gt_regressor.bin", "splits.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    from skelik.bodymodel import load_body_model, load_regressor
    ds = load_dataset(a / "dataset.bin")
    assert len(ds) == 1000
    assert consistency_error(load_body_model(a / "body_model.bin"), load_regressor(a / "gt_regressor.bin"), ds) < 1e-9


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("SKELIK_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--n", "60"]) == 0
    assert (tmp_path / "env" / "dataset.bin").exists()


def test_fit_regressor_report(run_dir, capsys):
    rep = json.load(open(os.path.join(run_dir, "regressor_report.json")))
    assert rep["heldout_mean_mm"] < 1.0
    assert rep["support_in_3_10"] >= 0.9
    assert len(rep["effective_support"]) == 24


def test_train_outputs(run_dir):
    t = os.path.join(run_dir, "train")
    for f in ("metrics.jsonl", "best.ckpt", "last.ckpt", "config.json", "training.svg"):
        assert os.path.exists(os.path.join(t, f)), f
    cfg = json.load(open(os.path.join(t, "config.json")))
    assert cfg["train"]["total_iters"] == 12 and cfg["preset"] == "desk"


def test_preset_printed(tmp_path, run_dir, capsys):
    capsys.readouterr()
    assert main(["--threads", "1", "train", "--out", run_dir, "--name", "p", "--preset", "paper", *TINY]) == 0
    out = capsys.readouterr().out
    assert "preset paper: batch_size=1024, warmup_iters=2000, total_iters=50000" in out


def test_infer_mirror_test(tmp_path, run_dir, capsys):
    ds = load_dataset(os.path.join(run_dir, "dataset.bin"))
    from skelik.multiview import KeypointFrame, save_keypoint_stream
    kp = tmp_path / "kp.txt"
    vis = ds.visible[:5].copy()
    vis[2, 4] = False
    save_keypoint_stream(kp, [(i, KeypointFrame(ds.keypoints[i], vis[i])) for i in range(5)])
    out = str(tmp_path / "o")
    assert main(["--threads", "1", "infer", "--out", out, "--body-model", os.path.join(run_dir, "body_model.bin"),
                 "--checkpoint", os.path.join(run_dir, "train", "best.ckpt"), "--keypoints", str(kp),
                 "--mirror-test"]) == 0
    text = capsys.readouterr().out
    assert "single:" in text and "mirror:" in text
    recs = [json.loads(x) for x in open(os.path.join(out, "infer_mirror.jsonl"))]
    single = [json.loads(x) for x in open(os.path.join(out, "infer_single.jsonl"))]
    assert [r["frame"] for r in recs] == list(range(5)) and len(single) == 5
    R = np.array(recs[0]["rotations"]).reshape(24, 3, 3)
    np.testing.assert_allclose(R @ np.swapaxes(R, -1, -2), np.broadcast_to(np.eye(3), (24, 3, 3)), atol=1e-9)
    # wrong keypoint count is a data error
    save_keypoint_stream(kp, [(0, KeypointFrame(ds.keypoints[0, :10], vis[0, :10]))])
    assert main(["infer", "--out", out, "--body-model", os.path.join(run_dir, "body_model.bin"),
                 "--checkpoint", os.path.join(run_dir, "train", "best.ckpt"), "--keypoints", str(kp)]) == 3


def test_triangulate_golden(tmp_path):
    out = tmp_path / "kp.txt"
    assert main(["triangulate", "--out", str(tmp_path), "--calibration", os.path.join(DATA, "example_calibration.json"),
                 "--detections", os.path.join(DATA, "example_detections.json"), "--output", str(out)]) == 0
    assert out.read_bytes() == open(os.path.join(DATA, "example_keypoints_golden.txt"), "rb").read()


def test_wrong_version_is_data_error(tmp_path, run_dir, capsys):
    raw = open(os.path.join(run_dir, "body_model.bin"), "rb").read()
    i = raw.index(b'"version":1')
    bad = tmp_path / "bad.bin"
    bad.write_bytes(raw[:i] + b'"version":7' + raw[i + 11:])
    assert main(["fit-regressor", "--out", str(tmp_path), "--body-model", str(bad),
                 "--dataset", os.path.join(run_dir, "dataset.bin")]) == 3
    assert "expected version 1" in capsys.readouterr().err
    cal = json.load(open(os.path.join(DATA, "example_calibration.json")))
    cal["version"] = 99
    (tmp_path / "cal.json").write_text(json.dumps(cal))
    assert main(["triangulate", "--out", str(tmp_path), "--calibration", str(tmp_path / "cal.json"),
                 "--detections", os.path.join(DATA, "example_detections.json")]) == 3


def test_sweep_and_plot(run_dir, capsys):
    args = ["--threads", "1", "sweep", "--out", run_dir, "--solvers", "net,net+mirror,baseline,baseline-netinit",
            "--axes", "endpoints", "--seeds", "0,1", "--frames", "3", "--set", "fit.max_iters=5"]
    assert main(args) == 0
    first = open(os.path.join(run_dir, "sweep", "endpoints.json"), "rb").read()
    assert main(args) == 0
    assert open(os.path.join(run_dir, "sweep", "endpoints.json"), "rb").read() == first
    csv_text = open(os.path.join(run_dir, "sweep", "endpoints.csv")).read()
    assert csv_text.startswith("axis,value,solver,metric,score\n")
    assert main(["plot", "--out", run_dir]) == 0
    plots = os.listdir(os.path.join(run_dir, "plots"))
    assert {"endpoints_mpjpe.svg", "endpoints_pa_mpjpe.svg", "endpoints_rot_error.svg", "training.svg"} <= set(plots)
    assert main(["sweep", "--out", run_dir, "--solvers", "oracle"]) == 2
    assert main(["plot", "--out", run_dir, "--table", "missing.csv"]) == 2
