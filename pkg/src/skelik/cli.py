"""Command-line entry point: ``skelik <subcommand>`` (see ``--help``).

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure. Outputs go to
``--out``, else ``$SKELIK_OUT``, else ``./skelik-out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "SKELIK_OUT"
DEFAULT_OUT = "skelik-out"

# default artifact names inside the output directory
BODY_MODEL = "body_model.bin"
GT_REGRESSOR = "gt_regressor.bin"
DATASET = "dataset.bin"
SPLITS = "splits.json"
REGRESSOR = "regressor.bin"
REGRESSOR_REPORT = "regressor_report.json"
TRAIN_DIR = "train"
SWEEP_DIR = "sweep"
PLOT_DIR = "plots"


class UsageError(Exception):
    pass


def _out_dir(args) -> str:
    d = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(d, exist_ok=True)
    return d


def _input(args, name, default):
    """Resolve an input path (flag or default inside the output dir) and require it to exist."""
    p = getattr(args, name, None) or os.path.join(_out_dir(args), default)
    if not os.path.exists(p):
        raise UsageError(f"--{name.replace('_', '-')}: {p} does not exist")
    return p


def _say(*a):
    print(*a, flush=True)


def _parse_overrides(items):
    """``section.key=value`` pairs (value parsed as JSON when possible)."""
    out = {"train": {}, "aug": {}, "net": {}, "fit": {}}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        sec, key = k.split(".", 1)
        if sec not in out:
            raise UsageError(f"--set section must be one of {', '.join(out)}")
        try:
            out[sec][key] = json.loads(v)
        except json.JSONDecodeError:
            out[sec][key] = v
    return out


def _build(cls, values, what):
    names = {f.name for f in fields(cls)}
    bad = sorted(set(values) - names)
    if bad:
        raise UsageError(f"unknown {what} option(s): {', '.join(bad)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {what} options: {e}") from None


def _preset_configs(args):
    from .ikbaseline import FitConfig
    from .skelnet import SkelNetConfig
    from .training import PRESETS, AugmentConfig, TrainConfig
    ov = _parse_overrides(args.set)
    tc = _build(TrainConfig, {**PRESETS[args.preset], "seed": args.seed, **ov["train"]}, "train")
    return (tc, _build(AugmentConfig, ov["aug"], "aug"), _build(SkelNetConfig, ov["net"], "net"),
            _build(FitConfig, ov["fit"], "fit"))


def _print_preset(args, tc):
    from .training import PRESETS
    _say(f"preset {args.preset}: " + ", ".join(f"{k}={v}" for k, v in PRESETS[args.preset].items())
         + f"; seed={tc.seed}")


def _load_model(args):
    from .bodymodel import load_body_model
    return load_body_model(_input(args, "body_model", BODY_MODEL))


# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from .bodymodel import build_toy_model, identity_layout, planted_regressor, save_body_model, save_regressor
    from .training import consistency_error, generate_synthetic_dataset, save_dataset, write_split_manifest
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = _out_dir(args)
    if args.body_model:
        model = _load_model(args)
    else:
        model = build_toy_model(args.seed)
        save_body_model(os.path.join(out, BODY_MODEL), model)
    reg = planted_regressor(model, identity_layout(model.skeleton), seed=args.seed)
    save_regressor(os.path.join(out, GT_REGRESSOR), reg, {"planted": True, "seed": args.seed})
    ds = generate_synthetic_dataset(model, reg, args.n, args.seed)
    err = consistency_error(model, reg, ds)
    path = os.path.join(out, DATASET)
    save_dataset(path, ds, {"seed": args.seed})
    write_split_manifest(os.path.join(out, SPLITS), ds, DATASET)
    c = ds.counts()
    _say(f"gen-data: {len(ds)} frames (train {c['train']}, val {c['val']}, test {c['test']}), "
         f"consistency {err:.1e} m -> {path}")
    return EXIT_OK


def cmd_fit_regressor(args):
    from .bodymodel import effective_support, fit_regressor, fk_numpy, regress_keypoints, save_regressor
    from .rng import stream
    from .training import load_dataset
    if args.samples < 1 or args.heldout < 1:
        raise UsageError("--samples and --heldout must be positive")
    model = _load_model(args)
    ds = load_dataset(_input(args, "dataset", DATASET))
    out = _out_dir(args)
    rng = stream(args.seed, "regressor")
    tr, va = ds.indices("train"), ds.indices("val")
    if len(tr) < args.samples or len(va) < 1:
        raise UsageError(f"dataset has {len(tr)} train / {len(va)} val frames; need {args.samples} / 1")
    pick = np.sort(rng.choice(tr, args.samples, replace=False))
    hold = np.sort(rng.choice(va, min(args.heldout, len(va)), replace=False))
    verts = fk_numpy(model, ds.rotations[pick], ds.betas[pick], ds.translations[pick])["vertices"]
    samples = [(None, None, k) for k in ds.keypoints[pick]]
    reg, res = fit_regressor(model, samples, temperature=args.temperature, vertices=verts, return_result=True)
    hv = fk_numpy(model, ds.rotations[hold], ds.betas[hold], ds.translations[hold])["vertices"]
    held = np.linalg.norm(regress_keypoints(reg, hv) - ds.keypoints[hold], axis=-1) * 1000.0
    support = effective_support(reg.weights)
    path = os.path.join(out, REGRESSOR)
    save_regressor(path, reg, {"seed": args.seed, "samples": int(args.samples)})
    in_range = float(np.mean((support >= 3) & (support <= 10)))
    report = {"heldout_mean_mm": float(held.mean()), "heldout_max_mm": float(held.max()),
              "effective_support": support.round(4).tolist(), "support_in_3_10": in_range,
              "temperature": args.temperature, "samples": int(args.samples), "heldout": len(hold)}
    with open(os.path.join(out, REGRESSOR_REPORT), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    _say(f"fit-regressor: held-out error {held.mean():.4f} mm (max {held.max():.4f}); "
         f"support in [3,10] for {100 * in_range:.0f}% of keypoints; "
         f"support min/median/max {support.min():.1f}/{np.median(support):.1f}/{support.max():.1f} -> {path}")
    return EXIT_OK


def cmd_train(args):
    from .bodymodel import load_regressor
    from .plotting import plot_training_log
    from .training import load_dataset, train
    tc, aug, net_cfg, _ = _preset_configs(args)
    _print_preset(args, tc)
    model = _load_model(args)
    reg = load_regressor(_input(args, "regressor", REGRESSOR))
    ds = load_dataset(_input(args, "dataset", DATASET))
    out = os.path.join(_out_dir(args), args.name)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({"preset": args.preset, "train": tc.to_dict(), "aug": aug.to_dict(),
                   "net": net_cfg.to_dict()}, fh, indent=1, sort_keys=True)
    tr, va = ds.subset(ds.indices("train")), ds.subset(ds.indices("val"))
    every = max(1, tc.total_iters // 20)

    def progress(it, rec, el):
        if it % every == 0:
            _say(f"  iter {it}/{tc.total_iters} loss {rec['loss']:.4f} (rot {rec['rotation']:.3f} "
                 f"pos {rec['position']:.4f} shape {rec['shape']:.3f}) lr {rec['lr']:.2e} {el:.0f}s")

    t0 = time.time()
    res = train(model, reg.weights, tr, va, net_cfg, tc, aug, out_dir=out, progress=progress)
    el = time.time() - t0
    plot_training_log(os.path.join(out, "metrics.jsonl"), os.path.join(out, "training.svg"))
    best = res.best_val or {}
    _say(f"train: {tc.total_iters} iters in {el:.0f}s; best val MPJPE {best.get('mpjpe', float('nan')):.2f} mm "
         f"(rot {best.get('rot_error', float('nan')):.2f} deg) at iter {res.best_iter}; "
         f"svd fallbacks {res.fallbacks} -> {out}")
    return EXIT_OK


def _checkpoint(args, model):
    from .skelnet import load_checkpoint
    default = os.path.join(TRAIN_DIR, "best.ckpt")
    return load_checkpoint(_input(args, "checkpoint", default), model)


def _pose_record(fid, out, i):
    return {"frame": int(fid), "rotations": out["rotations"][i].reshape(-1, 9).round(12).tolist(),
            "translation": out["translation"][i].round(12).tolist(), "betas": out["betas"][i].round(12).tolist()}


def cmd_infer(args):
    from .multiview import load_keypoint_stream
    model = _load_model(args)
    predictor, _ = _checkpoint(args, model)
    frames = load_keypoint_stream(_input(args, "keypoints", "keypoints.txt"))
    if not frames:
        raise UsageError("keypoint stream is empty")
    n_in = predictor.regressor_weights.shape[0]
    for fid, f in frames:
        if f.n_joints != n_in:
            from .errors import ShapeMismatch
            raise ShapeMismatch(f"frame {fid} has {f.n_joints} keypoints, the network expects {n_in}")
    kp = np.stack([f.positions for _, f in frames])
    vis = np.stack([f.visible for _, f in frames])
    ids = [fid for fid, _ in frames]
    out_dir = _out_dir(args)
    runs = [("single", predictor.predict)]
    if args.mirror_test:
        runs.append(("mirror", predictor.predict_mirrored))
    summary = []
    for name, fn in runs:
        o = fn(kp, vis)
        path = os.path.join(out_dir, f"infer_{name}.jsonl")
        with open(path, "w") as fh:
            for i, fid in enumerate(ids):
                fh.write(json.dumps(_pose_record(fid, o, i)) + "\n")
        res = np.linalg.norm(o["keypoints"] - kp, axis=-1) * 1000.0
        summary.append(f"{name}: keypoint residual {res[vis].mean():.2f} mm -> {path}")
    _say(f"infer: {len(ids)} frames; " + "; ".join(summary))
    return EXIT_OK


def cmd_triangulate(args):
    from .multiview import load_calibration, load_detections, save_keypoint_stream, triangulate_dlt
    from .errors import ShapeMismatch
    cams = load_calibration(_input(args, "calibration", "calibration.json"))
    dets = load_detections(_input(args, "detections", "detections.json"))
    frames = []
    for fid, a in dets:
        if a.ndim != 3 or a.shape[0] != len(cams) or a.shape[2] != 3:
            raise ShapeMismatch(f"frame {fid}: detections must be (cameras={len(cams)}, J, 3)")
        if np.any((a[..., 2] < 0) | (a[..., 2] > 1)):
            raise ShapeMismatch(f"frame {fid}: confidences must lie in [0, 1]")
        frames.append((fid, triangulate_dlt(cams, a, args.conf_threshold)))
    path = args.output or os.path.join(_out_dir(args), "keypoints.txt")
    save_keypoint_stream(path, frames)
    n_vis = sum(int(f.visible.sum()) for _, f in frames)
    _say(f"triangulate: {len(frames)} frames, {n_vis} visible keypoints from {len(cams)} cameras -> {path}")
    return EXIT_OK


def _csv_list(s, cast=str):
    return [cast(x) for x in s.split(",") if x.strip()]


def cmd_sweep(args):
    from .bodymodel import load_regressor
    from .metrics import AXES, SOLVERS, endpoint_indices, make_solvers, run_sweep
    from .rng import stream
    from .bodymodel import identity_layout
    from .training import load_dataset
    tc, _, _, fit_cfg = _preset_configs(args)
    solvers = _csv_list(args.solvers)
    axes = _csv_list(args.axes)
    seeds = _csv_list(args.seeds, int)
    for s in solvers:
        if s not in SOLVERS:
            raise UsageError(f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}")
    for a in axes:
        if a not in AXES:
            raise UsageError(f"unknown axis {a!r}; choose from {', '.join(AXES)}")
    if not solvers or not axes or not seeds or args.frames < 1:
        raise UsageError("need at least one solver, axis, seed and frame")
    _print_preset(args, tc)
    model = _load_model(args)
    ds = load_dataset(_input(args, "dataset", DATASET))
    needs_net = any(s != "baseline" for s in solvers)
    predictor = _checkpoint(args, model)[0] if needs_net or args.checkpoint else None
    if predictor is not None:
        reg_w, theta_m = predictor.regressor_weights, predictor.theta_m
    else:
        from .training import compute_mean_pose
        reg_w = load_regressor(_input(args, "regressor", REGRESSOR)).weights
        theta_m = compute_mean_pose(model.skeleton, ds.rotations[ds.indices("train")]).theta_m
    test = ds.indices("test")
    if len(test) < 1:
        raise UsageError("dataset has no test frames")
    pick = np.sort(stream(args.seed, "sweep", 99).choice(test, min(args.frames, len(test)), replace=False))
    test_ds = ds.subset(pick)
    fns = make_solvers(solvers, model, reg_w, theta_m, predictor, fit_cfg)
    out = os.path.join(_out_dir(args), SWEEP_DIR)
    os.makedirs(out, exist_ok=True)
    eidx = endpoint_indices(identity_layout(model.skeleton), model.skeleton)
    lines = []
    for axis in axes:
        t0 = time.time()
        rep = run_sweep(fns, model, test_ds, axis, seeds=seeds, endpoint_idx=eidx,
                        config={"fit": fit_cfg.__dict__, "preset": args.preset})
        rep.save(os.path.join(out, f"{axis}.json"), os.path.join(out, f"{axis}.csv"))
        worst = {s: rep.curve(s)[-1] for s in solvers}
        lines.append(f"{axis} [{time.time() - t0:.0f}s] at {rep.values[-1]}: "
                     + ", ".join(f"{s} {v:.1f}mm" for s, v in worst.items()) + f", gt-noise {rep.gt_noise[-1]:.1f}mm")
    _say(f"sweep: {len(test_ds)} test frames, seeds {seeds} -> {out}\n  " + "\n  ".join(lines))
    return EXIT_OK


def cmd_plot(args):
    from .metrics import read_table
    from .plotting import plot_table, plot_training_log
    out = args.output or os.path.join(_out_dir(args), PLOT_DIR)
    tables = args.table or []
    if not tables:
        d = os.path.join(_out_dir(args), SWEEP_DIR)
        if os.path.isdir(d):
            tables = sorted(os.path.join(d, f) for f in os.listdir(d) if f.endswith(".csv"))
    if not tables:
        raise UsageError("no sweep tables given or found")
    rows = []
    for t in tables:
        if not os.path.exists(t):
            raise UsageError(f"--table: {t} does not exist")
        rows += read_table(t)
    paths = plot_table(rows, out, metrics=tuple(_csv_list(args.metrics)))
    log = args.log or os.path.join(_out_dir(args), TRAIN_DIR, "metrics.jsonl")
    if os.path.exists(log):
        paths.append(plot_training_log(log, os.path.join(out, "training.svg")))
    _say(f"plot: {len(paths)} figures -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelik", description=__doc__.split("\n")[0],
                                epilog=f"Output directory: --out, else ${OUT_ENV}, else ./{DEFAULT_OUT}. "
                                       "Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure.")
    p.add_argument("--threads", type=int, default=None, help="torch thread count (default: available cores)")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, preset=False):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--seed", type=int, default=0)
        if preset:
            sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="override a config value; sections: train, aug, net, fit")

    sp = sub.add_parser("gen-data", help="generate the synthetic motion dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=50000, help="number of frames")
    sp.add_argument("--body-model", help="existing body model (default: build the toy model from --seed)")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("fit-regressor", help="fit the softmax keypoint regressor")
    common(sp)
    sp.add_argument("--body-model")
    sp.add_argument("--dataset")
    sp.add_argument("--samples", type=int, default=1000, help="training bodies drawn from the train split")
    sp.add_argument("--heldout", type=int, default=500, help="held-out bodies drawn from the val split")
    sp.add_argument("--temperature", type=float, default=10.0)
    sp.set_defaults(fn=cmd_fit_regressor)

    sp = sub.add_parser("train", help="train the skeletal transformer")
    common(sp, preset=True)
    sp.add_argument("--body-model")
    sp.add_argument("--dataset")
    sp.add_argument("--regressor")
    sp.add_argument("--name", default=TRAIN_DIR, help="run sub-directory inside the output directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="predict pose and shape for a keypoint stream")
    common(sp)
    sp.add_argument("--body-model")
    sp.add_argument("--checkpoint")
    sp.add_argument("--keypoints", help="keypoint stream: frame J then J x (x y z visible) per line")
    sp.add_argument("--mirror-test", action="store_true", help="also write mirror-test predictions")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("triangulate", help="DLT-triangulate multi-view detections into a keypoint stream")
    common(sp)
    sp.add_argument("--calibration")
    sp.add_argument("--detections")
    sp.add_argument("--conf-threshold", type=float, default=0.3)
    sp.add_argument("--output", help="keypoint stream path (default OUT/keypoints.txt)")
    sp.set_defaults(fn=cmd_triangulate)

    sp = sub.add_parser("sweep", help="noise / occlusion / end-point robustness sweep")
    common(sp, preset=True)
    sp.add_argument("--body-model")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--regressor", help="used by a baseline-only sweep without a checkpoint")
    sp.add_argument("--solvers", default="net,net+mirror,baseline,baseline-netinit")
    sp.add_argument("--axes", default="noise_sigma_mm,occlusion_frac,endpoints")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--frames", type=int, default=48, help="test frames per sweep point")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("plot", help="render SVG charts from sweep tables and the training log")
    sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    sp.add_argument("--table", action="append", help="flat sweep table (default: OUT/sweep/*.csv)")
    sp.add_argument("--log", help="training metrics.jsonl (default: OUT/train/metrics.jsonl)")
    sp.add_argument("--metrics", default="mpjpe,pa_mpjpe,rot_error")
    sp.add_argument("--output", help="figure directory (default OUT/plots)")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    from .errors import AmbiguousAverage, DegenerateInput, FormatError, InsufficientConstraints, NonFinite, \
        ShapeMismatch
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    import torch
    threads = args.threads if args.threads else (os.cpu_count() or 1)
    if threads < 1:
        print("skelik: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(threads)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"skelik {args.cmd}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeMismatch, InsufficientConstraints, json.JSONDecodeError, KeyError) as e:
        print(f"skelik {args.cmd}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFinite, DegenerateInput, AmbiguousAverage, FloatingPointError) as e:
        print(f"skelik {args.cmd}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
