"""Noise, occlusion and end-point robustness sweeps over a test set."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ..bodymodel import fk_numpy
from ..rng import stream
from .evaluation import AUC_THRESHOLDS_MM, PCK_THRESHOLD_MM, EvalResult, evaluate_arrays

AXES = ("noise_sigma_mm", "occlusion_frac", "endpoints")
SOLVERS = ("net", "net+mirror", "baseline", "baseline-netinit")
GT_NOISE = "gt-noise"
FIELDS = ("mpjpe", "pa_mpjpe", "mpvpe", "pa_mpvpe", "pck150", "auc", "rot_error")
DEFAULT_VALUES = {
    "noise_sigma_mm": (0.0, 10.0, 20.0, 30.0, 40.0, 50.0),
    "occlusion_frac": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "endpoints": (7, 24),
}


def corrupt(axis: str, value, keypoints, visible, rng, endpoint_idx=None):
    """Corrupted copy of ``keypoints (F, K, 3)`` / ``visible (F, K)`` for one axis value.

    Noise adds isotropic Gaussian noise of ``value`` mm per coordinate.
    Occlusion hides ``round(value * K)`` keypoints per frame chosen uniformly.
    End-points keep only ``endpoint_idx`` when ``value`` equals its size and
    all keypoints when ``value`` equals ``K``.
    """
    kp = np.array(keypoints, dtype=float, copy=True)
    vis = np.array(visible, dtype=bool, copy=True)
    F, K = vis.shape
    if axis == "noise_sigma_mm":
        kp += rng.normal(0.0, 1.0, kp.shape) * (float(value) / 1000.0)
    elif axis == "occlusion_frac":
        n_hide = int(round(float(value) * K))
        order = np.argsort(rng.random((F, K)), axis=1, kind="stable")
        hide = np.zeros((F, K), dtype=bool)
        np.put_along_axis(hide, order[:, :n_hide], True, axis=1)
        vis &= ~hide
    elif axis == "endpoints":
        if int(value) != K:
            if endpoint_idx is None or int(value) != len(endpoint_idx):
                raise ValueError(f"end-point count {value} matches neither the end-point set nor all keypoints")
            keep = np.zeros(K, dtype=bool)
            keep[np.asarray(endpoint_idx)] = True
            vis &= keep
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return kp, vis


def _gt_noise(kp, clean, vis):
    """Mean distance (mm) of visible corrupted keypoints from their clean positions."""
    d = np.linalg.norm(kp - clean, axis=-1) * 1000.0
    return float(d[vis].mean()) if vis.any() else 0.0


def _mean_result(results):
    return EvalResult(*[float(np.mean([getattr(r, f) for r in results])) for f in FIELDS])


@dataclass
class SweepReport:
    axis: str
    values: list
    seeds: list
    results: dict                  # solver -> list (per value) of EvalResult averaged over seeds
    per_seed: dict                 # solver -> list (per value) of list (per seed) of EvalResult
    gt_noise: list                 # per value, mean over seeds
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if len(v) > 1 and not np.all(np.diff(v) > 0):
            raise ValueError("sweep axis values must be strictly increasing")

    def curve(self, solver: str, metric: str = "mpjpe") -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.results[solver]])

    def to_dict(self):
        return {
            "axis": self.axis, "values": list(self.values), "seeds": list(self.seeds),
            "results": {s: [r.to_dict() for r in rs] for s, rs in self.results.items()},
            "per_seed": {s: [[r.to_dict() for r in per] for per in rs] for s, rs in self.per_seed.items()},
            "gt_noise": list(self.gt_noise), "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        res = {s: [EvalResult(**r) for r in rs] for s, rs in d["results"].items()}
        per = {s: [[EvalResult(**r) for r in p] for p in rs] for s, rs in d["per_seed"].items()}
        return cls(d["axis"], d["values"], d["seeds"], res, per, d["gt_noise"], d.get("config", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def rows(self):
        """Flat table: one row per axis value x solver x metric (GT noise as its own solver)."""
        out = []
        for i, v in enumerate(self.values):
            for s in self.results:
                for f in FIELDS:
                    out.append((self.axis, v, s, f, getattr(self.results[s][i], f)))
            out.append((self.axis, v, GT_NOISE, "mpjpe", self.gt_noise[i]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("axis", "value", "solver", "metric", "score"))
        for r in self.rows():
            w.writerow(r[:4] + (repr(float(r[4])),))
        return buf.getvalue()

    def save(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(self.to_csv())


def load_report(path) -> SweepReport:
    with open(path) as fh:
        return SweepReport.from_dict(json.load(fh))


def read_table(path):
    """Rows of a flat sweep table as ``(axis, value, solver, metric, score)``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != ("axis", "value", "solver", "metric", "score"):
            raise ValueError(f"unexpected table header {header}")
        return [(a, float(v), s, m, float(x)) for a, v, s, m, x in r]


def run_sweep(solvers: dict, model, test_ds, axis: str, values=None, seeds=(0, 1, 2), endpoint_idx=None,
              root=0, pck_threshold=PCK_THRESHOLD_MM, auc_thresholds=AUC_THRESHOLDS_MM, progress=None,
              config=None) -> SweepReport:
    """Corrupt ``test_ds`` along ``axis`` and score every solver.

    ``solvers`` maps a name to ``factory(seed) -> solve``, where
    ``solve(keypoints, visible)`` returns a dict with ``joints``,
    ``rotations`` and ``vertices`` arrays. Factories let each seed use its own
    trained network. Corruption draws come from the ``sweep`` stream keyed by
    ``(seed, axis, value index)`` so every solver sees the same inputs.
    """
    if not solvers:
        raise ValueError("need at least one solver")
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    values = list(DEFAULT_VALUES[axis] if values is None else values)
    gt = fk_numpy(model, test_ds.rotations, test_ds.betas, test_ds.translations)
    per_seed = {s: [[] for _ in values] for s in solvers}
    gt_noise = [[] for _ in values]
    for seed in seeds:
        fns = {s: f(seed) for s, f in solvers.items()}
        for i, v in enumerate(values):
            rng = stream(seed, "sweep", AXES.index(axis), i)
            kp, vis = corrupt(axis, v, test_ds.keypoints, test_ds.visible, rng, endpoint_idx)
            gt_noise[i].append(_gt_noise(kp, test_ds.keypoints, vis))
            for s, fn in fns.items():
                out = fn(kp, vis)
                per_seed[s][i].append(evaluate_arrays(out["joints"], gt["joints"], out["rotations"],
                                                      test_ds.rotations, out["vertices"], gt["vertices"],
                                                      root, pck_threshold, auc_thresholds))
                if progress is not None:
                    progress(seed, v, s, per_seed[s][i][-1])
    results = {s: [_mean_result(p) for p in per] for s, per in per_seed.items()}
    cfg = {"n_frames": len(test_ds), "root": root, "pck_threshold": pck_threshold,
           "auc_thresholds": [float(t) for t in auc_thresholds], "solvers": list(solvers),
           **(config or {})}
    return SweepReport(axis, values, list(seeds), results, per_seed,
                       [float(np.mean(g)) for g in gt_noise], cfg)


def make_solvers(names, model, reg_weights, theta_m, predictors=None, fit_cfg=None):
    """Factories for the named solvers.

    ``predictors`` is a trained :class:`Predictor` or ``seed -> Predictor``;
    it is required by every solver except ``baseline``.
    """
    from ..ikbaseline import FitConfig, fit_batch

    fit_cfg = fit_cfg or FitConfig()
    get = predictors if callable(predictors) and not hasattr(predictors, "predict") else (lambda seed: predictors)

    def finish(res):
        out = fk_numpy(model, res.rotations, res.betas, res.translation)
        return {"joints": out["joints"], "rotations": res.rotations, "vertices": out["vertices"]}

    def net(seed, mirror):
        p = get(seed)
        if p is None:
            raise ValueError("network solvers need a trained predictor")
        return lambda kp, vis: (p.predict_mirrored if mirror else p.predict)(kp, vis)

    def baseline(seed):
        return lambda kp, vis: finish(fit_batch(model, reg_weights, theta_m, kp, vis, fit_cfg))

    def netinit(seed):
        p = get(seed)
        if p is None:
            raise ValueError("network solvers need a trained predictor")

        def solve(kp, vis):
            o = p.predict(kp, vis)
            return finish(fit_batch(model, reg_weights, theta_m, kp, vis, fit_cfg,
                                    init_rotations=o["rotations"], init_betas=o["betas"]))
        return solve

    table = {"net": lambda seed: net(seed, False), "net+mirror": lambda seed: net(seed, True),
             "baseline": baseline, "baseline-netinit": netinit}
    out = {}
    for n in names:
        if n not in table:
            raise ValueError(f"unknown solver {n!r}; choose from {', '.join(SOLVERS)}")
        out[n] = table[n]
    return out


def endpoint_indices(layout, skeleton) -> np.ndarray:
    """Keypoints whose source joint belongs to the end-point set."""
    from ..bodymodel import ENDPOINT_NAMES
    names = [skeleton.names[j] for j in layout.source_joints]
    return np.array([i for i, n in enumerate(names) if n in ENDPOINT_NAMES])
