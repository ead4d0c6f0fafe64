"""Regenerate the shipped triangulation example (calibration, detections, golden keypoints)."""
import os
import sys

import numpy as np

from skelik.bodymodel import build_toy_model, identity_layout, planted_regressor
from skelik.multiview import (CameraParams, project, save_calibration, save_detections, save_keypoint_stream,
                              triangulate_dlt)
from skelik.training import generate_synthetic_dataset

out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "..", "src", "skelik", "data")
model = build_toy_model(0)
reg = planted_regressor(model, identity_layout(model.skeleton))
ds = generate_synthetic_dataset(model, reg, 100, 0)
centre = np.array([0.0, 0.9, 0.0])
cams = [CameraParams.look_at(centre + 3.0 * np.array([np.sin(a), 0.3, np.cos(a)]), centre)
        for a in np.arange(4) * np.pi / 2 + 0.3]
rng = np.random.default_rng(0)
frames, truth = [], []
for fid in (0, 10, 20):
    kp = ds.keypoints[fid] - ds.keypoints[fid].mean(0) + centre
    uv = np.stack([project(c, kp) for c in cams])
    conf = rng.uniform(0.5, 1.0, uv.shape[:2])
    # occlude a few joints: one view dropped, or three views dropped (-> not visible)
    conf[1, 4] = 0.1
    conf[:3, 21] = 0.05
    frames.append((fid, np.concatenate([uv, conf[..., None]], axis=-1)))
    truth.append(kp)
os.makedirs(out, exist_ok=True)
save_calibration(os.path.join(out, "example_calibration.json"), cams)
save_detections(os.path.join(out, "example_detections.json"), frames)
tri = [(fid, triangulate_dlt(cams, a)) for fid, a in frames]
err = max(np.abs(f.positions[f.visible] - t[f.visible]).max() for (_, f), t in zip(tri, truth))
save_keypoint_stream(os.path.join(out, "example_keypoints_golden.txt"), tri)
print(f"max round-trip error {err:.2e} m")
