"""Pinhole cameras, projection and DLT triangulation of multi-view keypoints."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, ShapeMismatch

DEFAULT_CONF_THRESHOLD = 0.3


def _cross(a, b):
    # np.cross carries heavy axis handling for single 3-vectors
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@dataclass(frozen=True)
class CameraParams:
    intrinsics: np.ndarray
    extrinsic_rotation: np.ndarray
    extrinsic_translation: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsic_rotation", np.asarray(self.extrinsic_rotation, dtype=float))
        object.__setattr__(self, "extrinsic_translation", np.asarray(self.extrinsic_translation, dtype=float))
        if K.shape != (3, 3) or abs(K[2, 2] - 1.0) > 1e-12 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1 and positive focals")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper triangular")

    @property
    def projection(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.extrinsic_rotation, self.extrinsic_translation[:, None]])

    @classmethod
    def look_at(cls, eye, target, focal=1000.0, principal=(640.0, 480.0), up=(0.0, 1.0, 0.0)):
        """Camera at ``eye`` looking at ``target`` (z forward, y down in the image)."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = _cross(z, np.asarray(up, dtype=float))
        x /= np.linalg.norm(x)
        y = _cross(z, x)
        R = np.stack([x, y, z])
        K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye)


@dataclass(frozen=True)
class Detection2D:
    uv: np.ndarray
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "uv", np.asarray(self.uv, dtype=float))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class KeypointFrame:
    positions: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "visible", np.asarray(self.visible, dtype=bool))
        if self.positions.shape != (len(self.visible), 3):
            raise ShapeMismatch("positions must be J x 3 with one visibility flag per joint")

    @property
    def n_joints(self) -> int:
        return len(self.visible)


def project(cam: CameraParams, point) -> np.ndarray:
    """Pixel coordinates of a world point (or ``(N, 3)`` points)."""
    X = np.asarray(point, dtype=float)
    pc = X @ cam.extrinsic_rotation.T + cam.extrinsic_translation
    depth = pc[..., 2]
    if np.any(depth <= 1e-9):
        raise BehindCamera("point is not in front of the camera")
    uvw = pc @ cam.intrinsics.T
    return uvw[..., :2] / uvw[..., 2:3]


def _dlt_point(normalized_P, uv_norm):
    rows = []
    for P, (u, v) in zip(normalized_P, uv_norm):
        r1 = u * P[2] - P[0]
        r2 = v * P[2] - P[1]
        rows.append(r1 / np.linalg.norm(r1))
        rows.append(r2 / np.linalg.norm(r2))
    A = np.asarray(rows)
    _u, _s, vt = np.linalg.svd(A)
    X = vt[-1]
    return X[:3] / X[3]


def _as_arrays(dets):
    """Accept nested Detection2D lists or an ``(C, J, 3)`` array of (u, v, conf)."""
    if isinstance(dets, np.ndarray):
        arr = np.asarray(dets, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeMismatch("detections array must be cameras x joints x 3")
        return arr[..., :2], arr[..., 2]
    lengths = {len(view) for view in dets}
    if len(lengths) > 1:
        raise ShapeMismatch("every camera must report the same number of joints")
    uv = np.array([[d.uv for d in view] for view in dets], dtype=float)
    conf = np.array([[d.confidence for d in view] for view in dets], dtype=float)
    return uv, conf


def triangulate_dlt(cams, dets, conf_threshold=DEFAULT_CONF_THRESHOLD) -> KeypointFrame:
    """Triangulate every joint from the views whose confidence clears the threshold.

    ``dets[c][j]`` is the detection of joint j in camera c. Joints with fewer
    than two usable views come back non-visible with position zero. Image
    points are preconditioned by each camera's intrinsics before the SVD.
    """
    if len(cams) < 1:
        raise ShapeMismatch("need at least one camera")
    uv, conf = _as_arrays(dets)
    if uv.shape[0] != len(cams):
        raise ShapeMismatch("one detection list per camera is required")
    n_j = uv.shape[1]
    Kinv = [np.linalg.inv(c.intrinsics) for c in cams]
    normP = [np.hstack([c.extrinsic_rotation, c.extrinsic_translation[:, None]]) for c in cams]
    uvn = np.stack([(np.c_[uv[i], np.ones(n_j)] @ Kinv[i].T)[:, :2] for i in range(len(cams))])
    positions = np.zeros((n_j, 3))
    visible = np.zeros(n_j, bool)
    for j in range(n_j):
        use = [i for i in range(len(cams)) if conf[i, j] >= conf_threshold]
        if len(use) < 2:
            continue
        # canonical row order makes the result independent of camera order bit for bit
        use.sort(key=lambda i: tuple(normP[i].ravel()) + tuple(uvn[i, j]))
        positions[j] = _dlt_point([normP[i] for i in use], [uvn[i, j] for i in use])
        visible[j] = True
    return KeypointFrame(positions, visible)


# ---------------------------------------------------------------------------
# calibration files

CALIBRATION_VERSION = 1


def save_calibration(path, cams, names=None):
    """JSON document: ``{"version", "cameras": [{"name", "intrinsics", "rotation", "translation"}]}``.

    ``intrinsics`` and ``rotation`` are 9 row-major entries, ``translation`` 3.
    """
    names = names or [f"cam{i}" for i in range(len(cams))]
    doc = {"version": CALIBRATION_VERSION, "cameras": [
        {"name": n, "intrinsics": c.intrinsics.ravel().tolist(),
         "rotation": c.extrinsic_rotation.ravel().tolist(),
         "translation": c.extrinsic_translation.tolist()}
        for n, c in zip(names, cams)]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_calibration(path):
    from .errors import FormatError
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CALIBRATION_VERSION:
        raise FormatError(f"{path}: calibration version {doc.get('version')}, expected version {CALIBRATION_VERSION}")
    cams = []
    for c in doc["cameras"]:
        cams.append(CameraParams(np.reshape(c["intrinsics"], (3, 3)), np.reshape(c["rotation"], (3, 3)),
                                 np.asarray(c["translation"])))
    return cams


DETECTIONS_VERSION = 1


def save_detections(path, frames):
    """Detections JSON: per frame, per camera, J rows of ``[u, v, confidence]``.

    ``frames`` is a list of ``(frame_id, array (C, J, 3))``.
    """
    doc = {"version": DETECTIONS_VERSION,
           "frames": [{"frame": int(fid), "cameras": np.asarray(a, dtype=float).tolist()} for fid, a in frames]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_detections(path):
    from .errors import FormatError
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != DETECTIONS_VERSION:
        raise FormatError(f"{path}: detections version {doc.get('version')}, expected version {DETECTIONS_VERSION}")
    return [(f["frame"], np.asarray(f["cameras"], dtype=float)) for f in doc["frames"]]


# ---------------------------------------------------------------------------
# keypoint streams: one whitespace-separated record per line,
# ``frame_id J x y z visible ...``


def format_keypoint_record(frame_id: int, frame: KeypointFrame) -> str:
    vals = [str(int(frame_id)), str(frame.n_joints)]
    for p, v in zip(frame.positions, frame.visible):
        vals += [repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), "1" if v else "0"]
    return " ".join(vals)


def parse_keypoint_record(line: str):
    from .errors import FormatError
    tok = line.split()
    try:
        fid, n = int(tok[0]), int(tok[1])
        if len(tok) != 2 + 4 * n:
            raise FormatError(f"record for frame {fid} declares {n} joints but has {len(tok) - 2} values")
        a = np.array(tok[2:], dtype=float).reshape(n, 4)
    except (ValueError, IndexError) as e:
        raise FormatError(f"malformed keypoint record: {e}") from None
    if not np.all(np.isin(a[:, 3], (0.0, 1.0))):
        raise FormatError(f"visibility flags of frame {fid} must be 0 or 1")
    if not np.all(np.isfinite(a[:, :3])):
        raise FormatError(f"non-finite keypoint in frame {fid}")
    return fid, KeypointFrame(a[:, :3], a[:, 3] > 0.5)


def save_keypoint_stream(path, frames):
    """``frames`` is an iterable of ``(frame_id, KeypointFrame)``."""
    with open(path, "w") as fh:
        for fid, f in frames:
            fh.write(format_keypoint_record(fid, f) + "\n")


def load_keypoint_stream(path):
    with open(path) as fh:
        return [parse_keypoint_record(line) for line in fh if line.strip() and not line.startswith("#")]
