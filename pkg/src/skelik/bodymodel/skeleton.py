"""Kinematic tree description and the default 24-joint toy layout."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

# y is up, +x is the body's left side; mirroring reflects x.
MIRROR = np.diag([-1.0, 1.0, 1.0])

TOY_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]
TOY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
# left/midline offsets in metres; right side is generated by mirroring
_TOY_OFFSETS = {
    "pelvis": (0.0, 0.0, 0.0),
    "l_hip": (0.09, -0.08, 0.0),
    "spine1": (0.0, 0.11, -0.01),
    "l_knee": (0.01, -0.38, 0.0),
    "spine2": (0.0, 0.13, 0.01),
    "l_ankle": (0.0, -0.40, -0.03),
    "spine3": (0.0, 0.06, 0.0),
    "l_foot": (0.0, -0.05, 0.12),
    "neck": (0.0, 0.21, -0.02),
    "l_collar": (0.07, 0.11, -0.01),
    "head": (0.0, 0.09, 0.05),
    "l_shoulder": (0.11, 0.03, -0.01),
    "l_elbow": (0.25, 0.0, 0.0),
    "l_wrist": (0.25, 0.0, 0.0),
    "l_hand": (0.08, 0.0, 0.0),
}

# tree distance is measured on this skeleton; see skelnet.masks
ENDPOINT_NAMES = ("head", "l_wrist", "r_wrist", "l_ankle", "r_ankle", "pelvis", "spine3")


def _mirror_name(name: str) -> str:
    if name.startswith("l_"):
        return "r_" + name[2:]
    if name.startswith("r_"):
        return "l_" + name[2:]
    return name


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray
    rest_offsets: np.ndarray
    names: list = field(default_factory=list)
    mirror_map: np.ndarray = None

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", np.asarray(self.rest_offsets, dtype=float))
        n = len(parents)
        if parents[0] != -1 or np.any(parents[1:] < 0):
            raise ValueError("joint 0 must be the only root")
        if np.any(parents[1:] >= np.arange(1, n)):
            raise ValueError("parents must precede their children")
        mm = np.arange(n) if self.mirror_map is None else np.asarray(self.mirror_map, dtype=np.int64)
        if not np.array_equal(mm[mm], np.arange(n)):
            raise ValueError("mirror map must be an involution")
        object.__setattr__(self, "mirror_map", mm)
        if not self.names:
            object.__setattr__(self, "names", [f"j{i}" for i in range(n)])

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.nonzero(self.parents == j)[0]]

    def rest_joints(self) -> np.ndarray:
        """Rest-pose joint positions from cumulative offsets."""
        out = np.zeros((self.n_joints, 3))
        out[0] = self.rest_offsets[0]
        for j in range(1, self.n_joints):
            out[j] = out[self.parents[j]] + self.rest_offsets[j]
        return out

    def tree_distances(self) -> np.ndarray:
        """All-pairs hop counts in the kinematic tree (BFS from every joint)."""
        n = self.n_joints
        adj = [[] for _ in range(n)]
        for j in range(1, n):
            p = int(self.parents[j])
            adj[j].append(p)
            adj[p].append(j)
        dist = np.full((n, n), -1, dtype=np.int64)
        for s in range(n):
            dist[s, s] = 0
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if dist[s, v] < 0:
                        dist[s, v] = dist[s, u] + 1
                        queue.append(v)
        return dist

    def to_dict(self) -> dict:
        return {
            "parents": self.parents.tolist(),
            "rest_offsets": self.rest_offsets.tolist(),
            "names": list(self.names),
            "mirror_map": self.mirror_map.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(np.array(d["parents"]), np.array(d["rest_offsets"]), list(d["names"]),
                   np.array(d["mirror_map"]))


def toy_skeleton() -> Skeleton:
    offsets = np.zeros((len(TOY_NAMES), 3))
    for i, name in enumerate(TOY_NAMES):
        if name in _TOY_OFFSETS:
            offsets[i] = _TOY_OFFSETS[name]
        else:
            offsets[i] = MIRROR @ np.array(_TOY_OFFSETS[_mirror_name(name)])
    mirror = [TOY_NAMES.index(_mirror_name(n)) for n in TOY_NAMES]
    return Skeleton(np.array(TOY_PARENTS), offsets, list(TOY_NAMES), np.array(mirror))


@dataclass(frozen=True)
class KeypointLayout:
    """Input keypoint configuration: which body joint each keypoint sits near."""

    names: list
    source_joints: np.ndarray
    mirror_map: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source_joints", np.asarray(self.source_joints, dtype=np.int64))
        object.__setattr__(self, "mirror_map", np.asarray(self.mirror_map, dtype=np.int64))
        mm = self.mirror_map
        if not np.array_equal(mm[mm], np.arange(len(mm))):
            raise ValueError("keypoint mirror map must be an involution")

    @property
    def n_keypoints(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "source_joints": self.source_joints.tolist(),
                "mirror_map": self.mirror_map.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointLayout":
        return cls(list(d["names"]), np.array(d["source_joints"]), np.array(d["mirror_map"]))


def identity_layout(skel: Skeleton) -> KeypointLayout:
    return KeypointLayout(list(skel.names), np.arange(skel.n_joints), skel.mirror_map.copy())


H36M_NAMES = [
    "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine",
    "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist",
]
_H36M_SOURCES = [
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine2",
    "spine3", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist",
]


def h36m_layout(skel: Skeleton | None = None) -> KeypointLayout:
    """17-keypoint subset laid out like the Human3.6M joint set."""
    skel = skel or toy_skeleton()
    src = [skel.index(n) for n in _H36M_SOURCES]
    mirror = [H36M_NAMES.index(_mirror_name(n)) for n in H36M_NAMES]
    return KeypointLayout(list(H36M_NAMES), np.array(src), np.array(mirror))
