"""Named, reproducible random streams derived from one seed."""
from __future__ import annotations

import numpy as np
import torch

# fixed integer keys; renaming a stream must not silently change its numbers
STREAMS = {"data": 1, "augment": 2, "init": 3, "sweep": 4, "regressor": 5, "batch": 6, "split": 7}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (optionally per item ``index``)."""
    key = (STREAMS[name],) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def torch_generator(seed: int, name: str, *index: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(stream(seed, name, *index).integers(0, 2**63 - 1)))
    return g
