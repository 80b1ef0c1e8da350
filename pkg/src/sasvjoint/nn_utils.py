"""Small torch helpers shared by the encoders, back-end and trainer."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch


@contextlib.contextmanager
def seeded_init(seed: int):
    """Run parameter initialisation under a private, seeded torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over parameter names and float32 little-endian bytes."""
    h = hashlib.sha256()
    for name, arr in state_arrays(module).items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
