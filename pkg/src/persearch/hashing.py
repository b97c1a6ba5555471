"""Stable hashes over model parameters, used as encoder fingerprints."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch


def parameter_hash(module: torch.nn.Module) -> bytes:
    """SHA-256 over all parameters and buffers, in sorted state-dict order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        arr = state[key].detach().cpu().numpy()
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


def module_fingerprint(module: torch.nn.Module, config: dict) -> bytes:
    """Fingerprint binding a module's architecture config to its weights."""
    h = hashlib.sha256()
    h.update(type(module).__name__.encode())
    h.update(json.dumps(config, sort_keys=True).encode())
    h.update(parameter_hash(module))
    return h.digest()
