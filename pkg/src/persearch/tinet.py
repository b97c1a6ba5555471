"""Textual inversion network: maps a global image embedding to one
pseudo-word token embedding.

A small fully connected stack (depth and hidden width are the only knobs);
the output layer has no activation since pseudo-words live in the
unconstrained token-embedding space.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .encoders import FingerprintMismatchError

_ACTIVATIONS = {"gelu": nn.GELU, "silu": nn.SiLU, "relu": nn.ReLU}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TINetConfig:
    d_in: int
    d_out: int
    depth: int = 3
    hidden_width: int = 512
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if min(self.d_in, self.d_out, self.hidden_width) < 1:
            raise ValueError("dimensions must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class PseudoWord:
    """One token-embedding vector standing in for an image."""

    vector: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.vector).all():
            raise ValueError("pseudo-word vector is not finite")


class TINet(nn.Module):
    def __init__(self, config: TINetConfig):
        super().__init__()
        self.config = config
        self.encoder_fingerprint: bytes | None = None
        widths = [config.d_in]
        widths += [config.hidden_width] * (config.depth - 1)
        widths += [config.d_out]
        act = _ACTIVATIONS[config.activation]
        layers: list[nn.Module] = []
        for i in range(config.depth):
            if i > 0:
                layers.append(act())
            layers.append(nn.Linear(widths[i], widths[i + 1]))
        self.layers = nn.Sequential(*layers)

    def forward(self, f_v: torch.Tensor) -> torch.Tensor:
        if f_v.shape[-1] != self.config.d_in:
            raise ValueError(
                f"input dim {f_v.shape[-1]} does not match d_in={self.config.d_in}")
        return self.layers(f_v)

    def bind_encoder(self, encoder) -> "TINet":
        self.encoder_fingerprint = encoder.fingerprint()
        return self

    def check_encoder(self, encoder) -> None:
        if (self.encoder_fingerprint is not None
                and self.encoder_fingerprint != encoder.fingerprint()):
            raise FingerprintMismatchError(
                "inversion network was trained against a different encoder")


def tinet_init(config: TINetConfig) -> TINet:
    """Build a TINet with seed-deterministic random weights.

    All layers, output bias included, use the fan-in uniform scheme.
    """
    net = TINet(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for mod in net.layers:
            if isinstance(mod, nn.Linear):
                bound = 1.0 / (mod.weight.shape[1] ** 0.5)
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.uniform_(-bound, bound, generator=gen)
    return net


def tinet_forward(net: TINet, f_v: torch.Tensor | np.ndarray) -> PseudoWord:
    if isinstance(f_v, np.ndarray):
        f_v = torch.from_numpy(f_v)
    with torch.no_grad():
        out = net(f_v.to(next(net.parameters()).dtype))
    return PseudoWord(out)


def save_checkpoint(net: TINet, path, metadata: dict | None = None) -> None:
    """Self-describing archive: config JSON + float32 tensors + fingerprint."""
    arrays: dict[str, np.ndarray] = {}
    for key, value in net.state_dict().items():
        arrays[f"tensor/{key}"] = value.detach().numpy().astype(np.float32)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "metadata": metadata or {},
    }
    arrays["header"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    fp = net.encoder_fingerprint or b"\x00" * 32
    arrays["encoder_fingerprint"] = np.frombuffer(fp, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TINet:
    with np.load(path) as archive:
        header = json.loads(bytes(archive["header"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        config = TINetConfig(**header["config"])
        net = TINet(config)
        state = {key[len("tensor/"):]: torch.from_numpy(archive[key])
                 for key in archive.files if key.startswith("tensor/")}
        net.load_state_dict(state)
        fp = bytes(archive["encoder_fingerprint"])
        net.encoder_fingerprint = None if fp == b"\x00" * 32 else fp
    return net
