"""Shared run-configuration schema: one JSON file, per-command sections.

Unknown sections or keys are hard errors so typos surface immediately; every
violation is reported in one pass.
"""

from __future__ import annotations

import json
from pathlib import Path

SCHEMA: dict[str, dict[str, type | tuple]] = {
    "data": {
        "train_manifest": str,
        "gallery_manifest": str,
        "query_manifest": str,
        "triplets": str,
        "corpus_manifest": str,
    },
    "encoder": {
        "backend": str,          # "toy" | "pretrained"
        "d_embed": int,
        "d_token": int,
        "vocab_size": int,
        "seed": int,
        "head_depth": int,
        "checkpoint": str,       # trained encoder weights (cache/eval/serve)
    },
    "finetune": {
        "epochs": int,
        "steps_per_epoch": int,
        "batch_size": int,
        "base_lr": float,
        "head_lr": float,
        "warmup_epochs": int,
        "seed": int,
        "identity_cap": int,
        "matching_loss": str,    # "cmpm" | "itc"
        "out_dir": str,
    },
    "cache": {
        "manifest": str,
        "out_dir": str,
    },
    "tinet": {
        "mode": str,             # "Vis" | "Text"
        "depth": int,
        "hidden": int,
        "seed": int,
        "epochs": int,
        "steps_per_epoch": int,
        "batch_size": int,
        "base_lr": float,
        "warmup_epochs": int,
        "cache_dir": str,
        "out_dir": str,
    },
    "eval": {
        "mode": str,
        "tinets": list,
        "k": int,
        "cache_dir": str,
        "out_dir": str,
    },
    "probe": {
        "tinet": str,
        "k": int,
        "images": list,
        "out_dir": str,
    },
    "self_retrieval": {
        "tinet": str,
        "cache_dir": str,
        "out_dir": str,
    },
    "curate": {
        "k": int,
        "cache_dir": str,
        "out_dir": str,
        "verdicts": str,
        "candidates": str,
    },
    "filter": {
        "top_fraction": float,
        "out_dir": str,
    },
    "serve": {
        "host": str,
        "port": int,
        "tinets": list,
        "cache_dir": str,
        "candidates": str,
        "verdicts": str,
        "frontend_dir": str,
    },
}


class ConfigError(ValueError):
    """Invalid run configuration; ``details`` lists every violation."""

    def __init__(self, details: list[str]):
        self.details = details
        super().__init__("; ".join(details))


def validate_config(cfg: dict) -> list[str]:
    errors = []
    if not isinstance(cfg, dict):
        return ["config root must be a JSON object"]
    for section, body in cfg.items():
        if section not in SCHEMA:
            errors.append(f"unknown section {section!r}")
            continue
        if not isinstance(body, dict):
            errors.append(f"section {section!r} must be an object")
            continue
        for key, value in body.items():
            if key not in SCHEMA[section]:
                errors.append(f"unknown key {section}.{key}")
                continue
            expected = SCHEMA[section][key]
            if expected is float:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif expected is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, expected)
            if not ok:
                errors.append(
                    f"{section}.{key} must be {getattr(expected, '__name__', expected)},"
                    f" got {type(value).__name__}")
    return errors


def load_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON: {exc.msg}"]) from None
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def require(cfg: dict, dotted: str):
    sec, key = dotted.split(".")
    try:
        return cfg[sec][key]
    except KeyError:
        raise ConfigError([f"missing required config key {dotted}"]) from None


def write_snapshot(cfg: dict, command: str, overrides: dict,
                   out_dir: str | Path) -> None:
    """Persist the effective configuration so a run can be reproduced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "overrides": overrides, "config": cfg}
    with open(out_dir / "config_snapshot.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
