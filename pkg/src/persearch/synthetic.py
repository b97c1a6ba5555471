"""Synthetic identities for desk-scale verification.

Each identity gets a base pixel texture and a fixed attribute caption; its
images share the texture but differ in per-image noise (stand-in for
background/scene changes). Captions are built from the tokenizer's word bank
so the toy text encoder sees no unknown words.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Dataset, Triplet, load_manifest, write_triplets

GENDERS = ("man", "woman", "girl", "boy")
COLORS = ("red", "blue", "green", "yellow", "black", "white", "purple", "orange")
GARMENTS = ("sweater", "jacket", "coat", "dress", "shirt", "hoodie")
ACCESSORIES = ("handbag", "backpack", "umbrella", "suitcase", "newspaper", "scarf")


@dataclass(frozen=True)
class ToyDataPaths:
    root: Path
    images_dir: Path
    full_manifest: Path      # all images with captions (training)
    gallery_manifest: Path   # target images only
    query_manifest: Path     # one reference image per identity
    triplets: Path


def _identity_attributes(n: int, rng: np.random.Generator):
    combos = list(itertools.product(GENDERS, COLORS, GARMENTS, ACCESSORIES))
    order = rng.permutation(len(combos))[:n]
    return [combos[i] for i in order]


def _caption(attrs) -> str:
    gender, color, garment, accessory = attrs
    return f"a {gender} wearing a {color} {garment} and carrying a {accessory}"


def generate_toy_dataset(root: str | Path, n_identities: int = 16,
                         images_per_identity: int = 4, seed: int = 0,
                         image_size: tuple[int, int] = (16, 48)) -> ToyDataPaths:
    """Write images, manifests and triplets for an overfit-scale corpus.

    The first image of each identity is the query/reference; the rest form
    the gallery and the triplet targets.
    """
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width, height = image_size
    attrs = _identity_attributes(n_identities, rng)

    full_rows, gallery_rows, query_rows = [], [], []
    triplets: list[Triplet] = []
    for ident in range(n_identities):
        identity_id = f"id{ident:03d}"
        caption = _caption(attrs[ident])
        base = rng.integers(0, 256, size=(height, width, 3)).astype(np.float64)
        image_ids = []
        for j in range(images_per_identity):
            noise = rng.integers(0, 256, size=(height, width, 3)).astype(np.float64)
            pixels = np.clip(0.55 * base + 0.45 * noise, 0, 255).astype(np.uint8)
            image_id = f"{identity_id}_img{j}"
            path = images_dir / f"{image_id}.png"
            Image.fromarray(pixels).save(path)
            row = {"image_id": image_id, "identity_id": identity_id,
                   "path": str(path), "width": width, "height": height,
                   "source": "toy", "caption": caption}
            full_rows.append(row)
            if j == 0:
                query_rows.append({k: v for k, v in row.items() if k != "caption"})
            else:
                gallery_rows.append(row)
            image_ids.append(image_id)
        triplets.append(Triplet(image_ids[0], caption, tuple(image_ids[1:])))

    paths = ToyDataPaths(
        root=root, images_dir=images_dir,
        full_manifest=root / "all.jsonl",
        gallery_manifest=root / "gallery.jsonl",
        query_manifest=root / "queries.jsonl",
        triplets=root / "triplets.jsonl")
    _write_jsonl(full_rows, paths.full_manifest)
    _write_jsonl(gallery_rows, paths.gallery_manifest)
    _write_jsonl(query_rows, paths.query_manifest)
    write_triplets(triplets, paths.triplets)
    return paths


def _write_jsonl(rows: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def generate_resolution_manifest(path: str | Path, n: int = 1000,
                                 seed: int = 0) -> Dataset:
    """Image-only manifest with varied resolutions (no files on disk)."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        rows.append({
            "image_id": f"res{i:05d}", "identity_id": f"rid{i % 97:03d}",
            "path": f"/nonexistent/res{i:05d}.png",
            "width": int(rng.integers(8, 129)),
            "height": int(rng.integers(16, 257)),
            "source": "synthetic",
        })
    _write_jsonl(rows, Path(path))
    return load_manifest(path, "image-only")


def generate_benchmark_layout(root: str | Path, n_queries: int = 2202,
                              n_triplets: int = 2225, n_gallery: int = 20510,
                              seed: int = 0) -> dict[str, Path]:
    """Full-scale benchmark layout (manifests only): a large gallery, unique
    (image, caption) queries, and a few extra triplet rows that share a query
    but add more targets."""
    if n_triplets < n_queries:
        raise ValueError("need at least one triplet per query")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    gallery_rows = [{
        "image_id": f"g{i:06d}", "identity_id": f"pid{i % 4000:04d}",
        "path": f"/data/gallery/g{i:06d}.jpg", "width": 128, "height": 384,
        "source": "bench"} for i in range(n_gallery)]
    query_rows = [{
        "image_id": f"q{i:06d}", "identity_id": f"pid{i % 4000:04d}",
        "path": f"/data/query/q{i:06d}.jpg", "width": 128, "height": 384,
        "source": "bench"} for i in range(n_queries)]

    triplets = []
    for i in range(n_queries):
        target = f"g{int(rng.integers(n_gallery)):06d}"
        triplets.append(Triplet(f"q{i:06d}", f"caption number {i}", (target,)))
    for j in range(n_triplets - n_queries):
        extra_target = f"g{int(rng.integers(n_gallery)):06d}"
        base = triplets[j]
        triplets.append(Triplet(base.query_image_id, base.relative_caption,
                                (extra_target,)))

    paths = {"gallery": root / "gallery.jsonl", "queries": root / "queries.jsonl",
             "triplets": root / "triplets.jsonl"}
    _write_jsonl(gallery_rows, paths["gallery"])
    _write_jsonl(query_rows, paths["queries"])
    write_triplets(triplets, paths["triplets"])
    return paths
