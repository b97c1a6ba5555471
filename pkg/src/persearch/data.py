"""Manifest loading, identity-aware batch sampling and match-label matrices.

Manifests are JSONL, one record per line:
  image-caption: {"image_id", "identity_id", "path", "width", "height",
                  "source", "caption"?}
  image-only:    same object without "caption"
  triplets:      {"query_image_id", "relative_caption", "target_image_ids"}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_KINDS = ("image-caption", "image-only", "triplets")


class ManifestError(ValueError):
    """Raised on malformed manifests or dangling id references."""


class DegenerateRowError(ValueError):
    """A match-label row has no positive entry, so its q row is undefined."""


class SamplerError(ValueError):
    """Batch request cannot be satisfied by the dataset."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    identity_id: str
    path: str
    width: int
    height: int
    source: str

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    text: str


@dataclass(frozen=True)
class Triplet:
    query_image_id: str
    relative_caption: str
    target_image_ids: tuple[str, ...]


@dataclass(frozen=True)
class Dataset:
    """Immutable manifest handle. Records keep file order."""

    kind: str
    records: tuple[ImageRecord, ...] = ()
    captions: dict[str, str] = field(default_factory=dict)
    triplets: tuple[Triplet, ...] = ()

    def __len__(self) -> int:
        return len(self.triplets) if self.kind == "triplets" else len(self.records)

    def __post_init__(self):
        object.__setattr__(
            self, "_by_id", {r.image_id: r for r in self.records})

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise ManifestError(f"unknown image_id {image_id!r}") from None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._by_id

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    @property
    def identity_ids(self) -> list[str]:
        return [r.identity_id for r in self.records]

    def caption_for(self, image_id: str) -> str:
        try:
            return self.captions[image_id]
        except KeyError:
            raise ManifestError(f"no caption for image_id {image_id!r}") from None


@dataclass(frozen=True)
class MatchLabelMatrix:
    """Binary identity-match labels and the row-normalized true-match matrix."""

    labels: np.ndarray      # N x M, int8
    true_match: np.ndarray  # N x M, float64, rows sum to 1


def _parse_image_record(obj: dict, lineno: int, want_caption: bool):
    required = {"image_id": str, "identity_id": str, "path": str,
                "width": int, "height": int, "source": str}
    for key, typ in required.items():
        if key not in obj:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
        if not isinstance(obj[key], typ) or isinstance(obj[key], bool):
            raise ManifestError(f"line {lineno}: field {key!r} must be {typ.__name__}")
    if obj["width"] <= 0 or obj["height"] <= 0:
        raise ManifestError(f"line {lineno}: width/height must be positive")
    extra = set(obj) - set(required) - {"caption"}
    if extra:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(extra)}")
    caption = obj.get("caption")
    if want_caption:
        if not isinstance(caption, str) or not caption.strip():
            raise ManifestError(f"line {lineno}: caption must be a nonempty string")
    elif caption is not None:
        raise ManifestError(f"line {lineno}: image-only manifest carries a caption")
    rec = ImageRecord(obj["image_id"], obj["identity_id"], obj["path"],
                      obj["width"], obj["height"], obj["source"])
    return rec, caption


def _parse_triplet(obj: dict, lineno: int) -> Triplet:
    for key in ("query_image_id", "relative_caption", "target_image_ids"):
        if key not in obj:
            raise ManifestError(f"line {lineno}: missing field {key!r}")
    targets = obj["target_image_ids"]
    if (not isinstance(targets, list) or not targets
            or not all(isinstance(t, str) for t in targets)):
        raise ManifestError(
            f"line {lineno}: target_image_ids must be a nonempty string list")
    if obj["query_image_id"] in targets:
        raise ManifestError(
            f"line {lineno}: query image listed among its own targets")
    extra = set(obj) - {"query_image_id", "relative_caption", "target_image_ids"}
    if extra:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(extra)}")
    return Triplet(obj["query_image_id"], obj["relative_caption"], tuple(targets))


def load_manifest(path: str | Path, kind: str,
                  resolve_against: Dataset | None = None) -> Dataset:
    """Load and validate a JSONL manifest.

    ``resolve_against`` checks triplet target/query ids against an
    image manifest; ids absent there raise a dangling-reference error.
    """
    if kind not in MANIFEST_KINDS:
        raise ValueError(f"kind must be one of {MANIFEST_KINDS}, got {kind!r}")
    path = Path(path)
    records: list[ImageRecord] = []
    captions: dict[str, str] = {}
    triplets: list[Triplet] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}: line {lineno}: expected an object")
            if kind == "triplets":
                triplets.append(_parse_triplet(obj, lineno))
            else:
                rec, caption = _parse_image_record(
                    obj, lineno, want_caption=kind == "image-caption")
                if rec.image_id in seen_ids:
                    raise ManifestError(
                        f"{path}: line {lineno}: duplicate image_id {rec.image_id!r}")
                seen_ids.add(rec.image_id)
                records.append(rec)
                if caption is not None:
                    captions[rec.image_id] = caption
    if not records and not triplets:
        raise ManifestError(f"{path}: empty manifest")
    ds = Dataset(kind=kind, records=tuple(records), captions=captions,
                 triplets=tuple(triplets))
    if kind == "triplets" and resolve_against is not None:
        validate_triplets(ds, resolve_against)
    return ds


def validate_triplets(triplets: Dataset, gallery: Dataset,
                      queries: Dataset | None = None) -> None:
    """Check every referenced id resolves; queries default to the gallery."""
    query_side = queries if queries is not None else gallery
    for t in triplets.triplets:
        if not query_side.has_image(t.query_image_id):
            raise ManifestError(
                f"dangling reference: query image {t.query_image_id!r}")
        for tid in t.target_image_ids:
            if not gallery.has_image(tid):
                raise ManifestError(f"dangling reference: target image {tid!r}")


def build_match_labels(identity_ids_rows: list[str],
                       identity_ids_cols: list[str]) -> MatchLabelMatrix:
    """l[i,j] = 1 iff row identity i equals column identity j; q rows are
    l rows normalized to sum 1. A row with no positive raises, since its
    true-match distribution is undefined."""
    if not identity_ids_rows or not identity_ids_cols:
        raise ValueError("identity lists must be nonempty")
    rows = np.asarray(identity_ids_rows, dtype=object)
    cols = np.asarray(identity_ids_cols, dtype=object)
    labels = (rows[:, None] == cols[None, :]).astype(np.int8)
    sums = labels.sum(axis=1)
    dead = np.flatnonzero(sums == 0)
    if dead.size:
        raise DegenerateRowError(
            f"rows {dead.tolist()} have no positive match in the batch")
    true_match = labels.astype(np.float64) / sums[:, None]
    return MatchLabelMatrix(labels=labels, true_match=true_match)


def _batch_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    key = hashlib.sha256(f"{seed}:{epoch}:{step}".encode()).digest()[:8]
    return np.random.default_rng(int.from_bytes(key, "little"))


@dataclass(frozen=True)
class Batch:
    images: tuple[ImageRecord, ...]
    captions: tuple[CaptionRecord, ...] | None
    identity_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.images)


def sample_batch(dataset: Dataset, batch_size: int, seed: int,
                 epoch: int = 0, step: int = 0,
                 identity_cap: int | None = 2) -> Batch:
    """Draw a batch without replacement, deterministic in (seed, epoch, step).

    With ``identity_cap`` set, at most that many images of one identity enter
    the batch; capacity errors are raised rather than silently violating the
    cap. Paired captions are co-sampled so every CMPM row has a positive.
    """
    if not dataset.records:
        raise SamplerError("dataset is empty")
    if batch_size < 1:
        raise SamplerError("batch_size must be >= 1")
    rng = _batch_rng(seed, epoch, step)
    if identity_cap is not None:
        by_identity: dict[str, list[int]] = {}
        for i, rec in enumerate(dataset.records):
            by_identity.setdefault(rec.identity_id, []).append(i)
        capacity = sum(min(identity_cap, len(v)) for v in by_identity.values())
        if batch_size > capacity:
            raise SamplerError(
                f"batch_size {batch_size} exceeds identity-capped capacity "
                f"{capacity} ({len(by_identity)} identities, cap {identity_cap})")
        pool: list[int] = []
        for identity in sorted(by_identity):
            members = by_identity[identity]
            take = min(identity_cap, len(members))
            chosen = rng.choice(len(members), size=take, replace=False)
            pool.extend(members[c] for c in sorted(chosen))
        pool_arr = np.array(sorted(pool))
        picked = pool_arr[rng.permutation(len(pool_arr))[:batch_size]]
    else:
        if batch_size > len(dataset.records):
            raise SamplerError(
                f"batch_size {batch_size} exceeds dataset size {len(dataset.records)}")
        picked = rng.permutation(len(dataset.records))[:batch_size]
    images = tuple(dataset.records[i] for i in picked)
    captions = None
    if dataset.kind == "image-caption":
        captions = tuple(
            CaptionRecord(r.image_id, dataset.caption_for(r.image_id)) for r in images)
    return Batch(images=images, captions=captions,
                 identity_ids=tuple(r.identity_id for r in images))


def write_manifest(dataset: Dataset, path: str | Path) -> None:
    """Serialize an image manifest back to JSONL (order-preserving)."""
    if dataset.kind == "triplets":
        raise ValueError("use write_triplets for triplet files")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            obj = {"image_id": rec.image_id, "identity_id": rec.identity_id,
                   "path": rec.path, "width": rec.width, "height": rec.height,
                   "source": rec.source}
            if rec.image_id in dataset.captions:
                obj["caption"] = dataset.captions[rec.image_id]
            fh.write(json.dumps(obj) + "\n")


def write_triplets(triplets: list[Triplet] | tuple[Triplet, ...],
                   path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps({
                "query_image_id": t.query_image_id,
                "relative_caption": t.relative_caption,
                "target_image_ids": list(t.target_image_ids),
            }) + "\n")
