"""Dataset-construction support: retrieval-assisted false-negative mining,
verdict application with an append-only audit trail, and resolution filtering.

The mining/verdict loop mirrors how a gallery gets re-annotated: the most
similar unlabeled images per annotated target are surfaced, a human accepts
or rejects each pair, and accepted candidates become additional ground truths
for every triplet that lists the target.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Triplet, load_manifest, write_triplets
from .encoders import FeatureCache, FeatureTable, FingerprintMismatchError

PAIR_SEP = "::"


@dataclass(frozen=True)
class Candidate:
    pair_id: str
    target_id: str
    candidate_id: str
    similarity: float


@dataclass(frozen=True)
class Verdict:
    pair_id: str
    target_id: str
    candidate_id: str
    decision: str
    annotator: str = ""
    ts: str = ""

    def __post_init__(self):
        if self.decision not in ("accept", "reject"):
            raise ValueError(f"decision must be accept/reject, got {self.decision!r}")


def pair_id_for(target_id: str, candidate_id: str) -> str:
    return f"{target_id}{PAIR_SEP}{candidate_id}"


def annotated_targets(triplets: Dataset) -> dict[str, set[str]]:
    """For each target image, the ids already co-annotated as ground truth
    for some query that lists it."""
    out: dict[str, set[str]] = {}
    for t in triplets.triplets:
        targets = set(t.target_image_ids)
        for tid in t.target_image_ids:
            out.setdefault(tid, set()).update(targets)
    return out


def false_negative_candidates(target_ids: list[str],
                              gallery: FeatureCache | FeatureTable,
                              k: int = 5,
                              annotated: dict[str, set[str]] | None = None,
                              target_cache: FeatureCache | None = None
                              ) -> list[Candidate]:
    """Top-k most similar gallery images per target, excluding the target
    itself and anything already annotated as its ground truth."""
    table = gallery.images if isinstance(gallery, FeatureCache) else gallery
    if target_cache is not None and isinstance(gallery, FeatureCache) \
            and target_cache.fingerprint != gallery.fingerprint:
        raise FingerprintMismatchError(
            "target features come from a different encoder than the gallery")
    annotated = annotated or {}
    matrix = table.matrix.astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        raise ValueError("gallery contains zero-norm rows")
    normed = matrix / norms[:, None]
    out: list[Candidate] = []
    for target in target_ids:
        if target_cache is not None and target in target_cache.images:
            vec = target_cache.image_vector(target).astype(np.float64)
        else:
            vec = table.vector(target).astype(np.float64)
        vec = vec / np.linalg.norm(vec)
        sims = normed @ vec
        banned = {target} | annotated.get(target, set())
        order = np.lexsort((np.arange(len(sims)), -sims))
        picked = 0
        for idx in order:
            cid = table.ids[idx]
            if cid in banned:
                continue
            out.append(Candidate(pair_id_for(target, cid), target, cid,
                                 float(sims[idx])))
            picked += 1
            if picked >= k:
                break
    return out


def write_candidates(candidates: list[Candidate], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps({
                "pair_id": c.pair_id, "target_id": c.target_id,
                "candidate_id": c.candidate_id, "similarity": c.similarity,
            }) + "\n")


def load_candidates(path: str | Path) -> list[Candidate]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(Candidate(obj["pair_id"], obj["target_id"],
                                     obj["candidate_id"], obj["similarity"]))
    return out


def load_verdicts(path: str | Path) -> list[Verdict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(Verdict(obj["pair_id"], obj["target_id"],
                                   obj["candidate_id"], obj["decision"],
                                   obj.get("annotator", ""), obj.get("ts", "")))
    return out


def append_verdict(path: str | Path, verdict: Verdict) -> None:
    """Durable append: the verdict is flushed and fsynced before returning."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "pair_id": verdict.pair_id, "target_id": verdict.target_id,
            "candidate_id": verdict.candidate_id, "decision": verdict.decision,
            "annotator": verdict.annotator, "ts": verdict.ts,
        }) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


class VerdictConflictError(ValueError):
    """A pair id received both an accept and a reject."""


def _dedupe_verdicts(verdicts: list[Verdict]) -> list[Verdict]:
    seen: dict[str, Verdict] = {}
    conflicts = []
    for v in verdicts:
        prev = seen.get(v.pair_id)
        if prev is None:
            seen[v.pair_id] = v
        elif prev.decision != v.decision:
            conflicts.append(v.pair_id)
    if conflicts:
        raise VerdictConflictError(
            f"conflicting accept/reject verdicts for pairs {sorted(set(conflicts))}")
    return list(seen.values())


def apply_verdicts(triplets_path: str | Path, verdicts: list[Verdict],
                   out_path: str | Path | None = None,
                   audit_path: str | Path | None = None) -> list[Triplet]:
    """Apply accepted pairs to every triplet listing the target.

    Idempotent per pair id: replaying a verdict file yields an identical
    triplet file. Rejections only land in the audit log. Existing annotations
    are never removed.
    """
    triplets_path = Path(triplets_path)
    dataset = load_manifest(triplets_path, "triplets")
    verdicts = _dedupe_verdicts(verdicts)

    target_index: dict[str, list[int]] = {}
    for i, t in enumerate(dataset.triplets):
        for tid in t.target_image_ids:
            target_index.setdefault(tid, []).append(i)
    unknown = [v.pair_id for v in verdicts if v.target_id not in target_index]
    if unknown:
        raise ValueError(f"unknown pair ids (target not in any triplet): {unknown}")

    updated = [list(t.target_image_ids) for t in dataset.triplets]
    for v in verdicts:
        if v.decision != "accept":
            continue
        for i in target_index[v.target_id]:
            if v.candidate_id not in updated[i]:
                updated[i].append(v.candidate_id)
    result = [Triplet(t.query_image_id, t.relative_caption, tuple(new))
              for t, new in zip(dataset.triplets, updated)]

    write_triplets(result, out_path if out_path is not None else triplets_path)
    if audit_path is not None:
        logged = {v.pair_id for v in load_verdicts(audit_path)}
        with open(audit_path, "a", encoding="utf-8") as fh:
            for v in verdicts:
                if v.pair_id in logged:
                    continue
                fh.write(json.dumps({
                    "pair_id": v.pair_id, "target_id": v.target_id,
                    "candidate_id": v.candidate_id, "decision": v.decision,
                    "annotator": v.annotator, "ts": v.ts,
                }) + "\n")
    return result


def filter_by_resolution(dataset: Dataset, top_fraction: float) -> Dataset:
    """Keep the ceil(fraction * N) images with largest pixel area.

    Area ties break by image_id, so the result is deterministic; kept records
    preserve the original manifest order.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    if dataset.kind == "triplets":
        raise ValueError("resolution filtering applies to image manifests")
    n_keep = math.ceil(top_fraction * len(dataset.records))
    ranked = sorted(dataset.records, key=lambda r: (-r.area, r.image_id))
    keep = {r.image_id for r in ranked[:n_keep]}
    records = tuple(r for r in dataset.records if r.image_id in keep)
    captions = {r.image_id: dataset.captions[r.image_id]
                for r in records if r.image_id in dataset.captions}
    return Dataset(kind=dataset.kind, records=records, captions=captions)
