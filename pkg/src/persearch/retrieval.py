"""Query construction (four modes), multi-network fusion and gallery ranking.

Queries are compared to the gallery by cosine similarity; ranking is an exact
full scan with deterministic tie-breaking (lower gallery index first). A
partitioned top-k path exists for large galleries and must match the exact
scan bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .encoders import (EncoderStateError, FeatureCache, FeatureTable,
                       FingerprintMismatchError, _injected_batch, load_image)
from .tinet import TINet

QUERY_MODES = ("image-only", "text-only", "avg", "composed")


@dataclass(frozen=True)
class QuerySpec:
    mode: str
    image_id: str | None = None
    caption: str | None = None
    tinet_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in QUERY_MODES:
            raise ValueError(f"mode must be one of {QUERY_MODES}, got {self.mode!r}")
        if self.mode in ("image-only", "composed") and self.image_id is None:
            raise ValueError(f"{self.mode} mode requires an image")
        if self.mode == "avg" and (self.image_id is None or not self.caption):
            raise ValueError("avg mode requires an image and a caption")
        if self.mode == "text-only" and not (self.caption or "").strip():
            raise ValueError("text-only mode requires a caption")


@dataclass
class RetrievalResult:
    ranked_ids: tuple[str, ...]
    scores: np.ndarray
    query: QuerySpec | None = None

    def __post_init__(self):
        if len(self.ranked_ids) != len(self.scores):
            raise ValueError("ids and scores disagree")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("scores must be non-increasing")


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("cannot normalize a zero vector")
    return vec / norm


def compose_query(encoder, tinets: list[TINet], f_v: torch.Tensor | np.ndarray,
                  caption: str | None = None) -> np.ndarray:
    """Composed query embedding: each network's pseudo-word is spliced into
    the prompt, text-encoded, L2-normalized; candidates are averaged and
    renormalized. A missing caption selects the caption-free prompt (used by
    the self-retrieval probe)."""
    if not tinets:
        raise ValueError("composed query needs at least one inversion network")
    for net in tinets:
        net.check_encoder(encoder)
    if isinstance(f_v, np.ndarray):
        f_v = torch.from_numpy(f_v)
    template = "infer" if caption and caption.strip() else "train"
    candidates = []
    with torch.no_grad():
        for net in tinets:
            pseudo = net(f_v[None].to(next(net.parameters()).dtype))
            vectors, valid, _ = _injected_batch(
                encoder, template, pseudo, [caption if template == "infer" else ""])
            emb = encoder.encode_embedding_batch(vectors, valid)[0].numpy()
            candidates.append(l2_normalize(emb.astype(np.float64)))
    return l2_normalize(np.mean(candidates, axis=0))


def _gallery_table(gallery: FeatureCache | FeatureTable) -> FeatureTable:
    return gallery.images if isinstance(gallery, FeatureCache) else gallery


def _top_k_order(scores: np.ndarray, k: int, method: str) -> np.ndarray:
    n = len(scores)
    k = min(k, n)
    if method == "exact":
        order = np.lexsort((np.arange(n), -scores))
        return order[:k]
    if method == "partitioned":
        if k == n:
            candidates = np.arange(n)
        else:
            part = np.argpartition(-scores, k - 1)
            boundary = scores[part[k - 1]]
            candidates = np.flatnonzero(scores >= boundary)
        order = candidates[np.lexsort((candidates, -scores[candidates]))]
        return order[:k]
    raise ValueError(f"unknown ranking method {method!r}")


def rank_gallery(query: np.ndarray, gallery: FeatureCache | FeatureTable,
                 k: int, method: str = "exact",
                 exclude: frozenset[str] | set[str] = frozenset(),
                 spec: QuerySpec | None = None) -> RetrievalResult:
    """Rank gallery images by cosine similarity to the query vector.

    Ties break toward the lower gallery index. ``exclude`` drops ids before
    ranking (reference exclusion is opt-in, never automatic).
    """
    table = _gallery_table(gallery)
    if len(table) == 0:
        raise ValueError("gallery is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if query.ndim != 1 or query.shape[0] != table.matrix.shape[1]:
        raise ValueError(
            f"query dim {query.shape} does not match gallery dim "
            f"{table.matrix.shape[1]}")
    ids = table.ids
    matrix = table.matrix
    if exclude:
        keep = np.array([i for i, id_ in enumerate(ids) if id_ not in exclude])
        if keep.size == 0:
            raise ValueError("exclusion removed the whole gallery")
        ids = tuple(ids[i] for i in keep)
        matrix = matrix[keep]
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        raise ValueError("gallery contains zero-norm rows")
    scores = (matrix.astype(np.float64) / norms[:, None].astype(np.float64)) \
        @ l2_normalize(query.astype(np.float64))
    order = _top_k_order(scores, k, method)
    return RetrievalResult(ranked_ids=tuple(ids[i] for i in order),
                           scores=scores[order], query=spec)


class RetrievalEngine:
    """Read-only retrieval over a frozen encoder, a gallery cache and any
    number of trained inversion networks."""

    def __init__(self, encoder, gallery: FeatureCache,
                 tinets: dict[str, TINet] | None = None,
                 query_manifest: Dataset | None = None,
                 query_cache: FeatureCache | None = None,
                 exclude_reference: bool = False):
        if not encoder.frozen:
            raise EncoderStateError("retrieval requires a frozen encoder")
        if gallery.fingerprint != encoder.fingerprint():
            raise FingerprintMismatchError(
                "gallery cache was built by a different encoder")
        if query_cache is not None and \
                query_cache.fingerprint != encoder.fingerprint():
            raise FingerprintMismatchError(
                "query cache was built by a different encoder")
        self.encoder = encoder
        self.gallery = gallery
        self.tinets = dict(tinets or {})
        self.query_manifest = query_manifest
        self.query_cache = query_cache
        self.exclude_reference = exclude_reference

    @property
    def gallery_size(self) -> int:
        return len(self.gallery.images)

    def image_features(self, image_id: str) -> np.ndarray:
        if self.query_cache is not None and image_id in self.query_cache.images:
            return self.query_cache.image_vector(image_id)
        if image_id in self.gallery.images:
            return self.gallery.image_vector(image_id)
        if self.query_manifest is not None and self.query_manifest.has_image(image_id):
            record = self.query_manifest.record(image_id)
            return self.encoder.encode_image(load_image(record.path)).numpy()
        raise KeyError(f"unknown image_id {image_id!r}")

    def _resolve_tinets(self, tinet_ids) -> list[TINet]:
        if not tinet_ids:
            raise ValueError("composed mode requires tinet_ids")
        missing = [t for t in tinet_ids if t not in self.tinets]
        if missing:
            raise KeyError(f"unknown tinet ids {missing}")
        return [self.tinets[t] for t in tinet_ids]

    def baseline_query(self, spec: QuerySpec) -> np.ndarray:
        if spec.mode == "image-only":
            return self.image_features(spec.image_id).astype(np.float64)
        if spec.mode == "text-only":
            return self.encoder.encode_text(spec.caption).numpy().astype(np.float64)
        if spec.mode == "avg":
            f_v = l2_normalize(self.image_features(spec.image_id).astype(np.float64))
            f_t = l2_normalize(
                self.encoder.encode_text(spec.caption).numpy().astype(np.float64))
            return l2_normalize((f_v + f_t) / 2)
        raise ValueError(f"baseline_query cannot handle mode {spec.mode!r}")

    def composed_query(self, spec: QuerySpec) -> np.ndarray:
        nets = self._resolve_tinets(spec.tinet_ids)
        f_v = self.image_features(spec.image_id)
        return compose_query(self.encoder, nets, f_v, spec.caption)

    def query_vector(self, spec: QuerySpec) -> np.ndarray:
        if spec.mode == "composed":
            return self.composed_query(spec)
        return self.baseline_query(spec)

    def search(self, spec: QuerySpec, k: int,
               method: str = "exact") -> RetrievalResult:
        exclude = set()
        if self.exclude_reference and spec.image_id is not None:
            exclude.add(spec.image_id)
        return rank_gallery(self.query_vector(spec), self.gallery, k,
                            method=method, exclude=exclude, spec=spec)
