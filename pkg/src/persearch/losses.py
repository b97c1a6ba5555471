"""Training objectives for both stages.

Stage 1 (dual-encoder fine-tuning) combines a masked-token reasoning loss, the
cross-modal projection matching loss and an identity cross-entropy. Stage 2
(inversion network training) reuses the projection-matching form between
image/text features and the textual-inversion features. The symmetric
contrastive (ITC) loss is kept as an ablation comparator.

All losses are differentiable torch functions of their input matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import DegenerateRowError, MatchLabelMatrix, build_match_labels


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.02
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.epsilon < 1e-4:
            raise ValueError("epsilon must lie in (0, 1e-4)")


@dataclass
class EmbeddingBatch:
    """Aligned per-sample global embeddings with identity labels.

    f_v: image features, f_t: text features, f_c: textual-inversion features;
    any present matrix is N x d_embed over the same sample order.
    """

    identity_ids: tuple[str, ...]
    f_v: torch.Tensor | None = None
    f_t: torch.Tensor | None = None
    f_c: torch.Tensor | None = None

    def __post_init__(self):
        n = len(self.identity_ids)
        dims = set()
        for name in ("f_v", "f_t", "f_c"):
            mat = getattr(self, name)
            if mat is None:
                continue
            if mat.ndim != 2 or mat.shape[0] != n:
                raise ValueError(f"{name} must be {n} x d_embed")
            if not torch.isfinite(mat).all():
                raise ValueError(f"{name} contains non-finite entries")
            dims.add(mat.shape[1])
        if len(dims) > 1:
            raise ValueError(f"embedding dims disagree: {sorted(dims)}")

    def match_labels(self) -> MatchLabelMatrix:
        return build_match_labels(list(self.identity_ids), list(self.identity_ids))


@dataclass
class MaskedPrediction:
    """Vocabulary logits and one-hot targets at masked token positions."""

    logits: torch.Tensor             # |M| x |V|
    targets: torch.Tensor            # |M| x |V| one-hot rows
    masked_positions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.logits.ndim != 2 or self.logits.shape[0] < 1:
            raise ValueError("need at least one masked position")
        if self.targets.shape != self.logits.shape:
            raise ValueError("targets must match logits shape")
        ones = self.targets.sum(dim=1)
        if not torch.allclose(ones, torch.ones_like(ones)) or \
                not ((self.targets == 0) | (self.targets == 1)).all():
            raise ValueError("target rows must be one-hot")


def cosine_similarity_matrix(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    if f_a.ndim != 2 or f_b.ndim != 2 or f_a.shape[1] != f_b.shape[1]:
        raise ValueError("expected N x d and M x d matrices with equal d")
    norm_a = f_a.norm(dim=1, keepdim=True)
    norm_b = f_b.norm(dim=1, keepdim=True)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise ValueError("zero-norm embedding row: cosine undefined")
    return (f_a / norm_a) @ (f_b / norm_b).t()


def matching_probabilities(f_a: torch.Tensor, f_b: torch.Tensor,
                           tau: float) -> torch.Tensor:
    """Row-stochastic matching distribution: softmax over cosine/tau."""
    return torch.softmax(cosine_similarity_matrix(f_a, f_b) / tau, dim=1)


def _q_rows(labels: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    sums = labels.sum(axis=1)
    dead = np.flatnonzero(sums == 0)
    if dead.size:
        raise DegenerateRowError(
            f"rows {dead.tolist()} have no positive match in the batch")
    return torch.as_tensor(labels / sums[:, None], dtype=dtype)


def _directional_matching_loss(f_a: torch.Tensor, f_b: torch.Tensor,
                               labels: np.ndarray, cfg: LossConfig) -> torch.Tensor:
    """(1/N) sum_ij p_ij * (log p_ij - log(q_ij + eps))."""
    logits = cosine_similarity_matrix(f_a, f_b) / cfg.tau
    p = torch.softmax(logits, dim=1)
    log_p = torch.log_softmax(logits, dim=1)
    q = _q_rows(labels, f_a.dtype)
    return (p * (log_p - torch.log(q + cfg.epsilon))).sum(dim=1).mean()


def projection_matching_loss(f_a: torch.Tensor, f_b: torch.Tensor,
                             labels: MatchLabelMatrix,
                             cfg: LossConfig) -> torch.Tensor:
    """Bidirectional KL matching loss between two embedding sets."""
    forward = _directional_matching_loss(f_a, f_b, labels.labels, cfg)
    backward = _directional_matching_loss(f_b, f_a, labels.labels.T, cfg)
    return forward + backward


def cmpm_loss(batch: EmbeddingBatch, labels: MatchLabelMatrix | None = None,
              cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Image/text cross-modal projection matching loss."""
    if batch.f_v is None or batch.f_t is None:
        raise ValueError("cmpm_loss needs both f_v and f_t")
    if labels is None:
        labels = batch.match_labels()
    return projection_matching_loss(batch.f_v, batch.f_t, labels, cfg)


def itc_loss(batch: EmbeddingBatch, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Symmetric contrastive loss with each pair its own class (ablation)."""
    if batch.f_v is None or batch.f_t is None:
        raise ValueError("itc_loss needs both f_v and f_t")
    logits = cosine_similarity_matrix(batch.f_v, batch.f_t) / cfg.tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    return (F.cross_entropy(logits, targets)
            + F.cross_entropy(logits.t(), targets)) / 2


def irr_loss(pred: MaskedPrediction, norm: str = "paper") -> torch.Tensor:
    """Masked-token prediction loss over the vocabulary.

    ``norm="paper"`` divides by |M|*|V|; ``"masked-only"`` divides by |M|, the
    conventional masked-language normalization.
    """
    if norm not in ("paper", "masked-only"):
        raise ValueError(f"unknown norm {norm!r}")
    m, v = pred.logits.shape
    per_token = -(pred.targets * torch.log_softmax(pred.logits, dim=1)).sum()
    return per_token / (m * v) if norm == "paper" else per_token / m


def id_loss(logits_v: torch.Tensor, logits_t: torch.Tensor,
            class_ids) -> torch.Tensor:
    """Mean identity cross-entropy over both modalities."""
    ids = torch.as_tensor(class_ids, dtype=torch.long)
    n_classes = logits_v.shape[1]
    if logits_t.shape != logits_v.shape:
        raise ValueError("modality logits must share shape")
    if ids.min() < 0 or ids.max() >= n_classes:
        raise ValueError(
            f"class id out of range [0, {n_classes}): {ids.min()}..{ids.max()}")
    stacked = torch.cat([logits_v, logits_t], dim=0)
    return F.cross_entropy(stacked, torch.cat([ids, ids]))


def tinet_losses(batch: EmbeddingBatch, labels: MatchLabelMatrix | None = None,
                 cfg: LossConfig = LossConfig(), mode: str = "Text") -> torch.Tensor:
    """Inversion-training loss: projection matching of f_c against f_v (Vis)
    or f_t (Text), bidirectional."""
    if batch.f_c is None:
        raise ValueError("tinet_losses needs f_c")
    if mode == "Vis":
        anchor = batch.f_v
        if anchor is None:
            raise ValueError("Vis mode needs f_v")
    elif mode == "Text":
        anchor = batch.f_t
        if anchor is None:
            raise ValueError("Text mode needs f_t")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if labels is None:
        labels = batch.match_labels()
    return projection_matching_loss(anchor, batch.f_c, labels, cfg)


def stage1_objective(irr: torch.Tensor, cmpm: torch.Tensor,
                     id_: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the three fine-tuning losses."""
    for name, part in (("irr", irr), ("cmpm", cmpm), ("id", id_)):
        if not torch.isfinite(torch.as_tensor(part)).all():
            raise ValueError(f"non-finite {name} loss")
    return irr + cmpm + id_
