"""Interpretability probes for trained inversion networks.

- nearest vocabulary words to a pseudo-word (token-embedding space, cosine)
- retrieval with the pseudo-word replaced by its nearest real word
- caption-free self-retrieval of the reference image
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .encoders import FeatureCache
from .evaluation import EvalReport, compute_report
from .retrieval import compose_query, l2_normalize, rank_gallery
from .tinet import TINet, tinet_forward


def vocab_neighbors(pseudo, token_table, tokenizer, k: int) -> list[tuple[str, float]]:
    """Top-k vocabulary rows by cosine similarity to the pseudo-word."""
    vec = getattr(pseudo, "vector", pseudo)
    if isinstance(vec, torch.Tensor):
        vec = vec.detach().numpy()
    if isinstance(token_table, torch.Tensor):
        token_table = token_table.detach().numpy()
    vec = np.asarray(vec, dtype=np.float64)
    if np.linalg.norm(vec) == 0:
        raise ValueError("zero pseudo-word vector")
    if k > token_table.shape[0]:
        raise ValueError(f"k={k} exceeds vocabulary size {token_table.shape[0]}")
    table = token_table.astype(np.float64)
    norms = np.linalg.norm(table, axis=1)
    norms[norms == 0] = 1.0
    sims = (table / norms[:, None]) @ l2_normalize(vec)
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    return [(tokenizer.decode_id(int(i)), float(sims[i])) for i in order]


def nearest_word_id(pseudo, token_table) -> int:
    vec = getattr(pseudo, "vector", pseudo)
    if isinstance(vec, torch.Tensor):
        vec = vec.detach().numpy()
    if isinstance(token_table, torch.Tensor):
        token_table = token_table.detach().numpy()
    table = token_table.astype(np.float64)
    norms = np.linalg.norm(table, axis=1)
    norms[norms == 0] = 1.0
    sims = (table / norms[:, None]) @ l2_normalize(np.asarray(vec, dtype=np.float64))
    return int(np.lexsort((np.arange(len(sims)), -sims))[0])


def substitute_word_query(encoder, tinet: TINet, f_v, caption: str,
                          strategy: str = "pseudo") -> np.ndarray:
    """Query embedding under a pseudo-word substitution strategy.

    "pseudo" is the normal composed path; "1st-sim" swaps the pseudo-word for
    the embedding-table row of its most similar word before text encoding;
    "text-only" drops the inversion entirely and encodes the raw caption.
    """
    if strategy == "pseudo":
        return compose_query(encoder, [tinet], f_v, caption)
    if strategy == "1st-sim":
        tinet.check_encoder(encoder)
        if isinstance(f_v, np.ndarray):
            f_v = torch.from_numpy(f_v)
        pseudo = tinet_forward(tinet, f_v)
        word_id = nearest_word_id(pseudo, encoder.token_table)
        row = encoder.token_table.detach()[word_id]
        from .encoders import _injected_batch
        with torch.no_grad():
            vectors, valid, _ = _injected_batch(encoder, "infer", row[None], [caption])
            emb = encoder.encode_embedding_batch(vectors, valid)[0].numpy()
        return l2_normalize(emb.astype(np.float64))
    if strategy == "text-only":
        return l2_normalize(encoder.encode_text(caption).numpy().astype(np.float64))
    raise ValueError(f"unknown strategy {strategy!r}")


def self_retrieval_probe(tinet: TINet, encoder, reference_ids: list[str],
                         gallery: FeatureCache) -> EvalReport:
    """Caption-free composed retrieval where each reference image is its own
    ground truth, over a gallery that deliberately mixes the references in."""
    missing = [r for r in reference_ids if r not in gallery.images]
    if missing:
        raise ValueError(f"reference images missing from gallery: {missing}")
    tinet.check_encoder(encoder)
    items = []
    for ref in reference_ids:
        f_v = gallery.image_vector(ref)
        query = compose_query(encoder, [tinet], f_v, caption=None)
        result = rank_gallery(query, gallery, k=len(gallery.images))
        items.append((ref, "", result, {ref}))
    return compute_report(items)


def write_neighbor_dump(rows: list[dict], path: str | Path) -> None:
    """JSONL dump: {"image_id": ..., "neighbors": [{"word", "sim"}, ...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
