"""Rank-k and mean-average-precision evaluation over composed-query triplets.

Metrics are percentages rounded to 3 decimals; AP is computed over the full
ranking with no cutoff. Triplets sharing (query image, caption) merge into
one query with a multi-element ground-truth set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset
from .retrieval import QuerySpec, RetrievalResult


@dataclass
class PerQuery:
    query_image_id: str
    caption: str
    first_hit_rank: int
    ap: float


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    per_query: list[PerQuery]

    def __post_init__(self):
        values = (self.rank1, self.rank5, self.rank10, self.map)
        if not all(0 <= v <= 100 for v in values):
            raise ValueError("metrics must be percentages")
        if not self.rank1 <= self.rank5 <= self.rank10:
            raise ValueError("rank-k must be non-decreasing in k")


def _check_gt(result: RetrievalResult, gt_ids) -> set[str]:
    gt = set(gt_ids)
    if not gt:
        raise ValueError("ground-truth set is empty")
    ranked = set(result.ranked_ids)
    missing = gt - ranked
    if missing:
        raise ValueError(f"ground-truth ids not in gallery ranking: {sorted(missing)}")
    return gt


def rank_k(result: RetrievalResult, gt_ids, k: int) -> bool:
    """Hit iff any ground-truth id appears in the top-k of the ranking."""
    gt = _check_gt(result, gt_ids)
    return any(r in gt for r in result.ranked_ids[:k])


def first_hit_rank(result: RetrievalResult, gt_ids) -> int:
    gt = _check_gt(result, gt_ids)
    for rank, id_ in enumerate(result.ranked_ids, start=1):
        if id_ in gt:
            return rank
    raise ValueError("no ground truth found in ranking")


def average_precision(result: RetrievalResult, gt_ids) -> float:
    """AP = (1/|gt|) * sum over relevant ranks r of (hits at or before r) / r."""
    gt = _check_gt(result, gt_ids)
    hits = 0
    total = 0.0
    for rank, id_ in enumerate(result.ranked_ids, start=1):
        if id_ in gt:
            hits += 1
            total += hits / rank
    return total / len(gt)


def compute_report(items: list[tuple[str, str, RetrievalResult, set]]) -> EvalReport:
    """Aggregate (query id, caption, full ranking, gt set) rows into a report."""
    if not items:
        raise ValueError("empty query set")
    per_query = []
    hits = {1: 0, 5: 0, 10: 0}
    ap_sum = 0.0
    for query_id, caption, result, gt in items:
        rank = first_hit_rank(result, gt)
        ap = average_precision(result, gt)
        for k in hits:
            hits[k] += rank <= k
        ap_sum += ap
        per_query.append(PerQuery(query_id, caption, rank, ap))
    n = len(items)
    return EvalReport(
        rank1=round(100.0 * hits[1] / n, 3),
        rank5=round(100.0 * hits[5] / n, 3),
        rank10=round(100.0 * hits[10] / n, 3),
        map=round(100.0 * ap_sum / n, 3),
        per_query=per_query)


def merge_queries(triplets: Dataset) -> list[tuple[str, str, set[str]]]:
    """Collapse triplets with equal (image, caption) into one multi-gt query."""
    merged: dict[tuple[str, str], set[str]] = {}
    order: list[tuple[str, str]] = []
    for t in triplets.triplets:
        key = (t.query_image_id, t.relative_caption)
        if key not in merged:
            merged[key] = set()
            order.append(key)
        merged[key].update(t.target_image_ids)
    return [(img, cap, merged[(img, cap)]) for img, cap in order]


def evaluate(triplets: Dataset, engine, mode: str = "composed",
             tinet_ids: tuple[str, ...] = ()) -> EvalReport:
    """Run every merged query through the engine and aggregate metrics."""
    queries = merge_queries(triplets)
    if not queries:
        raise ValueError("empty query set")
    gallery_ids = set(engine.gallery.images.ids)
    items = []
    for image_id, caption, gt in queries:
        missing = gt - gallery_ids
        if missing:
            raise ValueError(f"ground-truth ids missing from gallery: {sorted(missing)}")
        spec = QuerySpec(mode=mode, image_id=image_id, caption=caption,
                         tinet_ids=tuple(tinet_ids) if mode == "composed" else ())
        result = engine.search(spec, k=engine.gallery_size)
        items.append((image_id, caption, result, gt))
    return compute_report(items)


def report_to_dict(report: EvalReport, config_fingerprint: str = "") -> dict:
    return {
        "metrics": {"rank1": report.rank1, "rank5": report.rank5,
                    "rank10": report.rank10, "map": report.map},
        "config_fingerprint": config_fingerprint,
        "per_query": [
            {"query_image_id": q.query_image_id, "caption": q.caption,
             "first_hit_rank": q.first_hit_rank, "ap": q.ap}
            for q in report.per_query],
    }


def write_report(report: EvalReport, path: str | Path,
                 config_fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report, config_fingerprint), fh, indent=2)
        fh.write("\n")


def report_csv_row(report: EvalReport, label: str = "") -> str:
    """One summary line for table assembly: label,rank1,rank5,rank10,map."""
    return (f"{label},{report.rank1:.3f},{report.rank5:.3f},"
            f"{report.rank10:.3f},{report.map:.3f}")
