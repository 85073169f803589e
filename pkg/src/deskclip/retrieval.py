"""Bidirectional retrieval metrics and prompt-ensemble zero-shot scoring.

Ranking is by descending cosine with deterministic index tie-breaks, so every
report is bit-reproducible. Recall@K counts queries with at least one
relevant item in the top K; AP@10 sums precision at each relevant hit within
the top 10 and normalizes by min(#relevant, 10).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyClass, EmptyInput
from .tensor import as_matrix, l2_normalize_rows

RECALL_KS = (1, 5, 10)


def _matrix(batch) -> np.ndarray:
    return as_matrix(getattr(batch, "matrix", batch))


def rank_gallery(queries, gallery) -> np.ndarray:
    """Per-query gallery indices sorted by descending cosine; ties resolve to
    the lower index."""
    q, g = _matrix(queries), _matrix(gallery)
    if q.shape[1] != g.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if g.shape[0] == 0:
        raise EmptyInput("gallery is empty")
    scores = q @ g.T
    return np.argsort(-scores, axis=1, kind="stable")


def recall_at_k(ranking: np.ndarray, relevance: dict[int, set[int]], k: int) -> float:
    """Fraction of queries whose top-k ranks contain a relevant index."""
    hits = 0
    for qi in range(ranking.shape[0]):
        relevant = relevance[qi]
        if any(int(idx) in relevant for idx in ranking[qi, :k]):
            hits += 1
    return hits / ranking.shape[0]


def average_precision_at_10(ranked: np.ndarray, relevant: set[int]) -> float:
    found = 0
    total = 0.0
    for r, idx in enumerate(ranked[:10], start=1):
        if int(idx) in relevant:
            found += 1
            total += found / r
    return total / min(len(relevant), 10)


def map_at_10(ranking: np.ndarray, relevance: dict[int, set[int]]) -> float:
    """Mean over queries of AP over the top 10 ranks."""
    aps = [
        average_precision_at_10(ranking[qi], relevance[qi])
        for qi in range(ranking.shape[0])
    ]
    return sum(aps) / len(aps)


@dataclass
class RetrievalResult:
    direction: str
    recall_at: dict[int, float]
    map_at_10: float
    n_queries: int
    n_gallery: int

    def to_json(self) -> dict:
        out = {"direction": self.direction}
        for k in RECALL_KS:
            out[f"recall@{k}"] = self.recall_at[k]
        out["map@10"] = self.map_at_10
        out["n_queries"] = self.n_queries
        out["n_gallery"] = self.n_gallery
        return out


def evaluate_retrieval(queries, gallery, relevance, direction: str) -> RetrievalResult:
    ranking = rank_gallery(queries, gallery)
    return RetrievalResult(
        direction=direction,
        recall_at={k: recall_at_k(ranking, relevance, k) for k in RECALL_KS},
        map_at_10=map_at_10(ranking, relevance),
        n_queries=ranking.shape[0],
        n_gallery=_matrix(gallery).shape[0],
    )


@dataclass
class ZeroShotResult:
    predictions: list[int]
    accuracy: float | None
    n_items: int
    n_classes: int
    prompts_per_class: list[int]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_items": self.n_items,
            "n_classes": self.n_classes,
            "prompts_per_class": self.prompts_per_class,
        }


def class_vectors(class_prompts: list) -> np.ndarray:
    """One unit vector per class: L2-renormalized mean of its prompt embeddings."""
    rows = []
    for ci, prompts in enumerate(class_prompts):
        p = _matrix(prompts)
        if p.shape[0] == 0:
            raise EmptyClass(f"class {ci} has no prompt embeddings")
        rows.append(l2_normalize_rows(p.mean(axis=0))[0])
    return np.asarray(rows)


def zero_shot_classify(items, class_prompts: list, labels=None) -> ZeroShotResult:
    """Assign each item the class whose averaged prompt vector is nearest in
    cosine; ties go to the lowest class index."""
    item_m = _matrix(items)
    cvecs = class_vectors(class_prompts)
    if cvecs.shape[1] != item_m.shape[1]:
        raise DimensionMismatch(
            f"item dim {item_m.shape[1]} != class vector dim {cvecs.shape[1]}"
        )
    scores = item_m @ cvecs.T
    preds = [int(np.argmax(row)) for row in scores]
    accuracy = None
    if labels is not None:
        labels = list(labels)
        accuracy = sum(p == t for p, t in zip(preds, labels)) / len(labels)
    return ZeroShotResult(
        predictions=preds,
        accuracy=accuracy,
        n_items=item_m.shape[0],
        n_classes=len(class_prompts),
        prompts_per_class=[_matrix(p).shape[0] for p in class_prompts],
    )


def paired_relevance(record_bases: list[str]) -> tuple[list[str], dict[int, set[int]], dict[int, set[int]]]:
    """Relevance maps for a paired dataset that may carry several captions
    per item.

    Returns unique item base ids in first-appearance order, the text-retrieval
    map (item index -> caption record indices) and the reverse map (caption
    record index -> item index).
    """
    items: list[str] = []
    item_index: dict[str, int] = {}
    for b in record_bases:
        if b not in item_index:
            item_index[b] = len(items)
            items.append(b)
    text_rel: dict[int, set[int]] = {i: set() for i in range(len(items))}
    other_rel: dict[int, set[int]] = {}
    for ri, b in enumerate(record_bases):
        ii = item_index[b]
        text_rel[ii].add(ri)
        other_rel[ri] = {ii}
    return items, text_rel, other_rel
