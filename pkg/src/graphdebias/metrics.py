"""Top-K ranking metrics, prediction bias and popularity grouping."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import InteractionGraph


@dataclass(frozen=True)
class AttributeTable:
    """Categorical label per user or item; ``-1`` marks an unlabeled node."""

    name: str
    side: str
    labels: np.ndarray

    def __post_init__(self):
        if self.side not in ("user", "item"):
            raise ValueError("side must be 'user' or 'item'")

    @property
    def domain(self) -> np.ndarray:
        return np.unique(self.labels[self.labels >= 0])


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """NDCG with binary gains and ``1/log2(rank + 1)`` discount, ranks 1-based."""
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("no relevant items")
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in relevant)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(relevant), k)))
    return float(dcg / idcg)


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("no relevant items")
    return sum(1 for item in ranked[:k] if item in relevant) / len(relevant)


def top_k(scores: np.ndarray, exclude: np.ndarray, k: int) -> np.ndarray:
    """Per-user top-``k`` item indices by descending score, skipping excluded items.

    Within the top-``k`` ties break toward the lower item index.
    """
    s = np.where(exclude, -np.inf, scores)
    k = min(k, s.shape[1])
    if k < s.shape[1]:
        cand = np.argpartition(-s, k - 1, axis=1)[:, :k]
    else:
        cand = np.broadcast_to(np.arange(k), s.shape).copy()
    cand.sort(axis=1)
    vals = np.take_along_axis(s, cand, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(cand, order, axis=1)


def evaluate_ranking(scores: np.ndarray, exclude: np.ndarray, relevant: np.ndarray,
                     ks: Sequence[int]) -> dict[str, float]:
    """Mean NDCG@K and Recall@K over users with at least one relevant item.

    ``exclude`` and ``relevant`` are boolean user-by-item matrices. The number
    of evaluated users is returned under ``"n_users"``.
    """
    users = np.flatnonzero(relevant.any(axis=1))
    out: dict[str, float] = {"n_users": float(users.size)}
    if users.size == 0:
        for k in ks:
            out[f"ndcg@{k}"] = float("nan")
            out[f"recall@{k}"] = float("nan")
        return out
    kmax = max(ks)
    ranked = top_k(scores[users], exclude[users], kmax)
    hits = np.take_along_axis(relevant[users] & ~exclude[users], ranked, axis=1)
    n_rel = relevant[users].sum(axis=1)
    discount = 1.0 / np.log2(np.arange(2, kmax + 2))
    for k in ks:
        dcg = (hits[:, :k] * discount[:k]).sum(axis=1)
        ideal = np.cumsum(discount[:k])[np.minimum(n_rel, k) - 1]
        out[f"ndcg@{k}"] = float(np.mean(dcg / ideal))
        out[f"recall@{k}"] = float(np.mean(hits[:, :k].sum(axis=1) / n_rel))
    return out


def prediction_bias(scores: np.ndarray, attrs: AttributeTable) -> float:
    """Mean over the opposite side of the largest gap between label-group score averages.

    For a user attribute, each item contributes ``max_a - min_a`` of its
    average score over users labelled ``a``; items are then averaged. Item
    attributes are symmetric with users and items swapped.
    """
    s = scores if attrs.side == "user" else scores.T
    labels = attrs.labels
    if labels.shape[0] != s.shape[0]:
        raise ValueError("attribute table does not match score matrix")
    means = [s[labels == a].mean(axis=0) for a in attrs.domain]
    if len(means) < 2:
        raise ValueError(f"attribute {attrs.name!r} needs at least two populated groups")
    stacked = np.stack(means)
    return float(np.mean(stacked.max(axis=0) - stacked.min(axis=0)))


def popularity_groups(graph: InteractionGraph, n_groups: int = 4) -> AttributeTable:
    """Items sorted by training degree (ties by index) and cut into equal-size groups 0..n-1."""
    if n_groups < 2:
        raise ValueError("need at least two groups")
    if graph.n_items < n_groups:
        raise ValueError("fewer items than groups")
    order = np.lexsort((np.arange(graph.n_items), graph.item_degree))
    labels = np.empty(graph.n_items, dtype=np.int64)
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        labels[chunk] = g
    return AttributeTable("item_popularity", "item", labels)


def group_means(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    sums = np.bincount(groups, weights=values, minlength=n_groups)
    counts = np.bincount(groups, minlength=n_groups)
    with np.errstate(invalid="ignore"):
        return sums / counts


def write_metrics(path: str | Path, metrics: dict[str, float], ks: Sequence[int]) -> None:
    """CSV ``metric,K,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "K", "value"])
        for name in ("ndcg", "recall"):
            for k in ks:
                w.writerow([name, k, repr(metrics[f"{name}@{k}"])])


def write_bias(path: str | Path, biases: dict[str, float]) -> None:
    """CSV ``attribute,prediction_bias``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attribute", "prediction_bias"])
        for name, value in biases.items():
            w.writerow([name, repr(value)])
