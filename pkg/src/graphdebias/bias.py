"""Per-edge bias head, Bernoulli view masks and the ARM gradient estimator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .graph import InteractionGraph
from .model import EmbeddingModel


@dataclass
class BiasHead:
    """Affine head ``phi = w . [z_u || z_i] + b`` over layer-0 embeddings."""

    weight: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "BiasHead":
        return cls(np.zeros(2 * dim), 0.0)

    def copy(self) -> "BiasHead":
        return BiasHead(self.weight.copy(), float(self.bias))


@dataclass
class MaskPair:
    plus: np.ndarray
    minus: np.ndarray

    def __post_init__(self):
        if self.plus.shape != self.minus.shape:
            raise ValueError("mask lengths differ")


def edge_features(model: EmbeddingModel, graph: InteractionGraph) -> np.ndarray:
    return np.concatenate([model.user_embed[graph.users], model.item_embed[graph.items]], axis=1)


def bias_logits(head: BiasHead, model: EmbeddingModel, graph: InteractionGraph) -> np.ndarray:
    feats = edge_features(model, graph)
    if feats.shape[1] != head.weight.shape[0]:
        raise ValueError("bias head dimension does not match embeddings")
    return feats @ head.weight + head.bias


def bias_probabilities(head: BiasHead, model: EmbeddingModel, graph: InteractionGraph) -> np.ndarray:
    return expit(bias_logits(head, model, graph))


def head_gradient(features: np.ndarray, grad_logits: np.ndarray) -> tuple[np.ndarray, float]:
    """Chain rule from per-edge logit gradients to (weight, bias)."""
    return features.T @ grad_logits, float(np.sum(grad_logits))


def sample_masks(p_b: np.ndarray, rng: np.random.Generator) -> MaskPair:
    """``plus ~ Bern(p_b)`` and ``minus ~ Bern(1 - p_b)``, drawn independently."""
    p_b = np.asarray(p_b, dtype=np.float64)
    plus = rng.random(p_b.shape) < p_b
    minus = rng.random(p_b.shape) < 1.0 - p_b
    return MaskPair(plus, minus)


def arm_mask_pairs(phi: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> tuple[MaskPair, MaskPair]:
    """Antithetic mask pairs (greater-than variant, less-than variant).

    Broadcasts, so ``v1``/``v2`` may carry a leading sample axis.
    """
    s_pos = expit(phi)
    s_neg = expit(-phi)
    gt = MaskPair(v1 > s_neg, v2 > s_pos)
    lt = MaskPair(v1 < s_pos, v2 < s_neg)
    return gt, lt


def arm_gradient(loss_gt, loss_lt, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Single-sample estimate of d E[L] / d phi for the paired (plus, minus) masks.

    ``loss_gt``/``loss_lt`` may be scalars or arrays aligned with a leading
    sample axis of ``v1``/``v2``.
    """
    delta = np.asarray(loss_gt, dtype=np.float64) - np.asarray(loss_lt, dtype=np.float64)
    return delta[..., None] * (v1 - v2) if delta.ndim else delta * (v1 - v2)


def arm_estimate(f_gt, f_lt, v: np.ndarray) -> np.ndarray:
    """Plain ARM estimate for one Bernoulli vector with logits ``phi``.

    ``f_gt = f(1[v > sigmoid(-phi)])``, ``f_lt = f(1[v < sigmoid(phi)])``.
    """
    delta = np.asarray(f_gt, dtype=np.float64) - np.asarray(f_lt, dtype=np.float64)
    return (delta[..., None] if delta.ndim else delta) * (v - 0.5)


def reinforce_estimate(f_x, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Score-function estimate ``f(x) * (x - sigmoid(phi))``; a variance baseline only."""
    f_x = np.asarray(f_x, dtype=np.float64)
    return (f_x[..., None] if f_x.ndim else f_x) * (x - expit(phi))


def popularity_probabilities(graph: InteractionGraph) -> np.ndarray:
    """Fixed per-edge keep probability proportional to item popularity (max-scaled)."""
    deg = graph.item_degree.astype(np.float64)
    return deg[graph.items] / deg.max()


def write_pb_report(path: str | Path, graph: InteractionGraph, p_b: np.ndarray,
                    item_groups: Optional[np.ndarray] = None) -> None:
    """CSV ``edge_index,user,item,p_b,item_popularity_group``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_index", "user", "item", "p_b", "item_popularity_group"])
        for e, (u, i) in enumerate(zip(graph.users, graph.items)):
            group = "" if item_groups is None else int(item_groups[i])
            w.writerow([e, int(u), int(i), repr(float(p_b[e])), group])
