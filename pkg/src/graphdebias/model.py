"""Linear graph propagation (LightGCN style), readout, scoring and its reverse pass."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass
class EmbeddingModel:
    """Layer-0 embeddings of all nodes, users first then items.

    ``n_layers = 0`` turns propagation into the identity, i.e. plain matrix factorization.
    """

    weights: np.ndarray
    n_users: int
    n_layers: int = 2

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[1] < 1:
            raise ValueError("embedding dimension must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @classmethod
    def init(cls, n_users: int, n_items: int, dim: int, n_layers: int,
             rng: np.random.Generator, std: float = 0.1) -> "EmbeddingModel":
        weights = rng.normal(0.0, std, size=(n_users + n_items, dim))
        return cls(weights, n_users, n_layers)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_items(self) -> int:
        return self.weights.shape[0] - self.n_users

    @property
    def user_embed(self) -> np.ndarray:
        return self.weights[:self.n_users]

    @property
    def item_embed(self) -> np.ndarray:
        return self.weights[self.n_users:]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.weights.copy(), self.n_users, self.n_layers)


@dataclass
class PropagationTrace:
    layers: list[np.ndarray]
    adj: sp.csr_matrix

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


def propagate(model: EmbeddingModel, adj: sp.spmatrix) -> PropagationTrace:
    n = model.weights.shape[0]
    if adj.shape != (n, n):
        raise ValueError(f"adjacency shape {adj.shape} does not match {n} nodes")
    layers = [model.weights]
    for _ in range(model.n_layers):
        layers.append(adj @ layers[-1])
    return PropagationTrace(layers, adj)


def readout(trace: PropagationTrace) -> np.ndarray:
    """Uniform mean over layers 0..L."""
    return sum(trace.layers) / len(trace.layers)


def score(z_u: np.ndarray, z_i: np.ndarray) -> float:
    return float(np.dot(z_u, z_i))


def backward_propagate(trace: PropagationTrace, grad_readout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. layer-0 embeddings given the gradient w.r.t. the readout.

    Computes ``(1/(L+1)) * sum_l (A^T)^l G`` in Horner form.
    """
    if grad_readout.shape != trace.layers[0].shape:
        raise ValueError("gradient shape does not match node representations")
    adj_t = trace.adj.T
    acc = grad_readout
    for _ in range(trace.n_layers):
        acc = grad_readout + adj_t @ acc
    return acc / (trace.n_layers + 1)


def representations(model: EmbeddingModel, adj: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Final (users, items) representations on a given graph view."""
    z = readout(propagate(model, adj))
    return z[:model.n_users], z[model.n_users:]


def export_embeddings(path: str | Path, users: np.ndarray, items: np.ndarray) -> None:
    """CSV ``node_type,index,dim_0..dim_{d-1}``."""
    d = users.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_type", "index"] + [f"dim_{k}" for k in range(d)])
        for node_type, mat in (("user", users), ("item", items)):
            for idx, row in enumerate(mat):
                w.writerow([node_type, idx] + [repr(float(x)) for x in row])
