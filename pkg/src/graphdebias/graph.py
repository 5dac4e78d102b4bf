"""Bipartite user-item interaction graph, edge masks and normalized adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionGraph:
    """Deduplicated user-item edges in canonical (user, item) sorted order.

    Node ``u`` of the joint node set is user ``u``; node ``n_users + i`` is item ``i``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return int(self.users.shape[0])

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.users, self.items], axis=1)

    @property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    @property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def positives(self) -> list[np.ndarray]:
        """Per-user array of interacted items."""
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [self.items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def dense(self) -> np.ndarray:
        y = np.zeros((self.n_users, self.n_items), dtype=bool)
        y[self.users, self.items] = True
        return y


def build_graph(
    interactions: Iterable[tuple[int, int]],
    n_users: Optional[int] = None,
    n_items: Optional[int] = None,
) -> InteractionGraph:
    if not isinstance(interactions, np.ndarray):
        interactions = list(interactions)
    pairs = np.asarray(interactions, dtype=np.int64)
    if pairs.size == 0:
        raise GraphError("empty graph")
    pairs = pairs.reshape(-1, 2)
    if (pairs < 0).any():
        raise GraphError("negative node index")
    pairs = np.unique(pairs, axis=0)  # sorts lexicographically by (user, item)
    n_users = int(pairs[:, 0].max()) + 1 if n_users is None else int(n_users)
    n_items = int(pairs[:, 1].max()) + 1 if n_items is None else int(n_items)
    if pairs[:, 0].max() >= n_users or pairs[:, 1].max() >= n_items:
        raise GraphError("edge index out of range")
    return InteractionGraph(n_users, n_items, pairs[:, 0].copy(), pairs[:, 1].copy())


def _check_mask(graph: InteractionGraph, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (graph.n_edges,):
        raise GraphError(f"mask length {mask.shape} does not match edge count {graph.n_edges}")
    return mask.astype(bool)


def apply_mask(graph: InteractionGraph, mask: np.ndarray) -> InteractionGraph:
    keep = _check_mask(graph, mask)
    return InteractionGraph(graph.n_users, graph.n_items, graph.users[keep], graph.items[keep])


def normalize(graph: InteractionGraph, mask: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Symmetric ``D^-1/2 A D^-1/2`` over the joint node set.

    Degrees are taken on the masked graph, so each dropout view is itself a
    properly normalized graph. Isolated nodes get all-zero rows.
    """
    if mask is None:
        users, items = graph.users, graph.items
    else:
        keep = _check_mask(graph, mask)
        users, items = graph.users[keep], graph.items[keep]
    du = np.bincount(users, minlength=graph.n_users).astype(np.float64)
    di = np.bincount(items, minlength=graph.n_items).astype(np.float64)
    w = 1.0 / np.sqrt(du[users] * di[items]) if users.size else np.empty(0)
    rows = np.concatenate([users, items + graph.n_users])
    cols = np.concatenate([items + graph.n_users, users])
    vals = np.concatenate([w, w])
    n = graph.n_nodes
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
