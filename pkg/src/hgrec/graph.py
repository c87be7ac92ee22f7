"""Interaction-graph ingestion, splitting, and the parameter-free
hyperbolic graph convolution built on the Lorentz centroid."""

from __future__ import annotations

import dataclasses
import json
import pathlib

import numpy as np
import torch

from . import geometry
from .geometry import CurvatureSpace

__all__ = [
    "BipartiteGraph",
    "SplitDataset",
    "ParseError",
    "load_interactions",
    "split_train_test",
    "lhgcn_layer",
    "lhgcn_forward",
]


class ParseError(ValueError):
    """Malformed interaction file."""


@dataclasses.dataclass
class BipartiteGraph:
    """User-item interactions in compressed (CSR) form, both directions.

    `user_indptr`/`user_indices` index items per user; the item side is the
    exact transpose.  Indices within each row are sorted and unique.
    """

    num_users: int
    num_items: int
    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray

    @classmethod
    def from_edges(cls, num_users: int, num_items: int, edges) -> "BipartiteGraph":
        """Build from an iterable of (user, item) pairs; duplicates dropped."""
        pairs = sorted(set((int(u), int(i)) for u, i in edges))
        for u, i in pairs:
            if not (0 <= u < num_users and 0 <= i < num_items):
                raise ValueError(f"edge ({u}, {i}) out of range")
        users = np.array([u for u, _ in pairs], dtype=np.int64)
        items = np.array([i for _, i in pairs], dtype=np.int64)
        user_indptr = np.zeros(num_users + 1, dtype=np.int64)
        np.add.at(user_indptr, users + 1, 1)
        user_indptr = np.cumsum(user_indptr)
        order = np.lexsort((items, users))  # already sorted, kept for clarity
        user_indices = items[order]
        t_order = np.lexsort((users, items))
        item_indptr = np.zeros(num_items + 1, dtype=np.int64)
        np.add.at(item_indptr, items + 1, 1)
        item_indptr = np.cumsum(item_indptr)
        item_indices = users[t_order]
        return cls(num_users, num_items, user_indptr, user_indices,
                   item_indptr, item_indices)

    @property
    def num_edges(self) -> int:
        return int(self.user_indices.shape[0])

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def user_items(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_users(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    def edge_list(self) -> np.ndarray:
        """(E, 2) array of (user, item) pairs in user-major order."""
        users = np.repeat(np.arange(self.num_users), self.user_degrees)
        return np.stack([users, self.user_indices], axis=1)


@dataclasses.dataclass
class SplitDataset:
    train: BipartiteGraph
    test: dict[int, set[int]]
    seed: int


def load_interactions(path, mapping_path=None) -> BipartiteGraph:
    """Read a tab-separated interaction file into a bipartite graph.

    Lines are `user<TAB>item[<TAB>rating<TAB>timestamp]`; extra columns are
    ignored, `#` lines skipped, duplicate edges deduplicated.  Raw IDs are
    reindexed contiguously from 0 and the mapping is written as JSON next to
    the data file (or to `mapping_path` when given).
    """
    path = pathlib.Path(path)
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
                raise ParseError(f"{path}:{lineno}: expected user<TAB>item")
            u_raw, i_raw = fields[0].strip(), fields[1].strip()
            u = user_ids.setdefault(u_raw, len(user_ids))
            i = item_ids.setdefault(i_raw, len(item_ids))
            edges.append((u, i))
    if not edges:
        raise ValueError(f"{path}: no interactions found")
    graph = BipartiteGraph.from_edges(len(user_ids), len(item_ids), edges)
    mapping = {
        "users": {raw: idx for raw, idx in user_ids.items()},
        "items": {raw: idx for raw, idx in item_ids.items()},
    }
    target = pathlib.Path(mapping_path) if mapping_path else path.with_suffix(
        path.suffix + ".idmap.json"
    )
    try:
        target.write_text(json.dumps(mapping))
    except OSError:
        pass  # read-only data directory; the mapping is reproducible anyway
    return graph


def split_train_test(
    g: BipartiteGraph, test_fraction: float, seed: int
) -> SplitDataset:
    """Per-user random holdout of ceil(fraction * degree) items, capped at
    degree - 1 so every tested user keeps at least one training edge."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_edges = []
    test: dict[int, set[int]] = {}
    for u in range(g.num_users):
        items = g.user_items(u)
        deg = len(items)
        n_test = min(int(np.ceil(test_fraction * deg)), deg - 1)
        if n_test <= 0:
            train_edges.extend((u, i) for i in items)
            continue
        held = rng.choice(items, size=n_test, replace=False)
        held_set = set(int(i) for i in held)
        test[u] = held_set
        train_edges.extend((u, i) for i in items if int(i) not in held_set)
    train = BipartiteGraph.from_edges(g.num_users, g.num_items, train_edges)
    return SplitDataset(train=train, test=test, seed=seed)


def _neighbor_matrices(g: BipartiteGraph):
    """Sparse user->item and item->user adjacency as torch COO tensors."""
    users = np.repeat(np.arange(g.num_users), g.user_degrees)
    idx_ui = torch.from_numpy(np.stack([users, g.user_indices]))
    vals = torch.ones(g.num_edges, dtype=torch.float64)
    a_ui = torch.sparse_coo_tensor(
        idx_ui, vals, (g.num_users, g.num_items), check_invariants=False
    ).coalesce()
    items = np.repeat(np.arange(g.num_items), g.item_degrees)
    idx_iu = torch.from_numpy(np.stack([items, g.item_indices]))
    a_iu = torch.sparse_coo_tensor(
        idx_iu, vals, (g.num_items, g.num_users), check_invariants=False
    ).coalesce()
    return a_ui, a_iu


def lhgcn_layer(
    space: CurvatureSpace,
    g: BipartiteGraph,
    users: torch.Tensor,
    items: torch.Tensor,
    _adj=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One parameter-free convolution: each node becomes the unweighted
    Lorentz centroid of itself and its cross-side neighbors.

    Both sides are updated simultaneously from the layer inputs.  The
    centroid closed form normalizes the plain neighbor sum, so no degree
    weights appear; isolated nodes are singleton centroids, i.e. unchanged.
    """
    a_ui, a_iu = _adj if _adj is not None else _neighbor_matrices(g)
    sum_u = users + torch.sparse.mm(a_ui, items)
    sum_i = items + torch.sparse.mm(a_iu, users)
    new_u = space.sqrt_k * sum_u / geometry.lorentz_magnitude(sum_u, keepdim=True)
    new_i = space.sqrt_k * sum_i / geometry.lorentz_magnitude(sum_i, keepdim=True)
    return new_u, new_i


def lhgcn_forward(
    space: CurvatureSpace,
    g: BipartiteGraph,
    users: torch.Tensor,
    items: torch.Tensor,
    num_layers: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """num_layers-fold composition of lhgcn_layer; 0 layers is the identity."""
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    adj = _neighbor_matrices(g) if num_layers > 0 else None
    for _ in range(num_layers):
        users, items = lhgcn_layer(space, g, users, items, _adj=adj)
    return users, items
