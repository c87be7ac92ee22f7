"""Synthetic hierarchical bipartite graphs for smoke tests and benchmarks.

Users belong to planted preference clusters; item popularity follows a
power law, so the interaction data has the head/tail structure the model
is meant to exploit.
"""

from __future__ import annotations

import numpy as np

from .graph import BipartiteGraph

__all__ = ["generate_synthetic", "write_interactions"]


def generate_synthetic(
    num_users: int = 500,
    num_items: int = 300,
    num_clusters: int = 10,
    mean_degree: int = 14,
    in_cluster_prob: float = 0.85,
    popularity_exponent: float = 1.0,
    seed: int = 0,
) -> BipartiteGraph:
    """Power-law item popularity plus planted user-cluster preferences.

    Each user draws most interactions from its own cluster's items,
    popularity-weighted, and the rest from the full catalog.
    """
    rng = np.random.default_rng(seed)
    item_cluster = rng.integers(num_clusters, size=num_items)
    user_cluster = rng.integers(num_clusters, size=num_users)
    # Zipf-like popularity over a random item permutation.
    ranks = rng.permutation(num_items) + 1
    popularity = 1.0 / ranks.astype(np.float64) ** popularity_exponent
    edges = set()
    for u in range(num_users):
        degree = max(4, int(rng.poisson(mean_degree)))
        own = np.flatnonzero(item_cluster == user_cluster[u])
        for _ in range(degree):
            if own.size > 0 and rng.random() < in_cluster_prob:
                pool = own
            else:
                pool = np.arange(num_items)
            weights = popularity[pool]
            item = int(rng.choice(pool, p=weights / weights.sum()))
            edges.add((u, item))
    return BipartiteGraph.from_edges(num_users, num_items, edges)


def write_interactions(g: BipartiteGraph, path) -> None:
    """Emit the tab-separated interaction format understood by the loader."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# synthetic interaction data\n")
        for u, i in g.edge_list():
            fh.write(f"u{u}\ti{i}\n")
