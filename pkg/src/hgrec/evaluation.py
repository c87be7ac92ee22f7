"""Top-k ranking evaluation: recall, NDCG, and tail-item exposure."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch

from . import geometry
from .geometry import CurvatureSpace
from .graph import SplitDataset

__all__ = [
    "RankedList",
    "MetricsReport",
    "rank_items",
    "recall_at_k",
    "ndcg_at_k",
    "tail_percentage_at_k",
    "head_item_mask",
    "evaluate_ranking",
]


@dataclasses.dataclass
class RankedList:
    """Top-k recommendations per user, training items excluded.

    `users[i]` owns row i of `items`; rows may be shorter than k when a user
    has interacted with almost everything, in which case they are padded
    with -1.
    """

    users: np.ndarray  # (n,)
    items: np.ndarray  # (n, k), -1 padded
    k: int

    def row(self, idx: int) -> np.ndarray:
        r = self.items[idx]
        return r[r >= 0]


@dataclasses.dataclass
class MetricsReport:
    run_id: str
    metrics: dict  # k -> {"recall": ..., "ndcg": ..., "tail_pct": ...}
    excluded_users: int
    head_quantile: float

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "excluded_users": self.excluded_users,
            "head_quantile": self.head_quantile,
        }
        for k, vals in sorted(self.metrics.items()):
            payload[f"recall@{k}"] = vals["recall"]
            payload[f"ndcg@{k}"] = vals["ndcg"]
            payload[f"tail_pct@{k}"] = vals["tail_pct"]
        return json.dumps(payload, sort_keys=True)

    def append_csv(self, path) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for k, vals in sorted(self.metrics.items()):
                fh.write(
                    f"{self.run_id},{k},{vals['recall']:.10g},"
                    f"{vals['ndcg']:.10g},{vals['tail_pct']:.10g}\n"
                )


def rank_items(
    space: CurvatureSpace,
    u_final: torch.Tensor,
    i_final: torch.Tensor,
    split: SplitDataset,
    k: int,
    users: np.ndarray | None = None,
    chunk: int = 512,
) -> RankedList:
    """Rank items per user by ascending hyperbolic distance, skipping the
    user's training items; distance ties break by ascending item index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = split.train
    if users is None:
        users = np.array(sorted(split.test.keys()), dtype=np.int64)
    rows = np.full((len(users), k), -1, dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(users), chunk):
            batch = users[start:start + chunk]
            u = u_final[torch.from_numpy(batch)].unsqueeze(1)  # (b, 1, d+1)
            d = geometry.distance(space, u, i_final.unsqueeze(0))  # (b, M)
            for row, user in enumerate(batch):
                d[row, torch.from_numpy(g.user_items(int(user)))] = torch.inf
            order = torch.argsort(d, dim=1, stable=True)
            for row, user in enumerate(batch):
                n_valid = g.num_items - len(g.user_items(int(user)))
                take = min(k, n_valid)
                rows[start + row, :take] = order[row, :take].numpy()
    return RankedList(users=users, items=rows, k=k)


def recall_at_k(ranked: RankedList, truth: dict[int, set[int]], k: int):
    """Mean over users of |top-k  truth| / |truth|; users with empty truth
    are excluded and counted."""
    total, used, excluded = 0.0, 0, 0
    for idx, user in enumerate(ranked.users):
        rel = truth.get(int(user), set())
        if not rel:
            excluded += 1
            continue
        hits = sum(1 for i in ranked.row(idx)[:k] if int(i) in rel)
        total += hits / len(rel)
        used += 1
    return (total / used if used else 0.0), excluded


def ndcg_at_k(ranked: RankedList, truth: dict[int, set[int]], k: int):
    """Log-discounted ranking quality normalized by the ideal ordering."""
    total, used, excluded = 0.0, 0, 0
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    for idx, user in enumerate(ranked.users):
        rel = truth.get(int(user), set())
        if not rel:
            excluded += 1
            continue
        row = ranked.row(idx)[:k]
        dcg = sum(discounts[pos] for pos, i in enumerate(row) if int(i) in rel)
        ideal = discounts[: min(len(rel), k)].sum()
        total += dcg / ideal
        used += 1
    return (total / used if used else 0.0), excluded


def head_item_mask(
    popularity: np.ndarray, quantile: float = 0.8
) -> np.ndarray:
    """Boolean mask of head items: the top (1 - quantile) fraction by
    training degree, with ties at the threshold degree going to head."""
    num_items = len(popularity)
    n_head = int(round((1.0 - quantile) * num_items))
    if n_head <= 0:
        return np.zeros(num_items, dtype=bool)
    threshold = np.sort(popularity)[::-1][n_head - 1]
    return popularity >= threshold


def tail_percentage_at_k(
    ranked: RankedList,
    popularity: np.ndarray,
    quantile: float = 0.8,
    k: int | None = None,
) -> float:
    """Mean fraction of tail items in each user's top-k list."""
    k = k if k is not None else ranked.k
    head = head_item_mask(popularity, quantile)
    fractions = []
    for idx in range(len(ranked.users)):
        row = ranked.row(idx)[:k]
        if len(row) == 0:
            continue
        tail_hits = int((~head[row]).sum())
        fractions.append(tail_hits / len(row))
    return float(np.mean(fractions)) if fractions else 0.0


def evaluate_ranking(
    space: CurvatureSpace,
    u_final: torch.Tensor,
    i_final: torch.Tensor,
    split: SplitDataset,
    ks=(10, 20),
    head_quantile: float = 0.8,
    run_id: str = "run",
) -> MetricsReport:
    popularity = split.train.item_degrees
    metrics = {}
    excluded = 0
    ranked_max = rank_items(space, u_final, i_final, split, max(ks))
    for k in ks:
        recall, excl = recall_at_k(ranked_max, split.test, k)
        ndcg, _ = ndcg_at_k(ranked_max, split.test, k)
        tail = tail_percentage_at_k(ranked_max, popularity, head_quantile, k)
        metrics[k] = {"recall": recall, "ndcg": ndcg, "tail_pct": tail}
        excluded = excl
    return MetricsReport(
        run_id=run_id,
        metrics=metrics,
        excluded_users=excluded,
        head_quantile=head_quantile,
    )
