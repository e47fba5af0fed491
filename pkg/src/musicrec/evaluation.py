"""Full-ranking Recall@k / NDCG@k under the leave-two-out protocol."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .core import interaction_matrix
from .data import Split
from .model import ForwardState

CUTOFFS = (10, 20)
BUCKETS = (("1-5", 1, 5), ("6-20", 6, 20), ("21-50", 21, 50), ("50+", 51, None))


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    return int(target in list(ranked[:k]))


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    for pos, item in enumerate(list(ranked[:k]), start=1):
        if item == target:
            return 1.0 / math.log2(pos + 1)
    return 0.0


def rank_items(scores: np.ndarray, exclude: Iterable[int] = ()) -> np.ndarray:
    """Item ids by descending score, ties to the lower id, ``exclude`` removed."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(len(scores)), -scores))
    excl = set(int(i) for i in exclude)
    if excl:
        order = np.array([i for i in order if int(i) not in excl], dtype=np.int64)
    return order


def rank_for_user(u: int, state: ForwardState, exclude: Iterable[int] = ()) -> np.ndarray:
    with torch.no_grad():
        scores = (state.I_fused @ state.U_ui[int(u)]).double().numpy()
    return rank_items(scores, exclude)


def target_ranks(scores: np.ndarray, targets: np.ndarray, exclude: Optional[np.ndarray] = None) -> np.ndarray:
    """1-based rank of each row's target under the :func:`rank_items` order.

    Computed by counting rather than sorting. ``exclude`` is a boolean
    mask of candidates removed from each row; an excluded target gets rank
    ``inf``.
    """
    scores = np.asarray(scores)
    B, N = scores.shape
    rows = np.arange(B)
    t_score = scores[rows, targets][:, None]
    ids = np.arange(N)[None, :]
    ahead = (scores > t_score) | ((scores == t_score) & (ids < targets[:, None]))
    if exclude is not None:
        ahead &= ~exclude
    ranks = ahead.sum(axis=1).astype(np.float64) + 1.0
    if exclude is not None:
        ranks[exclude[rows, targets]] = np.inf
    return ranks


def metrics_from_ranks(ranks: np.ndarray, cutoffs=CUTOFFS) -> Dict[str, float]:
    out = {}
    n = max(len(ranks), 1)
    for k in cutoffs:
        hit = ranks <= k
        out[f"recall@{k}"] = float(hit.sum() / n)
        gains = np.zeros(len(ranks))
        gains[hit] = 1.0 / np.log2(ranks[hit] + 1.0)
        out[f"ndcg@{k}"] = float(gains.sum() / n)
    return out


@dataclass
class EvalReport:
    mode: str
    n_users: int
    metrics: Dict[str, float]
    buckets: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"mode={self.mode} users={self.n_users}"]
        keys = sorted(self.metrics)
        lines.append("  ".join(f"{k:>10}" for k in keys))
        lines.append("  ".join(f"{self.metrics[k]:>10.4f}" for k in keys))
        if self.buckets:
            lines.append(f"{'bucket':>8}  {'users':>6}  {'recall@20':>10}  {'ndcg@20':>10}")
            for name, row in self.buckets.items():
                lines.append(f"{name:>8}  {int(row['users']):>6}  {row['recall@20']:>10.4f}  {row['ndcg@20']:>10.4f}")
        return "\n".join(lines)


def user_ranks(split: Split, state: ForwardState, mode: str, users: Optional[np.ndarray] = None,
               batch_size: int = 4096) -> np.ndarray:
    targets = split.heldout(mode)
    if state.I_fused.shape[0] != split.n_items:
        raise ValueError(f"state scores {state.I_fused.shape[0]} items, split has {split.n_items}")
    if users is None:
        users = np.arange(split.n_users)
    R = interaction_matrix(split.train).tocsr()
    ranks = np.empty(len(users))
    with torch.no_grad():
        items_T = state.I_fused.T
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            scores = (state.U_ui[torch.from_numpy(chunk)] @ items_T).double().numpy()
            seen = R[chunk].toarray() > 0
            ranks[start:start + len(chunk)] = target_ranks(scores, targets[chunk], seen)
    return ranks


def evaluate(split: Split, state: ForwardState, mode: str = "valid", users: Optional[np.ndarray] = None,
             batch_size: int = 4096) -> EvalReport:
    """Average Recall/NDCG@{10,20} over users, ranking all unseen items."""
    users = np.arange(split.n_users) if users is None else np.asarray(users, dtype=np.int64)
    ranks = user_ranks(split, state, mode, users, batch_size)
    return EvalReport(mode=mode, n_users=len(users), metrics=metrics_from_ranks(ranks))


def bucket_of(train_length: int) -> str:
    for name, lo, hi in BUCKETS:
        if train_length >= lo and (hi is None or train_length <= hi):
            return name
    raise ValueError(f"no bucket for history length {train_length}")


def bucket_evaluate(split: Split, state: ForwardState, mode: str = "test", batch_size: int = 4096) -> EvalReport:
    """Overall test metrics plus a breakdown by train-history length."""
    ranks = user_ranks(split, state, mode, None, batch_size)
    lengths = np.bincount(split.train.users, minlength=split.n_users)
    names = np.array([bucket_of(int(n)) for n in lengths])
    buckets = {}
    for name, _, _ in BUCKETS:
        sel = names == name
        m = metrics_from_ranks(ranks[sel], (20,)) if sel.any() else {"recall@20": 0.0, "ndcg@20": 0.0}
        buckets[name] = {"users": int(sel.sum()), **m}
    return EvalReport(mode=mode, n_users=split.n_users, metrics=metrics_from_ranks(ranks), buckets=buckets)
