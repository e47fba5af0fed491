"""Cluster-planted synthetic interaction data with matching item features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InteractionLog, reindex


@dataclass(frozen=True)
class SyntheticDataset:
    log: InteractionLog
    F_v: np.ndarray
    F_t: np.ndarray
    user_cluster: np.ndarray
    item_cluster: np.ndarray


def make_cluster_dataset(n_users: int = 200, n_items: int = 120, n_clusters: int = 4, p_in: float = 0.9,
                         min_len: int = 6, max_len: int = 12, max_step: int = 3, d_v: int = 32, d_t: int = 16,
                         noise_v: float = 0.5, noise_t: float = 0.5, seed: int = 0) -> SyntheticDataset:
    """Users walk along a ring of items inside their own cluster.

    Each cluster's items are laid out on a ring. A user starts at a random
    ring position and moves forward 1..``max_step`` places per interaction;
    with probability ``1 - p_in`` an interaction is instead a random item
    from another cluster. No user repeats an item.

    Item features are a per-cluster centroid plus an embedding of the ring
    angle plus Gaussian noise, drawn independently per modality. Raw item
    ids are integers (so binary feature files index by item) and raw user
    ids are ``u<k>``.
    """
    rng = np.random.default_rng(seed)
    item_cluster = rng.permutation(np.arange(n_items) % n_clusters)
    members = [rng.permutation(np.flatnonzero(item_cluster == c)) for c in range(n_clusters)]
    ring_pos = np.zeros(n_items, dtype=np.int64)
    ring_size = np.zeros(n_items, dtype=np.int64)
    for ring in members:
        ring_pos[ring] = np.arange(len(ring))
        ring_size[ring] = len(ring)
    user_cluster = rng.integers(0, n_clusters, size=n_users)

    raw = []
    for u in range(n_users):
        ring = members[user_cluster[u]]
        others = np.flatnonzero(item_cluster != user_cluster[u])
        length = int(rng.integers(min_len, max_len + 1))
        used = set()
        pos = int(rng.integers(0, len(ring)))
        t = int(rng.integers(0, 1000))
        for _ in range(length):
            if rng.random() < p_in and len(used & set(ring.tolist())) < len(ring):
                pos = (pos + int(rng.integers(1, max_step + 1))) % len(ring)
                while int(ring[pos]) in used:
                    pos = (pos + 1) % len(ring)
                item = int(ring[pos])
            else:
                free = [i for i in others if int(i) not in used]
                item = int(free[rng.integers(0, len(free))])
            used.add(item)
            t += int(rng.integers(1, 100))
            raw.append((f"u{u}", item, t))

    log = reindex(raw)
    dense_to_raw = np.array(log.item_ids, dtype=np.int64)
    angle = 2 * np.pi * ring_pos / np.maximum(ring_size, 1)

    def features(dim, noise):
        centroids = rng.normal(size=(n_clusters, dim))
        basis = rng.normal(size=(2, dim))
        circle = np.stack([np.cos(angle), np.sin(angle)], axis=1) @ basis
        F = centroids[item_cluster] + circle + noise * rng.normal(size=(n_items, dim))
        return F[dense_to_raw]

    F_v = features(d_v, noise_v)
    F_t = features(d_t, noise_t)
    return SyntheticDataset(
        log=log,
        F_v=F_v,
        F_t=F_t,
        user_cluster=np.array([user_cluster[int(str(r)[1:])] for r in log.user_ids]),
        item_cluster=item_cluster[dense_to_raw],
    )
