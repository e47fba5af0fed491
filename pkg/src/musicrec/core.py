"""Shared value types: interaction logs, hyperparameters and model parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch


class ConfigError(ValueError):
    """Raised for an invalid hyperparameter or run configuration."""


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


# ---------------------------------------------------------------------------
# interaction log
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InteractionLog:
    """Dense, chronologically ordered (user, item, timestamp) triples.

    Rows are sorted by user and then by time; equal timestamps keep their
    input order, so the row position is the total order within a user.
    ``user_ids[u]`` / ``item_ids[i]`` hold the raw identifiers behind each
    dense index.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_ids: Tuple[Hashable, ...] = ()
    item_ids: Tuple[Hashable, ...] = ()

    def __post_init__(self):
        n = len(self.users)
        if len(self.items) != n or len(self.timestamps) != n:
            raise DataError("users, items and timestamps must have equal length")
        if n and (self.users.min() < 0 or self.users.max() >= self.n_users):
            raise DataError("user id out of range")
        if n and (self.items.min() < 0 or self.items.max() >= self.n_items):
            raise DataError("item id out of range")
        for arr in (self.users, self.items, self.timestamps):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def user_index(self) -> Dict[Hashable, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    @property
    def item_index(self) -> Dict[Hashable, int]:
        return {raw: k for k, raw in enumerate(self.item_ids)}

    def user_offsets(self) -> np.ndarray:
        """CSR-style offsets: rows of user ``u`` are ``offsets[u]:offsets[u+1]``."""
        counts = np.bincount(self.users, minlength=self.n_users)
        return np.concatenate([[0], np.cumsum(counts)])

    def histories(self) -> List[np.ndarray]:
        """Per-user chronological item arrays."""
        off = self.user_offsets()
        return [self.items[off[u]:off[u + 1]] for u in range(self.n_users)]

    def history_timestamps(self) -> List[np.ndarray]:
        off = self.user_offsets()
        return [self.timestamps[off[u]:off[u + 1]] for u in range(self.n_users)]

    def pairs(self) -> set:
        return set(zip(self.users.tolist(), self.items.tolist()))


def _canonical_order(users: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
    # lexsort is stable: ties on (user, t) keep input order
    return np.lexsort((timestamps, users))


def reindex(raw_log: Iterable[Tuple[Hashable, Hashable, int]]) -> InteractionLog:
    """Map raw ids onto dense indices and order every user's history by time.

    Exact duplicate triples are dropped (first occurrence kept). Users are
    numbered by first appearance in the input; items by first appearance
    when histories are walked in canonical (user, time) order.
    """
    seen = set()
    triples = []
    for u, i, t in raw_log:
        key = (u, i, int(t))
        if key in seen:
            continue
        seen.add(key)
        triples.append(key)
    if not triples:
        raise DataError("empty log")

    user_index: Dict[Hashable, int] = {}
    for u, _, _ in triples:
        user_index.setdefault(u, len(user_index))
    users = np.fromiter((user_index[u] for u, _, _ in triples), dtype=np.int64, count=len(triples))
    ts = np.fromiter((t for _, _, t in triples), dtype=np.int64, count=len(triples))
    order = _canonical_order(users, ts)

    item_index: Dict[Hashable, int] = {}
    for k in order:
        item_index.setdefault(triples[k][1], len(item_index))
    items = np.fromiter((item_index[triples[k][1]] for k in order), dtype=np.int64, count=len(order))

    return InteractionLog(
        users=users[order],
        items=items,
        timestamps=ts[order],
        n_users=len(user_index),
        n_items=len(item_index),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    )


def subset_log(log: InteractionLog, keep: np.ndarray) -> InteractionLog:
    """Keep the rows flagged in ``keep`` and compact both id spaces.

    Relative order is preserved, so the result is still canonical.
    """
    users, items = log.users[keep], log.items[keep]
    if len(users) == 0:
        raise DataError("empty log")
    kept_u = np.unique(users)
    kept_i = np.unique(items)
    umap = np.full(log.n_users, -1, dtype=np.int64)
    umap[kept_u] = np.arange(len(kept_u))
    imap = np.full(log.n_items, -1, dtype=np.int64)
    imap[kept_i] = np.arange(len(kept_i))
    user_ids = tuple(log.user_ids[k] for k in kept_u) if log.user_ids else tuple(kept_u.tolist())
    item_ids = tuple(log.item_ids[k] for k in kept_i) if log.item_ids else tuple(kept_i.tolist())
    return InteractionLog(
        users=umap[users],
        items=imap[items],
        timestamps=log.timestamps[keep].copy(),
        n_users=len(kept_u),
        n_items=len(kept_i),
        user_ids=user_ids,
        item_ids=item_ids,
    )


def interaction_matrix(log: InteractionLog) -> sp.csr_matrix:
    """Binary M x N matrix; repeated (u, i) events collapse to one nonzero."""
    data = np.ones(len(log), dtype=np.float64)
    R = sp.csr_matrix((data, (log.users, log.items)), shape=(log.n_users, log.n_items))
    R.sum_duplicates()
    R.data[:] = 1.0
    return R


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class HyperParams:
    d: int = 64
    h: Optional[int] = None  # attention hidden size, defaults to d
    L_ui: int = 3
    L_si: int = 2
    L_mm: int = 1
    L_max: int = 50
    tau_jac: float = 0.5
    tau_cl: float = 0.2
    k_nn: int = 10
    alpha_v: float = 0.1
    alpha_seed: float = 0.1
    alpha_mm: float = 0.2
    lambda_u: float = 0.1
    lambda_i: float = 0.01
    lambda_sv: float = 0.0
    lambda_mm: float = 0.1
    reg: float = 0.0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    eval_batch_size: int = 4096
    max_epochs: int = 1000
    patience: int = 20
    contrast_mode: str = "batch"

    def __post_init__(self):
        if self.h is None:
            object.__setattr__(self, "h", self.d)
        for name in ("d", "h", "L_max", "k_nn", "batch_size", "eval_batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("L_ui", "L_si", "L_mm", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau_jac", "alpha_v", "alpha_mm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("alpha_seed", "lambda_u", "lambda_i", "lambda_sv", "lambda_mm", "reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lambda_sv != 0.0:
            raise ConfigError(
                "lambda_sv must be 0: the sequence-view loss it would weight has no definition"
            )
        if self.tau_cl <= 0:
            raise ConfigError(f"tau_cl must be > 0, got {self.tau_cl}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam coefficients")
        if self.contrast_mode not in ("batch", "full"):
            raise ConfigError(f"contrast_mode must be 'batch' or 'full', got {self.contrast_mode!r}")

    def replace(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------
PARAM_NAMES = ("U", "I", "P", "W_a", "v_a", "W_v", "W_t", "w_beta")


def xavier_bounds(shape: Sequence[int]) -> Tuple[int, int]:
    """(fan_in, fan_out) for a parameter; vectors count as a 1 x n matrix."""
    if len(shape) == 1:
        return shape[0], 1
    fan_out, fan_in = shape[0], shape[1]
    return fan_in, fan_out


def xavier_uniform(shape: Sequence[int], generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    fan_in, fan_out = xavier_bounds(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    out = torch.empty(*shape, dtype=dtype)
    out.uniform_(-bound, bound, generator=generator)
    return out


@dataclass
class ModelParams:
    """All trainable tensors.

    Shapes: U (M, d), I (N, d), P (L_max, d), W_a (h, d), v_a (h,),
    W_v (d_v, d), W_t (d_t, d), w_beta (d,). Projections act on row
    vectors, i.e. ``f @ W_v``.

    The sequence table S is not stored here: it is a derived cache, see
    :class:`musicrec.model.SequenceCache`.
    """

    U: torch.Tensor
    I: torch.Tensor
    P: torch.Tensor
    W_a: torch.Tensor
    v_a: torch.Tensor
    W_v: torch.Tensor
    W_t: torch.Tensor
    w_beta: torch.Tensor

    @classmethod
    def init(cls, hp: HyperParams, n_users: int, n_items: int, d_v: int, d_t: int,
             seed: int = 0, dtype=torch.float32) -> "ModelParams":
        g = torch.Generator().manual_seed(seed)
        d, h = hp.d, hp.h
        shapes = {
            "U": (n_users, d),
            "I": (n_items, d),
            "P": (hp.L_max, d),
            "W_a": (h, d),
            "v_a": (h,),
            "W_v": (d_v, d),
            "W_t": (d_t, d),
            "w_beta": (d,),
        }
        return cls(**{name: xavier_uniform(shapes[name], g, dtype) for name in PARAM_NAMES})

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    def detach_clone(self) -> "ModelParams":
        return ModelParams(**{k: v.detach().clone() for k, v in self.tensors().items()})

    def to(self, dtype) -> "ModelParams":
        return ModelParams(**{k: v.detach().to(dtype).clone() for k, v in self.tensors().items()})

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors().items()}
