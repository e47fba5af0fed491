"""Forward pass: UI, SI and MM branches, sequence pooling, fusion and scoring."""
from __future__ import annotations

import collections
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .core import DataError, HyperParams, ModelParams, PARAM_NAMES
from .data import SequenceSet
from .graphs import NormalizedSparseGraph

# Sparse propagation steps by graph kind; reset and read by the trainer.
propagation_counter: collections.Counter = collections.Counter()

NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------
def propagate(G: Union[NormalizedSparseGraph, torch.Tensor], X: torch.Tensor, L: int,
              aggregate: str = "mean_over_layers") -> torch.Tensor:
    """Apply ``Z <- G Z`` ``L`` times starting from ``X``.

    ``mean_over_layers`` returns the mean of Z^(0..L); ``last_layer``
    returns Z^(L).
    """
    if aggregate not in ("mean_over_layers", "last_layer"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if L < 0:
        raise ValueError("L must be >= 0")
    if isinstance(G, NormalizedSparseGraph):
        kind, A = G.kind, G.torch(X.dtype)
    else:
        kind, A = "raw", G
    if A.shape[0] != X.shape[0] or A.shape[1] != X.shape[0]:
        raise ValueError(f"graph of size {tuple(A.shape)} cannot propagate {X.shape[0]} rows")
    Z = X
    total = X
    for _ in range(L):
        Z = torch.sparse.mm(A, Z)
        propagation_counter[kind] += 1
        if aggregate == "mean_over_layers":
            total = total + Z
    if aggregate == "last_layer":
        return Z
    return total / (L + 1)


def ui_forward(G_ui, U: torch.Tensor, I: torch.Tensor, L_ui: int) -> Tuple[torch.Tensor, torch.Tensor]:
    Z = propagate(G_ui, torch.cat([U, I], dim=0), L_ui, "mean_over_layers")
    return Z[:U.shape[0]], Z[U.shape[0]:]


def si_forward(G_si, S: torch.Tensor, I: torch.Tensor, L_si: int) -> Tuple[torch.Tensor, torch.Tensor]:
    Z = propagate(G_si, torch.cat([S, I], dim=0), L_si, "last_layer")
    return Z[:S.shape[0]], Z[S.shape[0]:]


# ---------------------------------------------------------------------------
# sequence pooling
# ---------------------------------------------------------------------------
def item_attention_logits(I: torch.Tensor, W_a: torch.Tensor, v_a: torch.Tensor) -> torch.Tensor:
    # the logit of a position depends on its item only, so score the whole table once
    return torch.tanh(I @ W_a.T) @ v_a


def _attention_pool_rows(idx: torch.Tensor, I, P, logits) -> torch.Tensor:
    """Pool a (B, l) block of equal-length sequences."""
    a = torch.softmax(logits[idx], dim=-1)
    X = I[idx] + P[:idx.shape[1]]
    return (a.unsqueeze(-1) * X).sum(dim=1)


def attention_pool(seq: Sequence[int], params: ModelParams) -> torch.Tensor:
    """Additive-attention summary of one item sequence.

    Weights come from the raw item embeddings; the positional table is added
    to the pooled values only.
    """
    if len(seq) == 0:
        raise ValueError("cannot pool an empty sequence")
    if len(seq) > params.P.shape[0]:
        raise ValueError(f"sequence of length {len(seq)} exceeds L_max={params.P.shape[0]}")
    idx = torch.tensor(np.asarray(seq, dtype=np.int64)).unsqueeze(0)
    logits = item_attention_logits(params.I, params.W_a, params.v_a)
    return _attention_pool_rows(idx, params.I, params.P, logits)[0]


def attention_weights(seq: Sequence[int], params: ModelParams) -> torch.Tensor:
    idx = torch.tensor(np.asarray(seq, dtype=np.int64))
    return torch.softmax(item_attention_logits(params.I, params.W_a, params.v_a)[idx], dim=-1)


def sinusoidal_table(L: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(L, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    pe = torch.zeros(L, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe.to(dtype)


def _sinusoidal_pool_rows(idx: torch.Tensor, I) -> torch.Tensor:
    pe = sinusoidal_table(idx.shape[1], I.shape[1], I.dtype)
    return (I[idx] + pe).mean(dim=1)


def sinusoidal_pool(seq: Sequence[int], params: ModelParams) -> torch.Tensor:
    """Parameter-free alternative: fixed sinusoidal positions, uniform mean."""
    if len(seq) == 0:
        raise ValueError("cannot pool an empty sequence")
    idx = torch.tensor(np.asarray(seq, dtype=np.int64)).unsqueeze(0)
    return _sinusoidal_pool_rows(idx, params.I)[0]


class SequenceCache:
    """Cached pooled vector per sequence node (the S table).

    Sequences are grouped by length so that batched pooling is bit-identical
    to pooling each sequence on its own.
    """

    def __init__(self, seqs: SequenceSet, d: int, pooling: str = "attention", dtype=torch.float32):
        if pooling not in ("attention", "sinusoidal"):
            raise ValueError(f"unknown pooling {pooling!r}")
        lens = seqs.lengths()
        if len(lens) and lens.min() < 1:
            raise ValueError("every sequence node needs at least one item")
        self.seqs = seqs
        self.pooling = pooling
        self.lengths = lens
        self.vectors = torch.zeros(len(seqs), d, dtype=dtype)
        self.epoch_stamp = np.full(len(seqs), -1, dtype=np.int64)
        self._groups: Dict[int, Tuple[np.ndarray, torch.Tensor]] = {}
        for length in np.unique(lens):
            users = np.flatnonzero(lens == length)
            idx = torch.from_numpy(np.stack([seqs.seqs[u] for u in users]).astype(np.int64))
            self._groups[int(length)] = (users, idx)
        self._pos_in_group = np.zeros(len(seqs), dtype=np.int64)
        for users, _ in self._groups.values():
            self._pos_in_group[users] = np.arange(len(users))

    def __len__(self):
        return len(self.lengths)

    def pool(self, users: np.ndarray, params: ModelParams) -> torch.Tensor:
        """Pool the given sequences under ``params`` (differentiable)."""
        users = np.asarray(users, dtype=np.int64)
        out = torch.empty(len(users), params.I.shape[1], dtype=params.I.dtype)
        if self.pooling == "attention":
            logits = item_attention_logits(params.I, params.W_a, params.v_a)
        parts, where = [], []
        ulens = self.lengths[users]
        for length in np.unique(ulens):
            pos = np.flatnonzero(ulens == length)
            g_users, g_idx = self._groups[int(length)]
            idx = g_idx[torch.from_numpy(self._pos_in_group[users[pos]])]
            if self.pooling == "attention":
                parts.append(_attention_pool_rows(idx, params.I, params.P, logits))
            else:
                parts.append(_sinusoidal_pool_rows(idx, params.I))
            where.append(pos)
        if not parts:
            return out
        order = torch.from_numpy(np.concatenate(where))
        return torch.cat(parts, dim=0)[torch.argsort(order)]

    def refresh(self, params: ModelParams, scope="all", epoch: int = 0) -> None:
        """Recompute cached rows: ``scope`` is ``"all"`` or an array of user ids."""
        users = np.arange(len(self)) if isinstance(scope, str) and scope == "all" else np.asarray(scope)
        with torch.no_grad():
            self.vectors[torch.from_numpy(users)] = self.pool(users, params).to(self.vectors.dtype)
        self.epoch_stamp[users] = epoch

    def live(self, users: np.ndarray, params: ModelParams, epoch: int = 0, update: bool = True):
        """Return S with the rows of ``users`` recomputed and carrying gradient.

        All other rows are the cached constants.
        """
        users = np.unique(np.asarray(users, dtype=np.int64))
        fresh = self.pool(users, params)
        if update:
            with torch.no_grad():
                self.vectors[torch.from_numpy(users)] = fresh.detach().to(self.vectors.dtype)
            self.epoch_stamp[users] = epoch
        base = self.vectors.detach().to(fresh.dtype)
        return base.index_copy(0, torch.from_numpy(users), fresh)


# ---------------------------------------------------------------------------
# multimodal branch
# ---------------------------------------------------------------------------
def l2_normalize(X: torch.Tensor) -> torch.Tensor:
    """Row-normalize; rows with norm below 1e-12 stay zero."""
    n = X.norm(dim=1, keepdim=True)
    small = n < NORM_EPS
    return torch.where(small, torch.zeros_like(X), X / torch.where(small, torch.ones_like(n), n))


@dataclass
class MMOutput:
    I_mm: torch.Tensor
    beta: torch.Tensor
    mix: torch.Tensor
    t_norm: torch.Tensor
    v_norm: torch.Tensor


def mm_forward(G_mm, I: torch.Tensor, F_v: torch.Tensor, F_t: torch.Tensor, params: ModelParams,
               alpha_seed: float, L_mm: int, id_seed: bool = True) -> MMOutput:
    """Project, normalize, gate, seed and propagate over the frozen item graph.

    With ``id_seed=False`` the gate is pinned to 0.5 and the seed is the
    content mix alone, without the ID embedding.
    """
    v_norm = l2_normalize(F_v @ params.W_v)
    t_norm = l2_normalize(F_t @ params.W_t)
    if id_seed:
        beta = torch.sigmoid(I @ params.w_beta)
    else:
        beta = torch.full((I.shape[0],), 0.5, dtype=I.dtype)
    b = beta.unsqueeze(1)
    mix = (1.0 - b) * t_norm + b * v_norm
    seed = I + alpha_seed * mix if id_seed else mix
    I_mm = propagate(G_mm, seed, L_mm, "last_layer")
    return MMOutput(I_mm=I_mm, beta=beta, mix=mix, t_norm=t_norm, v_norm=v_norm)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Ablation:
    """Single-flag ablations; at most one may be set."""

    no_ui: bool = False
    no_si: bool = False
    no_mm: bool = False
    no_mm_id_seed: bool = False
    sinusoidal_pool: bool = False

    def __post_init__(self):
        active = self.active()
        if len(active) > 1:
            from .core import ConfigError
            raise ConfigError(f"ablation flags are exclusive, got {active}")

    def active(self):
        return [k for k in ("no_ui", "no_si", "no_mm", "no_mm_id_seed", "sinusoidal_pool") if getattr(self, k)]

    @classmethod
    def named(cls, name: Optional[str]) -> "Ablation":
        if name in (None, "", "full"):
            return cls()
        return cls(**{name: True})

    @property
    def name(self) -> str:
        a = self.active()
        return a[0] if a else "full"


@dataclass
class ForwardState:
    U_ui: torch.Tensor
    I_ui: torch.Tensor
    I_fused: torch.Tensor
    S_si: Optional[torch.Tensor] = None
    I_si: Optional[torch.Tensor] = None
    I_mm: Optional[torch.Tensor] = None
    beta: Optional[torch.Tensor] = None
    mix: Optional[torch.Tensor] = None
    t_norm: Optional[torch.Tensor] = None
    v_norm: Optional[torch.Tensor] = None

    def detach(self) -> "ForwardState":
        return ForwardState(**{k: (v.detach() if isinstance(v, torch.Tensor) else v)
                               for k, v in self.__dict__.items()})


def fuse_and_score(u: int, items: Sequence[int], state: ForwardState, alpha_mm: float) -> torch.Tensor:
    """Inner products of the UI user vector with fused item vectors."""
    n_users, n_items = state.U_ui.shape[0], state.I_ui.shape[0]
    items = torch.tensor(np.asarray(items, dtype=np.int64))
    if not 0 <= int(u) < n_users:
        raise IndexError(f"user {u} out of range [0, {n_users})")
    if len(items) and (int(items.min()) < 0 or int(items.max()) >= n_items):
        raise IndexError(f"item id out of range [0, {n_items})")
    item_vecs = state.I_ui[items]
    if state.I_mm is not None and alpha_mm != 0.0:
        item_vecs = item_vecs + alpha_mm * state.I_mm[items]
    return item_vecs @ state.U_ui[int(u)]


class MuSICRec:
    """Graphs, features, sequence cache and hyperparameters bound together.

    Parameters are passed to :meth:`forward` explicitly so that the trainer,
    the gradient checker and evaluation can share one code path.
    """

    def __init__(self, hp: HyperParams, ui_graph: NormalizedSparseGraph, si_graph: NormalizedSparseGraph,
                 mm_graph: NormalizedSparseGraph, F_v: np.ndarray, F_t: np.ndarray, seqs: SequenceSet,
                 ablation: Ablation = Ablation(), dtype=torch.float32):
        self.hp = hp
        self.ablation = ablation
        self.ui_graph, self.si_graph, self.mm_graph = ui_graph, si_graph, mm_graph
        self.n_users = len(seqs)
        self.n_items = seqs.n_items
        if ui_graph.dim != self.n_users + self.n_items:
            raise ValueError("UI graph size does not match users + items")
        if si_graph.dim != len(seqs) + self.n_items:
            raise ValueError("SI graph size does not match sequences + items")
        if mm_graph.dim != self.n_items:
            raise ValueError("MM graph size does not match items")
        if F_v.shape[0] != self.n_items or F_t.shape[0] != self.n_items:
            raise DataError("feature rows must match the item count")
        self.dtype = dtype
        self.F_v = torch.as_tensor(F_v, dtype=dtype)
        self.F_t = torch.as_tensor(F_t, dtype=dtype)
        self.seqs = seqs
        pooling = "sinusoidal" if ablation.sinusoidal_pool else "attention"
        self.cache = SequenceCache(seqs, hp.d, pooling, dtype)

    @property
    def d_v(self) -> int:
        return self.F_v.shape[1]

    @property
    def d_t(self) -> int:
        return self.F_t.shape[1]

    def init_params(self, seed: int = 0) -> ModelParams:
        return ModelParams.init(self.hp, self.n_users, self.n_items, self.d_v, self.d_t, seed, self.dtype)

    def forward(self, params: ModelParams, batch_users: Optional[np.ndarray] = None,
                epoch: int = 0, update_cache: bool = True, with_si: bool = True) -> ForwardState:
        """Run every active branch.

        ``batch_users`` marks the sequence rows recomputed live (with
        gradient); ``None`` uses the cache as-is. ``with_si=False`` skips
        the SI branch, which scoring does not need.
        """
        hp, ab = self.hp, self.ablation
        if ab.no_ui:
            U_ui, I_ui = params.U, params.I
        else:
            U_ui, I_ui = ui_forward(self.ui_graph, params.U, params.I, hp.L_ui)

        state = ForwardState(U_ui=U_ui, I_ui=I_ui, I_fused=I_ui)
        if not ab.no_mm:
            mm = mm_forward(self.mm_graph, params.I, self.F_v, self.F_t, params, hp.alpha_seed, hp.L_mm,
                            id_seed=not ab.no_mm_id_seed)
            state.I_mm, state.beta, state.mix = mm.I_mm, mm.beta, mm.mix
            state.t_norm, state.v_norm = mm.t_norm, mm.v_norm
            state.I_fused = I_ui + hp.alpha_mm * mm.I_mm

        if with_si and not ab.no_si:
            if batch_users is None:
                S = self.cache.vectors.to(params.I.dtype)
            else:
                S = self.cache.live(batch_users, params, epoch, update=update_cache)
            state.S_si, state.I_si = si_forward(self.si_graph, S, params.I, hp.L_si)
        return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"MSRC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], params: ModelParams, S: Optional[torch.Tensor] = None,
                    meta: Optional[dict] = None) -> None:
    """Named float32 sections behind a versioned header, then a JSON trailer."""
    sections = list(params.tensors().items())
    if S is not None:
        sections.append(("S", S))
    buf = bytearray()
    buf += struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sections))
    for name, t in sections:
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        enc = name.encode()
        buf += struct.pack("<H", len(enc)) + enc
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    trailer = json.dumps(meta or {}, sort_keys=True).encode()
    buf += struct.pack("<I", len(trailer)) + trailer
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: Union[str, Path], dtype=torch.float32):
    """Return ``(params, S_or_None, meta)``."""
    raw = Path(path).read_bytes()
    magic, version, count = struct.unpack_from("<4sII", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32)).to(dtype)
    (mlen,) = struct.unpack_from("<I", raw, off)
    meta = json.loads(raw[off + 4:off + 4 + mlen].decode())
    missing = [k for k in PARAM_NAMES if k not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint lacks sections {missing}")
    params = ModelParams(**{k: tensors[k] for k in PARAM_NAMES})
    return params, tensors.get("S"), meta
