"""Construction, normalization and persistence of the three propagation graphs.

All graphs are kept as symmetric ``scipy.sparse.csr_matrix`` objects with
zero diagonals; :meth:`NormalizedSparseGraph.torch` hands out a cached
``torch`` COO view for propagation.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import scipy.sparse as sp
import torch

from .core import DataError
from .data import SequenceSet, Split

log = logging.getLogger(__name__)

GRAPH_KINDS = ("UI", "SI", "MM")
GRAPH_MAGIC = b"GRPH"
_GRAPH_HEADER = struct.Struct("<4sIQ")
_GRAPH_TRIPLE = np.dtype([("i", "<u4"), ("j", "<u4"), ("v", "<f4")])


@dataclass(eq=False)
class NormalizedSparseGraph:
    matrix: sp.csr_matrix
    kind: str
    _torch: Dict[torch.dtype, torch.Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sort_indices()

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def torch(self, dtype=torch.float32) -> torch.Tensor:
        if dtype not in self._torch:
            coo = self.matrix.tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            val = torch.from_numpy(coo.data).to(dtype)
            self._torch[dtype] = torch.sparse_coo_tensor(
                idx, val, (self.dim, self.dim), check_invariants=False
            ).coalesce()
        return self._torch[dtype]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def edges(self) -> set:
        coo = self.matrix.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def symmetric_normalize(adj, kind: str = "UI") -> NormalizedSparseGraph:
    """D^{-1/2} A D^{-1/2} with D = diag(A 1); isolated nodes stay all-zero."""
    A = sp.csr_matrix(adj, dtype=np.float64)
    A.eliminate_zeros()
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if A.nnz and A.data.min() < 0:
        raise ValueError("negative edge weight")
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    D = sp.diags(inv_sqrt)
    return NormalizedSparseGraph(sp.csr_matrix(D @ A @ D), kind)


def build_ui_graph(R: sp.spmatrix) -> NormalizedSparseGraph:
    R = sp.csr_matrix(R, dtype=np.float64)
    adj = sp.bmat([[None, R], [R.T, None]], format="csr")
    return symmetric_normalize(adj, "UI")


# ---------------------------------------------------------------------------
# sequence-item graph
# ---------------------------------------------------------------------------
def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        raise ValueError("jaccard of two empty sets is undefined")
    return len(a & b) / union


def sequence_item_incidence(seqs: SequenceSet) -> sp.csr_matrix:
    """Binary (n_s, N) matrix; an item repeated inside a sequence counts once."""
    rows = np.concatenate([np.full(len(s), k, dtype=np.int64) for k, s in enumerate(seqs.seqs)])
    cols = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs.seqs])
    B = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(seqs), seqs.n_items))
    B.sum_duplicates()
    B.data[:] = 1.0
    return B


def sequence_similarity_edges(B: sp.csr_matrix, tau_jac: float) -> sp.csr_matrix:
    """Jaccard-weighted SS adjacency (upper and lower triangle, no diagonal).

    ``B @ B.T`` is the inverted-index join: only pairs sharing at least one
    item are ever scored, which drops nothing because such pairs have a
    Jaccard value of 0 and would not carry an edge.
    """
    n = B.shape[0]
    if tau_jac > 1.0:
        return sp.csr_matrix((n, n))
    inter = sp.triu(B @ B.T, k=1).tocoo()
    sizes = np.asarray(B.sum(axis=1)).ravel()
    union = sizes[inter.row] + sizes[inter.col] - inter.data
    jac = inter.data / union
    keep = (jac >= tau_jac) & (jac > 0)
    r, c, w = inter.row[keep], inter.col[keep], jac[keep]
    return sp.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)
    )


def si_adjacency(seqs: SequenceSet, tau_jac: float) -> sp.csr_matrix:
    """Unnormalized weighted adjacency over [sequences; items]."""
    B = sequence_item_incidence(seqs)
    SS = sequence_similarity_edges(B, tau_jac)
    return sp.bmat([[SS, B], [B.T, None]], format="csr")


def build_si_graph(seqs: SequenceSet, tau_jac: float) -> NormalizedSparseGraph:
    return symmetric_normalize(si_adjacency(seqs, tau_jac), "SI")


# ---------------------------------------------------------------------------
# multimodal item-item graph
# ---------------------------------------------------------------------------
def build_knn_graph(F: np.ndarray, k: int, chunk: int = 1024) -> sp.csr_matrix:
    """Unit-weight cosine kNN adjacency, symmetrized by union.

    Each item points at its ``k`` most cosine-similar other items; equal
    similarities go to the lower index. Zero-norm rows have no defined
    cosine and take part in no edge.
    """
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N={n}, got {k}")
    norms = np.linalg.norm(F, axis=1)
    valid = norms > 0
    if not valid.all():
        log.warning("%d items have zero-norm features and get no kNN edges", int((~valid).sum()))
    Fn = np.zeros_like(F)
    Fn[valid] = F[valid] / norms[valid, None]

    rows, cols = [], []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sim = Fn[start:stop] @ Fn.T
        sim[:, ~valid] = -np.inf
        sim[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        for r in range(stop - start):
            if not valid[start + r]:
                continue
            nbrs = order[r][np.isfinite(sim[r, order[r]])]
            rows.append(np.full(len(nbrs), start + r, dtype=np.int64))
            cols.append(nbrs)
    if rows:
        rows, cols = np.concatenate(rows), np.concatenate(cols)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A = A.maximum(A.T)
    A.data[:] = 1.0
    return sp.csr_matrix(A)


def fuse_mm_graphs(A_v: NormalizedSparseGraph, A_t: NormalizedSparseGraph, alpha_v: float) -> NormalizedSparseGraph:
    if A_v.dim != A_t.dim:
        raise ValueError(f"dimension mismatch: {A_v.dim} vs {A_t.dim}")
    if not 0.0 <= alpha_v <= 1.0:
        raise ValueError(f"alpha_v must lie in [0, 1], got {alpha_v}")
    if alpha_v == 1.0:
        fused = A_v.matrix.copy()
    elif alpha_v == 0.0:
        fused = A_t.matrix.copy()
    else:
        fused = alpha_v * A_v.matrix + (1.0 - alpha_v) * A_t.matrix
    g = NormalizedSparseGraph(sp.csr_matrix(fused), "MM")
    g.matrix.data.setflags(write=False)
    return g


def build_mm_graph(F_v: np.ndarray, F_t: np.ndarray, k: int, alpha_v: float) -> NormalizedSparseGraph:
    A_v = symmetric_normalize(build_knn_graph(F_v, k), "MM")
    A_t = symmetric_normalize(build_knn_graph(F_t, k), "MM")
    return fuse_mm_graphs(A_v, A_t, alpha_v)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def save_graph(path: Union[str, Path], graph: NormalizedSparseGraph) -> None:
    coo = graph.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    triples = np.empty(coo.nnz, dtype=_GRAPH_TRIPLE)
    triples["i"] = coo.row[order]
    triples["j"] = coo.col[order]
    triples["v"] = coo.data[order]
    with open(path, "wb") as fh:
        fh.write(_GRAPH_HEADER.pack(GRAPH_MAGIC, graph.dim, coo.nnz))
        fh.write(triples.tobytes())


def load_graph(path: Union[str, Path], kind: str = "MM") -> NormalizedSparseGraph:
    raw = Path(path).read_bytes()
    if len(raw) < _GRAPH_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, dim, nnz = _GRAPH_HEADER.unpack_from(raw)
    if magic != GRAPH_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if len(raw) != _GRAPH_HEADER.size + nnz * _GRAPH_TRIPLE.itemsize:
        raise DataError(f"{path}: size does not match {nnz} entries")
    t = np.frombuffer(raw, dtype=_GRAPH_TRIPLE, offset=_GRAPH_HEADER.size)
    M = sp.csr_matrix((t["v"].astype(np.float64), (t["i"].astype(np.int64), t["j"].astype(np.int64))),
                      shape=(dim, dim))
    return NormalizedSparseGraph(M, kind)


# ---------------------------------------------------------------------------
# leakage
# ---------------------------------------------------------------------------
def leakage_violations(split: Split, seqs: Optional[SequenceSet] = None,
                       ui_graph: Optional[NormalizedSparseGraph] = None,
                       si_graph: Optional[NormalizedSparseGraph] = None) -> List[str]:
    """Describe every way held-out events could have reached the graphs.

    A held-out (u, i) pair may legitimately appear when the user also
    interacted with ``i`` earlier in the train prefix; only pairs absent
    from the train partition are flagged.
    """
    problems = []
    M, N = split.n_users, split.n_items
    train_pairs = split.train.pairs()
    held = {}
    for u in range(M):
        for mode, arr in (("valid", split.valid), ("test", split.test)):
            pair = (u, int(arr[u]))
            if pair not in train_pairs:
                held[pair] = mode
    if ui_graph is not None:
        coo = ui_graph.matrix.tocoo()
        mask = coo.row < M
        ui_pairs = set(zip(coo.row[mask].tolist(), (coo.col[mask] - M).tolist()))
        for pair in ui_pairs & held.keys():
            problems.append(f"UI edge for held-out {held[pair]} pair {pair}")
        extra = ui_pairs - train_pairs
        if extra:
            problems.append(f"UI edges not backed by train events: {sorted(extra)[:5]}")
    if seqs is not None:
        for u, s in enumerate(seqs.seqs):
            for i in set(s.tolist()):
                if (u, i) in held:
                    problems.append(f"sequence {u} contains held-out {held[(u, i)]} item {i}")
    if si_graph is not None:
        coo = si_graph.matrix.tocoo()
        mask = (coo.row < M) & (coo.col >= M)
        si_pairs = set(zip(coo.row[mask].tolist(), (coo.col[mask] - M).tolist()))
        for pair in si_pairs & held.keys():
            problems.append(f"SI edge for held-out {held[pair]} pair {pair}")
        extra = si_pairs - train_pairs
        if extra:
            problems.append(f"SI edges not backed by train events: {sorted(extra)[:5]}")
    return problems
