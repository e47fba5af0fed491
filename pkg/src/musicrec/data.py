"""Ingestion, k-core filtering, the leave-two-out split, sequences and features."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Union

import numpy as np

from .core import DataError, InteractionLog, reindex, subset_log

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
FEATURE_MAGIC = b"FEAT"
_FEATURE_HEADER = struct.Struct("<4sII")


# ---------------------------------------------------------------------------
# interaction files
# ---------------------------------------------------------------------------
def read_interactions_csv(path: PathLike) -> InteractionLog:
    """Read a ``user,item,timestamp`` CSV (header required) into a dense log."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        try:
            cu, ci, ct = header.index("user"), header.index("item"), header.index("timestamp")
        except ValueError:
            raise DataError(f"{path}: header must contain user,item,timestamp, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((row[cu], row[ci], int(float(row[ct]))))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad row {row!r} ({exc})")
    return reindex(rows)


def write_interactions_csv(path: PathLike, log: InteractionLog, raw_ids: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "timestamp"])
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist()):
            if raw_ids and log.user_ids:
                w.writerow([log.user_ids[u], log.item_ids[i], t])
            else:
                w.writerow([u, i, t])


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------
def five_core_filter(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``k`` interactions until stable."""
    keep = np.ones(len(log), dtype=bool)
    while True:
        u_deg = np.bincount(log.users[keep], minlength=log.n_users)
        i_deg = np.bincount(log.items[keep], minlength=log.n_items)
        drop = keep & ((u_deg[log.users] < k) | (i_deg[log.items] < k))
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise DataError("dataset vanished under 5-core")
    return subset_log(log, keep)


def dataset_stats(log: InteractionLog) -> Dict[str, float]:
    n = len(log)
    return {
        "users": log.n_users,
        "items": log.n_items,
        "interactions": n,
        "sparsity": round(100.0 * (1.0 - n / (log.n_users * log.n_items)), 2),
    }


# ---------------------------------------------------------------------------
# leave-two-out
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Split:
    """Per-user train prefix plus one validation and one test item.

    ``train`` shares the id space of the full log. ``valid[u]`` and
    ``test[u]`` are the penultimate and last items of user ``u``; both
    metrics are computed against the same train-only prefix.
    """

    train: InteractionLog
    valid: np.ndarray
    test: np.ndarray
    valid_ts: np.ndarray
    test_ts: np.ndarray

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def heldout(self, mode: str) -> np.ndarray:
        if mode == "valid":
            return self.valid
        if mode == "test":
            return self.test
        raise ValueError(f"mode must be 'valid' or 'test', got {mode!r}")

    def heldout_events(self) -> set:
        """All (user, item, timestamp) events withheld from training."""
        ev = set()
        for u in range(self.n_users):
            ev.add((u, int(self.valid[u]), int(self.valid_ts[u])))
            ev.add((u, int(self.test[u]), int(self.test_ts[u])))
        return ev


def leave_two_out(log: InteractionLog) -> Split:
    off = log.user_offsets()
    counts = np.diff(off)
    short = np.flatnonzero(counts < 3)
    if len(short):
        raise DataError(f"users with fewer than 3 interactions: {short[:10].tolist()}")
    last = off[1:] - 1
    keep = np.ones(len(log), dtype=bool)
    keep[last] = False
    keep[last - 1] = False
    train = InteractionLog(
        users=log.users[keep].copy(),
        items=log.items[keep].copy(),
        timestamps=log.timestamps[keep].copy(),
        n_users=log.n_users,
        n_items=log.n_items,
        user_ids=log.user_ids,
        item_ids=log.item_ids,
    )
    return Split(
        train=train,
        valid=log.items[last - 1].copy(),
        test=log.items[last].copy(),
        valid_ts=log.timestamps[last - 1].copy(),
        test_ts=log.timestamps[last].copy(),
    )


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SequenceSet:
    """One train-only item sequence per user, capped to the newest ``L_max``."""

    seqs: List[np.ndarray]
    train_lengths: np.ndarray
    L_max: int
    n_items: int

    def __len__(self) -> int:
        return len(self.seqs)

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.seqs], dtype=np.int64)

    def padded(self):
        """(items, mask): left-aligned ``(n_s, L)`` index matrix and validity mask."""
        lens = self.lengths()
        width = max(int(lens.max()) if len(lens) else 1, 1)
        items = np.zeros((len(self.seqs), width), dtype=np.int64)
        mask = np.zeros((len(self.seqs), width), dtype=bool)
        for s, seq in enumerate(self.seqs):
            items[s, :len(seq)] = seq
            mask[s, :len(seq)] = True
        return items, mask


def build_sequences(split: Split, L_max: int) -> SequenceSet:
    hist = split.train.histories()
    seqs = [h[-L_max:].copy() for h in hist]
    for s in seqs:
        s.setflags(write=False)
    return SequenceSet(
        seqs=seqs,
        train_lengths=np.array([len(h) for h in hist], dtype=np.int64),
        L_max=L_max,
        n_items=split.n_items,
    )


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------
def save_features(path: PathLike, F: np.ndarray) -> None:
    F = np.ascontiguousarray(F, dtype="<f4")
    rows, dim = F.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, rows, dim))
        fh.write(F.tobytes())


def save_features_csv(path: PathLike, F: np.ndarray, item_ids: Optional[Sequence[Hashable]] = None) -> None:
    ids = list(item_ids) if item_ids is not None else list(range(len(F)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item"] + [f"f{j}" for j in range(F.shape[1])])
        for raw, row in zip(ids, F):
            w.writerow([raw] + [repr(float(x)) for x in row])


def _read_feature_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, rows, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = _FEATURE_HEADER.size + rows * dim * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{dim}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, dim).astype(np.float64)


def _read_feature_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "item":
            raise DataError(f"{path}: CSV features need an 'item' first column")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def load_features(path: PathLike, expected_rows: Optional[int], expected_dim: Optional[int],
                  item_ids: Optional[Sequence[Hashable]] = None) -> np.ndarray:
    """Load a feature matrix and align it with the dense item ids.

    Binary files are indexed by raw integer item id (row ``k`` describes
    raw item ``k``); CSV files carry the raw id in their first column.
    When ``item_ids`` is given, row ``i`` of the result is the feature of
    dense item ``i`` and rows of filtered-out items are dropped.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        ids, F = _read_feature_csv(path)
        lookup = {raw: k for k, raw in enumerate(ids)}
        if item_ids is not None:
            missing = [raw for raw in item_ids if str(raw) not in lookup]
            if missing:
                raise DataError(f"{path}: no feature row for items {missing[:20]}")
            F = F[[lookup[str(raw)] for raw in item_ids]]
    else:
        F = _read_feature_binary(path)
        if item_ids is not None:
            try:
                idx = np.array([int(raw) for raw in item_ids], dtype=np.int64)
            except (TypeError, ValueError):
                raise DataError(f"{path}: binary features need integer raw item ids")
            missing = idx[(idx < 0) | (idx >= len(F))]
            if len(missing):
                raise DataError(f"{path}: no feature row for items {missing[:20].tolist()}")
            F = F[idx]
    if expected_dim is not None and F.shape[1] != expected_dim:
        raise DataError(f"{path}: dimension mismatch, expected {expected_dim}, found {F.shape[1]}")
    if expected_rows is not None and F.shape[0] != expected_rows:
        raise DataError(f"{path}: expected {expected_rows} rows, found {F.shape[0]}")
    bad = np.flatnonzero(~np.isfinite(F).all(axis=1))
    if len(bad):
        raise DataError(f"{path}: NaN/Inf in feature rows {bad[:20].tolist()}")
    return F


# ---------------------------------------------------------------------------
# split persistence
# ---------------------------------------------------------------------------
def save_split(directory: PathLike, split: Split, seqs: Optional[SequenceSet] = None) -> None:
    """Write ``id_map.json``, ``train.csv``, ``heldout.csv`` (+ ``sequences.csv``).

    Files use raw ids; ``id_map.json`` fixes the dense numbering so that a
    reload reproduces the split exactly.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tr = split.train
    (d / "id_map.json").write_text(json.dumps(
        {"users": [str(u) for u in tr.user_ids], "items": [str(i) for i in tr.item_ids]}, indent=0) + "\n")
    write_interactions_csv(d / "train.csv", tr)
    with open(d / "heldout.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "valid_item", "valid_timestamp", "test_item", "test_timestamp"])
        for u in range(split.n_users):
            w.writerow([tr.user_ids[u], tr.item_ids[split.valid[u]], int(split.valid_ts[u]),
                        tr.item_ids[split.test[u]], int(split.test_ts[u])])
    if seqs is not None:
        with open(d / "sequences.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "items"])
            for u, s in enumerate(seqs.seqs):
                w.writerow([tr.user_ids[u], " ".join(str(tr.item_ids[i]) for i in s)])


def load_split(directory: PathLike) -> Split:
    d = Path(directory)
    try:
        ids = json.loads((d / "id_map.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{d}: not a prepared split (id_map.json missing)")
    uidx = {raw: k for k, raw in enumerate(ids["users"])}
    iidx = {raw: k for k, raw in enumerate(ids["items"])}
    users, items, ts = [], [], []
    with open(d / "train.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            users.append(uidx[row[0]])
            items.append(iidx[row[1]])
            ts.append(int(row[2]))
    M, N = len(uidx), len(iidx)
    valid = np.zeros(M, dtype=np.int64)
    test = np.zeros(M, dtype=np.int64)
    vts = np.zeros(M, dtype=np.int64)
    tts = np.zeros(M, dtype=np.int64)
    with open(d / "heldout.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            u = uidx[row[0]]
            valid[u], vts[u], test[u], tts[u] = iidx[row[1]], int(row[2]), iidx[row[3]], int(row[4])
    train = InteractionLog(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                           np.array(ts, dtype=np.int64), M, N, tuple(ids["users"]), tuple(ids["items"]))
    return Split(train=train, valid=valid, test=test, valid_ts=vts, test_ts=tts)
