"""Optimization loop: triple sampling, gradients, Adam and early stopping."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import losses
from .core import HyperParams, ModelParams, interaction_matrix
from .data import Split
from .evaluation import evaluate
from .losses import TripleBatch
from .model import MuSICRec, ForwardState, propagation_counter, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Loss or gradient became non-finite; carries the last good parameters."""

    def __init__(self, message, params: Optional[ModelParams] = None, report=None):
        super().__init__(message)
        self.params = params
        self.report = report


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
class TripleSampler:
    """Positives from distinct train pairs, negatives uniform over unseen items."""

    def __init__(self, split: Split):
        R = interaction_matrix(split.train).tocoo()
        self.n_items = split.n_items
        order = np.lexsort((R.col, R.row))
        self.pair_users = R.row[order].astype(np.int64)
        self.pair_items = R.col[order].astype(np.int64)
        self._keys = self.pair_users * self.n_items + self.pair_items  # sorted
        deg = np.bincount(self.pair_users, minlength=split.n_users)
        self.saturated = set(np.flatnonzero(deg >= self.n_items).tolist())

    def __len__(self) -> int:
        return len(self.pair_users)

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def negatives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        bad = self.saturated.intersection(np.asarray(users).tolist())
        if bad:
            raise ValueError(f"users {sorted(bad)[:10]} interacted with every item; no negative exists")
        neg = rng.integers(0, self.n_items, size=len(users))
        redo = self.is_positive(users, neg)
        while redo.any():
            neg[redo] = rng.integers(0, self.n_items, size=int(redo.sum()))
            redo[redo] = self.is_positive(users[redo], neg[redo])
        return neg

    def batch_from_pairs(self, idx: np.ndarray, rng: np.random.Generator) -> TripleBatch:
        users = self.pair_users[idx]
        return TripleBatch(users, self.pair_items[idx], self.negatives(users, rng))

    def epoch(self, batch_size: int, rng: np.random.Generator):
        perm = rng.permutation(len(self))
        for start in range(0, len(perm), batch_size):
            yield self.batch_from_pairs(perm[start:start + batch_size], rng)


def sample_batch(split: Split, batch_size: int, rng: np.random.Generator,
                 sampler: Optional[TripleSampler] = None) -> TripleBatch:
    """Draw ``batch_size`` train pairs uniformly (with replacement) plus negatives."""
    sampler = sampler or TripleSampler(split)
    if len(sampler) == 0:
        raise ValueError("train split is empty")
    return sampler.batch_from_pairs(rng.integers(0, len(sampler), size=batch_size), rng)


# ---------------------------------------------------------------------------
# objective and gradients
# ---------------------------------------------------------------------------
def loss_components(model: MuSICRec, params: ModelParams, state: ForwardState,
                    batch: TripleBatch) -> Dict[str, torch.Tensor]:
    hp, ab = model.hp, model.ablation
    comps = {"bpr": losses.bpr_loss(batch, state)}
    if not ab.no_si:
        comps["us"] = losses.us_contrastive(batch.users, state, hp.tau_cl, hp.contrast_mode)
        comps["is"] = losses.is_contrastive(batch.pos, state, hp.tau_cl)
    if not ab.no_mm:
        comps["mm"] = losses.mm_alignment(batch, state)
    if hp.reg > 0:
        comps["reg"] = losses.l2_reg(batch, params.U, params.I)
    return comps


def lambdas(hp: HyperParams) -> Dict[str, float]:
    return {"lambda_u": hp.lambda_u, "lambda_i": hp.lambda_i, "lambda_sv": hp.lambda_sv,
            "lambda_mm": hp.lambda_mm, "reg": hp.reg}


def batch_objective(model: MuSICRec, params: ModelParams, batch: TripleBatch, epoch: int = 0,
                    update_cache: bool = True):
    """Forward pass plus losses for one batch: ``(total, components)``.

    Sequence rows of the batch users are pooled live; all other rows come
    from the cache as constants.
    """
    state = model.forward(params, batch_users=batch.users, epoch=epoch, update_cache=update_cache)
    comps = loss_components(model, params, state, batch)
    return losses.total_loss(comps, lambdas(model.hp)), comps


def backward(total: torch.Tensor, params: ModelParams) -> Dict[str, torch.Tensor]:
    """Exact gradients of ``total`` for every parameter tensor.

    Parameters that do not reach the loss get a zero gradient.
    """
    named = params.tensors()
    grads = torch.autograd.grad(total, list(named.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(named.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient in parameter {name}")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ModelParams, grads: Dict[str, torch.Tensor], opt: AdamState) -> ModelParams:
    """One bias-corrected Adam update, applied in place."""
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    with torch.no_grad():
        for name, p in params.tensors().items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = opt.m.setdefault(name, torch.zeros_like(p))
            v = opt.v.setdefault(name, torch.zeros_like(p))
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            p.sub_(opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps))
    return params


# ---------------------------------------------------------------------------
# early stopping and the fit loop
# ---------------------------------------------------------------------------
class EarlyStopping:
    """Stop once the metric has not improved for ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.counter = 0
        self.stop = False

    def __call__(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.counter = value, epoch, 0
            return True
        self.counter += 1
        if self.counter >= max(self.patience, 1):
            self.stop = True
        return False


@dataclass
class TrainReport:
    epochs: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_r20: float = 0.0
    stop_reason: str = ""

    TIMING_KEYS = ("seconds",)

    def deterministic_view(self) -> dict:
        """The report without wall-clock fields."""
        rows = [{k: v for k, v in e.items() if k not in self.TIMING_KEYS} for e in self.epochs]
        return {"epochs": rows, "best_epoch": self.best_epoch,
                "best_valid_r20": self.best_valid_r20, "stop_reason": self.stop_reason}

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_valid_r20": self.best_valid_r20, "stop_reason": self.stop_reason}


def score_state(model: MuSICRec, params: ModelParams) -> ForwardState:
    """Forward pass for ranking only (no SI branch, no gradient)."""
    with torch.no_grad():
        return model.forward(params, with_si=False).detach()


def fit(model: MuSICRec, split: Split, seed: int = 0, params: Optional[ModelParams] = None,
        checkpoint_path: Optional[str] = None, epoch_callback: Optional[Callable[[dict], None]] = None,
        max_epochs: Optional[int] = None):
    """Train with Adam and early stopping on validation Recall@20.

    Returns ``(best_params, report)``. ``checkpoint_path`` may contain
    ``{epoch}``; a checkpoint is written at every improvement.
    """
    hp = model.hp
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if params is None:
        params = model.init_params(seed)
    sampler = TripleSampler(split)
    opt = AdamState(lr=hp.lr, beta1=hp.adam_beta1, beta2=hp.adam_beta2, eps=hp.adam_eps)
    stopper = EarlyStopping(hp.patience)
    report = TrainReport()
    best = params.detach_clone()
    n_epochs = hp.max_epochs if max_epochs is None else max_epochs

    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        propagation_counter.clear()
        model.cache.refresh(params, "all", epoch)
        sums: Dict[str, float] = {}
        n_batches = 0
        for batch in sampler.epoch(hp.batch_size, rng):
            params.requires_grad_(True)
            total, comps = batch_objective(model, params, batch, epoch)
            if not torch.isfinite(total):
                report.stop_reason = "diverged"
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", best, report)
            try:
                grads = backward(total, params)
            except TrainingDivergence as exc:
                report.stop_reason = "diverged"
                raise TrainingDivergence(f"{exc} at epoch {epoch}", best, report) from None
            params.requires_grad_(False)
            adam_step(params, grads, opt)
            n_batches += 1
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        props = dict(propagation_counter)
        n_props = sum(props.values())
        seconds = time.perf_counter() - t0

        valid = evaluate(split, score_state(model, params), "valid", batch_size=hp.eval_batch_size)
        r20 = valid["recall@20"]
        record = {
            "epoch": epoch,
            "loss": sums["total"] / n_batches,
            "components": {k: v / n_batches for k, v in sums.items() if k != "total"},
            "valid_r20": r20,
            "batches": n_batches,
            "propagations": n_props,
            "propagations_by_graph": props,
            "propagations_per_batch": n_props / n_batches,
            "seconds": seconds,
        }
        report.epochs.append(record)
        log.info(json.dumps(record, sort_keys=True))
        if epoch_callback is not None:
            epoch_callback(record)

        if stopper(r20, epoch):
            best = params.detach_clone()
            report.best_epoch, report.best_valid_r20 = epoch, r20
            if checkpoint_path:
                save_checkpoint(checkpoint_path.format(epoch=epoch), best, model.cache.vectors,
                                {"epoch": epoch, "valid_r20": r20, "hyperparams": hp.to_dict(),
                                 "ablation": model.ablation.name})
        if stopper.stop:
            report.stop_reason = "early_stopping"
            break
    else:
        report.stop_reason = "max_epochs"
    return best, report
