"""Training objectives over a forward state."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import ConfigError
from .model import ForwardState, l2_normalize


@dataclass(frozen=True)
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise ValueError("triple arrays differ in length")

    def __len__(self) -> int:
        return len(self.users)

    def tensors(self):
        return tuple(torch.from_numpy(np.asarray(a, dtype=np.int64)) for a in (self.users, self.pos, self.neg))


def _scores(state: ForwardState, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    return (state.U_ui[users] * state.I_fused[items]).sum(dim=1)


def bpr_loss(batch: TripleBatch, state: ForwardState) -> torch.Tensor:
    u, p, n = batch.tensors()
    margin = _scores(state, u, p) - _scores(state, u, n)
    return -F.logsigmoid(margin).mean()


def info_nce(anchors: torch.Tensor, candidates: torch.Tensor, positive: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean of ``-log softmax`` at each anchor's positive column, cosine logits."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    logits = l2_normalize(anchors) @ l2_normalize(candidates).T / tau
    rows = torch.arange(len(anchors))
    return (torch.logsumexp(logits, dim=1) - logits[rows, positive]).mean()


def us_contrastive(users, state: ForwardState, tau_cl: float, mode: str = "batch") -> torch.Tensor:
    """User vector vs. own sequence node, other sequences as negatives.

    ``mode="batch"`` contrasts against the sequences of the given users;
    ``mode="full"`` against every sequence node.
    """
    users = torch.from_numpy(np.unique(np.asarray(users, dtype=np.int64)))
    anchors = state.U_ui[users]
    if mode == "batch":
        return info_nce(anchors, state.S_si[users], torch.arange(len(users)), tau_cl)
    if mode == "full":
        return info_nce(anchors, state.S_si, users, tau_cl)
    raise ConfigError(f"unknown contrast mode {mode!r}")


def is_contrastive(items, state: ForwardState, tau_cl: float) -> torch.Tensor:
    """Fused item vector vs. its SI-branch vector, contrasted within the batch."""
    items = torch.from_numpy(np.unique(np.asarray(items, dtype=np.int64)))
    return info_nce(state.I_fused[items], state.I_si[items], torch.arange(len(items)), tau_cl)


def mm_alignment(batch: TripleBatch, state: ForwardState) -> torch.Tensor:
    u, p, n = batch.tensors()
    eu = state.U_ui[u]
    total = 0.0
    for m in (state.t_norm, state.v_norm):
        total = total + F.logsigmoid((eu * (m[p] - m[n])).sum(dim=1))
    return -total.mean()


def l2_reg(batch: TripleBatch, U: torch.Tensor, I: torch.Tensor) -> torch.Tensor:
    u, p, n = batch.tensors()
    return 0.5 * (U[u].pow(2).sum() + I[p].pow(2).sum() + I[n].pow(2).sum()) / len(batch)


LAMBDA_KEYS = {"us": "lambda_u", "is": "lambda_i", "sv": "lambda_sv", "mm": "lambda_mm", "reg": "reg"}


def total_loss(components: Mapping[str, torch.Tensor], lambdas: Mapping[str, float]) -> torch.Tensor:
    """``bpr + lambda_u*us + lambda_i*is + lambda_sv*sv + lambda_mm*mm + reg*reg_term``.

    Missing components contribute nothing. ``lambda_sv`` must be zero.
    """
    for name, value in lambdas.items():
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")
    if lambdas.get("lambda_sv", 0.0) != 0.0:
        raise ConfigError("lambda_sv must be 0: no sequence-view loss is defined")
    total = components["bpr"]
    for key, lam_name in LAMBDA_KEYS.items():
        lam = lambdas.get(lam_name, 0.0)
        if key in components and lam != 0.0:
            total = total + lam * components[key]
    return total
