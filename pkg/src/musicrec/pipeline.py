"""Glue from an interaction log plus features to a ready-to-train model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import HyperParams, InteractionLog, interaction_matrix
from .data import SequenceSet, Split, build_sequences, five_core_filter, leave_two_out
from .graphs import NormalizedSparseGraph, build_mm_graph, build_si_graph, build_ui_graph
from .model import Ablation, MuSICRec


@dataclass
class Graphs:
    ui: NormalizedSparseGraph
    si: NormalizedSparseGraph
    mm: NormalizedSparseGraph


def build_graphs(split: Split, seqs: SequenceSet, F_v: np.ndarray, F_t: np.ndarray, hp: HyperParams,
                 mm: Optional[NormalizedSparseGraph] = None) -> Graphs:
    """Build all three graphs from the train partition (``mm`` may be a cached graph)."""
    ui = build_ui_graph(interaction_matrix(split.train))
    si = build_si_graph(seqs, hp.tau_jac)
    if mm is None:
        mm = build_mm_graph(F_v, F_t, hp.k_nn, hp.alpha_v)
    return Graphs(ui, si, mm)


def build_model(split: Split, F_v: np.ndarray, F_t: np.ndarray, hp: HyperParams,
                ablation: Ablation = Ablation(), dtype=torch.float32,
                graphs: Optional[Graphs] = None) -> MuSICRec:
    seqs = build_sequences(split, hp.L_max)
    if graphs is None:
        graphs = build_graphs(split, seqs, F_v, F_t, hp)
    return MuSICRec(hp, graphs.ui, graphs.si, graphs.mm, F_v, F_t, seqs, ablation, dtype)


def prepare_split(log: InteractionLog, core: int = 5) -> Split:
    if core:
        log = five_core_filter(log, core)
    return leave_two_out(log)
