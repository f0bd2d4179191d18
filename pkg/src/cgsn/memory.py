"""Evidence memory: a logit-weighted paragraph summary carried to the next segment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .global_graph import GlobalGraph
from .layers import Params, gate, gated_update, glorot, init_gate, param
from .numerics import Value, broadcast_to, concat, matmul, softmax, tanh


@dataclass
class EvidenceMemory:
    summary: np.ndarray | None = None  # [d], detached

    @property
    def empty(self) -> bool:
        return self.summary is None


def init_memory(store: Params, rng, d: int) -> None:
    param(store, "mem.merge.w", glorot(rng, 2 * d, d))
    param(store, "mem.merge.b", np.zeros(d))
    init_gate(store, "mem.gate", rng, 2 * d)


def summarize(logits: Value, enhanced: Value) -> np.ndarray:
    """softmax(logits) weighted sum of paragraph states, cut off from the tape."""
    if logits.shape[0] < 1:
        raise ValueError("need at least one paragraph")
    alpha = softmax(logits.detach(), axis=0).data
    return alpha @ enhanced.data


def write_memory(mem: EvidenceMemory, glob: GlobalGraph, store: Params) -> GlobalGraph:
    """Merge the cached summary into every paragraph-bank node through a gate."""
    if mem.empty:
        raise ValueError("evidence memory is empty; nothing to write")
    bank = glob.paragraph
    cached = broadcast_to(Value(mem.summary).reshape(1, -1), bank.shape)
    cat = concat([bank, cached], axis=1)
    merge = tanh(matmul(cat, store["mem.merge.w"]) + store["mem.merge.b"])
    gamma = gate(cat, store, "mem.gate")
    return glob.with_bank("paragraph", gated_update(bank, merge, gamma))
