"""Fixed-size global node banks shared across the segments of one document.

Each bank level compresses the matching local level into itself through
attention and a scalar-gated interpolation; banks then exchange information
across levels, and local paragraph nodes read the paragraph bank back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .layers import (Params, fuse_residual, gate, gated_update, glorot, init_attention,
                     init_fusion, init_gate, multihead_attention, param)
from .local_graph import LocalGraph
from .numerics import Value, bce_with_logits, concat, matmul, tanh

log = logging.getLogger(__name__)

BANKS = ("sentence", "paragraph", "document")
# local level each bank receives from
RECEIVES_FROM = {"sentence": "sentence", "paragraph": "paragraph", "document": "segment"}
# (query bank, key/value bank), applied in this order within one hop. The paragraph
# bank is updated last so every direction feeds the bank that local paragraphs read;
# banks are detached between segments, so an update after that point would never train.
CROSS_DIRECTIONS = (
    ("document", "sentence"), ("sentence", "document"),
    ("document", "paragraph"), ("sentence", "paragraph"),
    ("paragraph", "sentence"), ("paragraph", "document"),
)


@dataclass
class GlobalGraph:
    sentence: Value   # [N_sent, d]
    paragraph: Value  # [N_p, d]
    document: Value   # [N_d, d]

    def bank(self, level: str) -> Value:
        return getattr(self, level)

    def with_bank(self, level: str, value: Value) -> "GlobalGraph":
        return replace(self, **{level: value})

    def detach(self) -> "GlobalGraph":
        return GlobalGraph(self.sentence.detach(), self.paragraph.detach(), self.document.detach())


def init_global(store: Params, rng, d: int, n_sent: int, n_para: int, n_doc: int) -> None:
    for level, n in zip(BANKS, (n_sent, n_para, n_doc)):
        if n <= 0:
            raise ValueError(f"{level} bank size must be positive")
        param(store, f"ggn.init.{level}", rng.normal(0.0, 0.5, size=(n, d)))
    for level in BANKS:
        _init_gated_fusion(store, f"ggn.recv.{level}", rng, d)
    for q, k in CROSS_DIRECTIONS:
        _init_gated_fusion(store, f"ggn.cross.{k}2{q}", rng, d)
    init_attention(store, "ggn.enhance.att", rng, d)
    init_fusion(store, "ggn.enhance.fuse", rng, d)


def _init_gated_fusion(store, prefix, rng, d):
    init_attention(store, f"{prefix}.att", rng, d)
    param(store, f"{prefix}.ffn.w", glorot(rng, 2 * d, d))
    param(store, f"{prefix}.ffn.b", np.zeros(d))
    init_gate(store, f"{prefix}.gate", rng, d)


def initial_global(store: Params) -> GlobalGraph:
    """Fresh banks for a new document: the learned initial embeddings themselves."""
    return GlobalGraph(store["ggn.init.sentence"], store["ggn.init.paragraph"],
                       store["ggn.init.document"])


def gated_fusion(bank: Value, attended: Value, store: Params, prefix: str) -> Value:
    """z = tanh([h; h_att] W + b); gamma = sigmoid(z w_g + b_g); (1 - gamma) h + gamma z."""
    z = tanh(matmul(concat([bank, attended], axis=1), store[f"{prefix}.ffn.w"]) + store[f"{prefix}.ffn.b"])
    gamma = gate(z, store, f"{prefix}.gate")
    return gated_update(bank, z, gamma)


def attend_and_fuse(bank: Value, sources: Value, store: Params, prefix: str, heads: int) -> Value:
    attended = multihead_attention(bank, sources, store, f"{prefix}.att", heads)
    return gated_fusion(bank, attended, store, prefix)


def compress_receive(local: LocalGraph, glob: GlobalGraph, store: Params, heads: int) -> GlobalGraph:
    for level in BANKS:
        sources = local.nodes(RECEIVES_FROM[level])
        if sources.shape[0] == 0:
            log.debug("no local %s nodes; %s bank not updated", RECEIVES_FROM[level], level)
            continue
        glob = glob.with_bank(level, attend_and_fuse(glob.bank(level), sources, store,
                                                     f"ggn.recv.{level}", heads))
    return glob


def global_gat_hop(glob: GlobalGraph, store: Params, heads: int) -> GlobalGraph:
    """One hop of cross-level attention; each direction sees banks already updated in this hop."""
    for q, k in CROSS_DIRECTIONS:
        glob = glob.with_bank(q, attend_and_fuse(glob.bank(q), glob.bank(k), store,
                                                 f"ggn.cross.{k}2{q}", heads))
    return glob


def run_global_hops(glob: GlobalGraph, store: Params, hops: int, heads: int) -> GlobalGraph:
    if hops < 0:
        raise ValueError("hop count must be non-negative")
    for _ in range(hops):
        glob = global_gat_hop(glob, store, heads)
    return glob


def enhance_local(local: LocalGraph, glob: GlobalGraph, store: Params, heads: int) -> Value:
    """Local paragraph nodes attend the paragraph bank; returns [P, d]."""
    attended = multihead_attention(local.paragraphs, glob.paragraph, store, "ggn.enhance.att", heads)
    return fuse_residual(attended, local.paragraphs, store, "ggn.enhance.fuse")


# ------------------------------------------------------------- selection head


def init_selection_head(store: Params, rng, d: int) -> None:
    param(store, "head.w1", glorot(rng, d, d))
    param(store, "head.b1", np.zeros(d))
    param(store, "head.w2", glorot(rng, d, 1))
    param(store, "head.b2", np.zeros(1))


def paragraph_logits(enhanced: Value, store: Params) -> Value:
    hidden = tanh(matmul(enhanced, store["head.w1"]) + store["head.b1"])
    return (matmul(hidden, store["head.w2"]) + store["head.b2"]).reshape(enhanced.shape[0])


def selection_loss(enhanced: Value, labels, store: Params) -> tuple[Value, Value]:
    """Per-paragraph logits and the mean binary cross-entropy against 0/1 labels."""
    labels = np.asarray(labels)
    if labels.shape != (enhanced.shape[0],):
        raise ValueError(f"expected {enhanced.shape[0]} labels, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    logits = paragraph_logits(enhanced, store)
    return logits, bce_with_logits(logits, labels).mean()
