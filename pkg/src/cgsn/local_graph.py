"""Per-segment four-level graph: tokens -> sentences -> paragraphs -> segment.

Edges only point upward. Every attention target also has a self-loop so the
softmax over its neighbourhood is never empty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoder import SegmentEncoding
from .layers import Params, fuse_residual, glorot, init_attention, init_fusion, multihead_attention, param
from .numerics import Value, bilstm, concat, matmul, take_rows, tanh

LEVELS = ("token", "sentence", "paragraph")
# (target level, source level) in the order hops are applied
LEVEL_PAIRS = (("sentence", "token"), ("paragraph", "sentence"), ("segment", "paragraph"))


@dataclass
class LocalGraph:
    tokens: Value          # [n_tok, d]
    sentences: Value       # [S, d]
    paragraphs: Value      # [P, d]
    segment: Value         # [1, d]
    token_sentence: np.ndarray     # [n_tok] owning sentence
    sentence_paragraph: np.ndarray # [S] owning paragraph

    def nodes(self, level: str) -> Value:
        return {"token": self.tokens, "sentence": self.sentences,
                "paragraph": self.paragraphs, "segment": self.segment}[level]

    def membership(self, source: str) -> np.ndarray:
        """Index of the higher-level node each ``source`` node points to."""
        if source == "token":
            return self.token_sentence
        if source == "sentence":
            return self.sentence_paragraph
        if source == "paragraph":
            return np.zeros(self.paragraphs.shape[0], dtype=np.int64)
        raise ValueError(f"{source!r} nodes have no outgoing edges")

    def edges(self) -> list[tuple[tuple[str, int], tuple[str, int]]]:
        """All directed edges (source, target), self-loops included."""
        out = []
        for target, source in LEVEL_PAIRS:
            for i, j in enumerate(self.membership(source)):
                out.append(((source, i), (target, int(j))))
            for j in range(self.nodes(target).shape[0]):
                out.append(((target, j), (target, j)))
        return out


def neighbour_mask(membership: np.ndarray, n_target: int) -> np.ndarray:
    """Boolean [n_target, n_source + n_target]: sources first, then self-loops."""
    n_src = len(membership)
    mask = np.zeros((n_target, n_src + n_target), dtype=bool)
    mask[membership, np.arange(n_src)] = True
    mask[np.arange(n_target), n_src + np.arange(n_target)] = True
    return mask


def init_local_graph(enc: SegmentEncoding) -> LocalGraph:
    """Token states at paragraph positions, mean-pooled sentences, anchor paragraphs."""
    prep = enc.prepared
    P, L = prep.token_ids.shape
    flat = enc.hidden.reshape(P * L, enc.hidden.shape[-1])
    pos = np.flatnonzero(prep.token_paragraph.reshape(-1) >= 0)
    tokens = take_rows(flat, pos)
    tok_sent = prep.token_sentence.reshape(-1)[pos]
    S = prep.n_sentences
    counts = np.bincount(tok_sent, minlength=S) if S else np.zeros(0, dtype=np.int64)
    if S and (counts == 0).any():
        raise ValueError(f"sentence {int(np.argmin(counts))} has no tokens")
    pool = np.zeros((S, len(pos)))
    pool[tok_sent, np.arange(len(pos))] = 1.0
    pool /= np.maximum(counts, 1)[:, None]
    sentences = matmul(Value(pool), tokens)
    paragraphs = take_rows(flat, np.arange(P) * L + prep.anchor_positions)
    segment = paragraphs.mean(axis=0, keepdims=True)
    return LocalGraph(tokens, sentences, paragraphs, segment, tok_sent, prep.sentence_paragraph.copy())


# ------------------------------------------------------- same-level BiLSTM


def init_level_interact(store: Params, prefix: str, rng, d: int) -> None:
    if d % 2:
        raise ValueError("hidden width must be even for the BiLSTM")
    h = d // 2
    for direction in ("fw", "bw"):
        param(store, f"{prefix}.{direction}.w_in", glorot(rng, d, 4 * h))
        param(store, f"{prefix}.{direction}.w_rec", glorot(rng, h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate
        param(store, f"{prefix}.{direction}.b", bias)
    init_fusion(store, f"{prefix}.fuse", rng, d)


def level_interact(nodes: Value, store: Params, prefix: str) -> Value:
    """BiLSTM over text-ordered nodes, fused back as nodes + tanh([lstm; nodes] W + b)."""
    if nodes.shape[0] == 0:
        return nodes
    states = bilstm(nodes, [store[f"{prefix}.fw.{k}"] for k in ("w_in", "w_rec", "b")],
                    [store[f"{prefix}.bw.{k}"] for k in ("w_in", "w_rec", "b")])
    return fuse_residual(states, nodes, store, f"{prefix}.fuse")


def interact_levels(g: LocalGraph, store: Params) -> LocalGraph:
    return replace(g,
                   tokens=level_interact(g.tokens, store, "lgn.lstm.token"),
                   sentences=level_interact(g.sentences, store, "lgn.lstm.sentence"),
                   paragraphs=level_interact(g.paragraphs, store, "lgn.lstm.paragraph"))


# ------------------------------------------------------------ graph attention


def init_local_gat(store: Params, rng, d: int, hops: int) -> None:
    for o in range(hops):
        for target, source in LEVEL_PAIRS:
            prefix = f"lgn.hop{o}.{source}2{target}"
            init_attention(store, f"{prefix}.att", rng, d)
            init_fusion(store, f"{prefix}.fuse", rng, d)


def attend_level(target: Value, source: Value, membership: np.ndarray, store: Params,
                 prefix: str, heads: int) -> Value:
    """Masked multi-head attention from in-neighbours (plus self) into ``target``, then fusion."""
    keys = concat([source, target], axis=0)
    mask = neighbour_mask(membership, target.shape[0])
    attended = multihead_attention(target, keys, store, f"{prefix}.att", heads, mask)
    return fuse_residual(attended, target, store, f"{prefix}.fuse")


def local_gat_hop(g: LocalGraph, store: Params, hop: int, heads: int) -> LocalGraph:
    """One synchronous hop: every target level reads the previous-hop state of its sources."""
    updated = {}
    for target, source in LEVEL_PAIRS:
        tgt = g.nodes(target)
        if tgt.shape[0] == 0:
            updated[target] = tgt
            continue
        updated[target] = attend_level(tgt, g.nodes(source), g.membership(source), store,
                                       f"lgn.hop{hop}.{source}2{target}", heads)
    return replace(g, sentences=updated["sentence"], paragraphs=updated["paragraph"],
                   segment=updated["segment"])


def run_local_hops(g: LocalGraph, store: Params, hops: int, heads: int) -> LocalGraph:
    if hops < 0:
        raise ValueError("hop count must be non-negative")
    for o in range(hops):
        g = local_gat_hop(g, store, o, heads)
    return g
