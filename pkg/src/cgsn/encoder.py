"""Tokenization, question/paragraph pair formatting and the toy contextual encoder."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import Params, glorot, init_attention, multihead_attention, param
from .numerics import Value, matmul, tanh

CLS, SEP, PAD, UNK = "[CLS]", "[SEP]", "[PAD]", "[UNK]"
RESERVED = (CLS, SEP, PAD, UNK)
CLS_ID, SEP_ID, PAD_ID, UNK_ID = range(4)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_SENT_END_RE = re.compile(r"(?<=[.?!])\s+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split on whitespace following '.', '?' or '!'."""
    return [s for s in (p.strip() for p in _SENT_END_RE.split(text.strip())) if s]


class Vocabulary:
    """Token <-> id map with four reserved markers at ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def encode(self, text_or_tokens) -> list[int]:
        toks = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return [self.id(t) for t in toks]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Map every token seen at least ``min_freq`` times; ids assigned alphabetically."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    return Vocabulary(sorted(t for t, c in counts.items() if c >= min_freq and t not in RESERVED))


def format_pair(question, paragraph, vocab: Vocabulary, l_max: int) -> list[int]:
    """[CLS] q [SEP] p [SEP] [PAD]...; the paragraph is truncated, never the question."""
    q_ids = vocab.encode(question)
    p_ids = vocab.encode(paragraph)
    if not q_ids:
        raise ValueError("question is empty")
    if len(q_ids) > l_max - 3:
        raise ValueError(f"question has {len(q_ids)} tokens, budget is {l_max - 3} (l_max={l_max})")
    p_ids = p_ids[: l_max - 3 - len(q_ids)]
    ids = [CLS_ID, *q_ids, SEP_ID, *p_ids, SEP_ID]
    return ids + [PAD_ID] * (l_max - len(ids))


@dataclass
class PreparedSegment:
    """Token ids and structural maps for one segment (no model state)."""

    token_ids: np.ndarray        # [P, l_max] int
    token_sentence: np.ndarray   # [P, l_max] segment-wide sentence index, -1 off-paragraph
    token_paragraph: np.ndarray  # [P, l_max] paragraph index, -1 off-paragraph
    cls_positions: np.ndarray    # [P]
    anchor_positions: np.ndarray # [P]
    paragraph_token_spans: list[tuple[int, int]]
    sentence_paragraph: np.ndarray  # [S]

    @property
    def n_paragraphs(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_paragraph)

    @property
    def key_mask(self) -> np.ndarray:
        return self.token_ids != PAD_ID


@dataclass
class SegmentEncoding:
    hidden: Value  # [P, l_max, d_h]
    prepared: PreparedSegment

    @property
    def cls_positions(self):
        return self.prepared.cls_positions


def prepare_segment(question_ids: Sequence[int], paragraphs: Sequence[Sequence[Sequence[int]]],
                    l_max: int, anchor: str = "cls") -> PreparedSegment:
    """Lay out pre-tokenized pairs. ``paragraphs`` is a list of sentence id-lists."""
    if not paragraphs:
        raise ValueError("segment has no paragraphs")
    if not question_ids:
        raise ValueError("question is empty")
    budget = l_max - 3 - len(question_ids)
    if budget < 0:
        raise ValueError(f"question has {len(question_ids)} tokens, budget is {l_max - 3} (l_max={l_max})")
    if anchor not in ("cls", "last-sep"):
        raise ValueError(f"unknown anchor {anchor!r}")
    P = len(paragraphs)
    ids = np.full((P, l_max), PAD_ID, dtype=np.int64)
    tsent = np.full((P, l_max), -1, dtype=np.int64)
    tpara = np.full((P, l_max), -1, dtype=np.int64)
    anchors = np.zeros(P, dtype=np.int64)
    spans, sent_para = [], []
    q = list(question_ids)
    for i, sentences in enumerate(paragraphs):
        row = [CLS_ID, *q, SEP_ID]
        start = len(row)
        left = budget
        for sent in sentences:
            take = list(sent)[:left]
            if not take:
                continue
            s_idx = len(sent_para)
            sent_para.append(i)
            tsent[i, len(row):len(row) + len(take)] = s_idx
            row.extend(take)
            left -= len(take)
        end = len(row)
        tpara[i, start:end] = i
        row.append(SEP_ID)
        ids[i, : len(row)] = row
        spans.append((start, end))
        anchors[i] = 0 if anchor == "cls" else end
    return PreparedSegment(ids, tsent, tpara, np.zeros(P, dtype=np.int64), anchors, spans,
                           np.asarray(sent_para, dtype=np.int64))


# --------------------------------------------------------------- toy encoder


def init_encoder(store: Params, rng: np.random.Generator, vocab_size: int, d_w: int, d_h: int,
                 l_max: int, layers: int = 1) -> None:
    param(store, "enc.embed", rng.normal(0.0, 1.0, size=(vocab_size, d_w)))
    param(store, "enc.pos", rng.normal(0.0, 0.1, size=(l_max, d_w)))
    if d_w != d_h:
        param(store, "enc.proj", glorot(rng, d_w, d_h))
    for i in range(layers):
        init_attention(store, f"enc.l{i}.att", rng, d_h)
        param(store, f"enc.l{i}.wo", glorot(rng, d_h, d_h))
        param(store, f"enc.l{i}.w1", glorot(rng, d_h, d_h))
        param(store, f"enc.l{i}.b1", np.zeros(d_h))
        param(store, f"enc.l{i}.w2", glorot(rng, d_h, d_h))


def toy_encode(prepared: PreparedSegment, store: Params, heads: int, layers: int = 1) -> Value:
    """Embedding + position embedding, then residual self-attention / tanh FF layers.

    PAD positions never act as keys, so their embeddings cannot leak into
    non-PAD outputs.
    """
    ids = prepared.token_ids
    x = store["enc.embed"][ids] + store["enc.pos"][: ids.shape[1]]
    if "enc.proj" in store:
        x = matmul(x, store["enc.proj"])
    mask = np.broadcast_to(prepared.key_mask[:, None, :], ids.shape + (ids.shape[1],))
    for i in range(layers):
        a = multihead_attention(x, x, store, f"enc.l{i}.att", heads, mask)
        x = x + matmul(a, store[f"enc.l{i}.wo"])
        ff = tanh(matmul(x, store[f"enc.l{i}.w1"]) + store[f"enc.l{i}.b1"])
        x = x + matmul(ff, store[f"enc.l{i}.w2"])
    return x


def encode_segment(question, segment, vocab: Vocabulary, store: Params, *, l_max: int,
                   heads: int, layers: int = 1, anchor: str = "cls") -> SegmentEncoding:
    """Encode raw text: ``segment`` is a list of paragraphs, each a string or a list of sentences."""
    q_ids = vocab.encode(question)
    paras = []
    for p in segment:
        sents = split_sentences(p) if isinstance(p, str) else p
        paras.append([vocab.encode(s) for s in sents])
    prepared = prepare_segment(q_ids, paras, l_max, anchor)
    return SegmentEncoding(toy_encode(prepared, store, heads, layers), prepared)
