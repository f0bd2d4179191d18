"""End-to-end wiring: documents, segmentation, the segment loop, training and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import (PreparedSegment, SegmentEncoding, Vocabulary, build_vocab, init_encoder,
                      prepare_segment, split_sentences, tokenize, toy_encode)
from .global_graph import (GlobalGraph, compress_receive, enhance_local, init_global,
                           init_selection_head, initial_global, paragraph_logits, run_global_hops)
from .layers import Params
from .local_graph import (init_level_interact, init_local_gat, init_local_graph, interact_levels,
                          run_local_hops)
from .memory import EvidenceMemory, init_memory, summarize, write_memory
from .numerics import (AdamState, Tape, Value, adam_step, backward, bce_with_logits,
                       linear_warmup_decay)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- data


@dataclass
class Document:
    id: str
    paragraphs: list[list[str]]  # each paragraph is a list of sentences

    @property
    def n(self) -> int:
        return len(self.paragraphs)

    def paragraph_text(self, i: int) -> str:
        return " ".join(self.paragraphs[i])

    @property
    def length(self) -> int:
        return sum(len(tokenize(self.paragraph_text(i))) for i in range(self.n))


@dataclass
class Instance:
    id: str
    question: str
    document: Document
    evidence: list[int] = field(default_factory=list)
    answer: str = ""

    def __post_init__(self):
        bad = [e for e in self.evidence if not 0 <= e < self.document.n]
        if bad:
            raise ValueError(f"instance {self.id}: evidence indices {bad} out of range "
                             f"for {self.document.n} paragraphs")

    def labels(self) -> np.ndarray:
        y = np.zeros(self.document.n, dtype=np.int64)
        y[list(self.evidence)] = 1
        return y

    def to_record(self) -> dict:
        return {"id": self.id, "question": self.question, "paragraphs": self.document.paragraphs,
                "evidence": list(self.evidence), "answer": self.answer}


def instance_from_record(rec: dict) -> Instance:
    try:
        paragraphs, evidence = rec["paragraphs"], list(rec.get("evidence", []))
        rid, question = str(rec["id"]), rec["question"]
    except KeyError as exc:
        raise ValueError(f"record missing field {exc}") from None
    kept, remap = [], {}
    for i, p in enumerate(paragraphs):
        sents = split_sentences(p) if isinstance(p, str) else [s for s in p if s.strip()]
        if not any(tokenize(s) for s in sents):
            log.warning("instance %s: dropping empty paragraph %d", rid, i)
            continue
        remap[i] = len(kept)
        kept.append(sents)
    if not kept:
        raise ValueError(f"instance {rid}: document has no non-empty paragraphs")
    evidence = [remap[e] for e in evidence if e in remap]
    return Instance(rid, question, Document(rid, kept), evidence, rec.get("answer", "") or "")


def load_dataset(path) -> list[Instance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(instance_from_record(json.loads(line)))
            except (ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_dataset(instances: Iterable[Instance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), ensure_ascii=False) + "\n")


def segment_document(doc: Document | Sequence, n_seg: int) -> list[range]:
    """Consecutive paragraph index ranges of at most ``n_seg`` paragraphs."""
    if n_seg < 1:
        raise ValueError("n_seg must be >= 1")
    n = doc.n if isinstance(doc, Document) else len(doc)
    if n == 0:
        raise ValueError("cannot segment an empty document")
    return [range(s, min(s + n_seg, n)) for s in range(0, n, n_seg)]


# ----------------------------------------------------------------- config


@dataclass
class ModelConfig:
    n_seg: int = 16
    n_global_sent: int = 64
    n_global_para: int = 32
    n_global_doc: int = 4
    local_hops: int = 4
    global_hops: int = 1
    d_w: int = 32
    d_h: int = 32
    heads: int = 4
    l_max: int = 64
    encoder_layers: int = 1
    anchor: str = "cls"
    use_global: bool = True
    use_memory: bool = True
    learning_rate: float = 1e-5
    warmup: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 5
    threshold: float = 0.5
    min_freq: int = 1
    seed: int = 0

    def __post_init__(self):
        counts = ("n_seg", "n_global_sent", "n_global_para", "n_global_doc", "d_w", "d_h",
                  "heads", "l_max", "encoder_layers", "batch_size", "epochs", "min_freq")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.local_hops < 0 or self.global_hops < 0:
            raise ValueError("hop counts must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.d_h % 2:
            raise ValueError("d_h must be even (BiLSTM halves)")
        if self.anchor not in ("cls", "last-sep"):
            raise ValueError(f"anchor must be 'cls' or 'last-sep', got {self.anchor!r}")
        if not 0.0 <= self.warmup <= 1.0:
            raise ValueError("warmup must lie in [0, 1]")

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_field(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split(sep, 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_field(fields[key], raw)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return dataclasses.replace(base or ModelConfig(), **values)


def format_config(cfg: ModelConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in cfg.to_dict().items())


# ------------------------------------------------------------------ model


@dataclass
class PreparedInstance:
    instance: Instance
    segments: list[PreparedSegment]
    ranges: list[range]
    labels: np.ndarray


@dataclass
class SegmentOutput:
    logits: Value
    enhanced: Value
    glob: GlobalGraph
    summary: np.ndarray | None
    loss: Value | None = None


Encoder = Callable[[PreparedSegment, Params], Value]


def init_params(cfg: ModelConfig, vocab_size: int) -> Params:
    rng = np.random.default_rng([cfg.seed, 1])
    store: Params = {}
    init_encoder(store, rng, vocab_size, cfg.d_w, cfg.d_h, cfg.l_max, cfg.encoder_layers)
    for level in ("token", "sentence", "paragraph"):
        init_level_interact(store, f"lgn.lstm.{level}", rng, cfg.d_h)
    init_local_gat(store, rng, cfg.d_h, cfg.local_hops)
    init_global(store, rng, cfg.d_h, cfg.n_global_sent, cfg.n_global_para, cfg.n_global_doc)
    init_memory(store, rng, cfg.d_h)
    init_selection_head(store, rng, cfg.d_h)
    return store


class CGSN:
    """Evidence selector over arbitrarily long documents, one segment at a time.

    ``encoder`` may replace the toy encoder; it receives a PreparedSegment and
    the parameter store and must return hidden states [P, l_max, d_h].
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: Params | None = None,
                 encoder: Encoder | None = None):
        self.config = config
        self.vocab = vocab
        self.params = init_params(config, len(vocab)) if params is None else params
        self.encoder = encoder or partial(_toy, heads=config.heads, layers=config.encoder_layers)

    # -- preparation

    def prepare(self, inst: Instance) -> PreparedInstance:
        cfg = self.config
        q_ids = self.vocab.encode(inst.question)
        ranges = segment_document(inst.document, cfg.n_seg)
        segs = []
        for r in ranges:
            paras = [[self.vocab.encode(s) for s in inst.document.paragraphs[i]] for i in r]
            segs.append(prepare_segment(q_ids, paras, cfg.l_max, cfg.anchor))
        return PreparedInstance(inst, segs, ranges, inst.labels())

    # -- forward

    def forward_segment(self, seg: PreparedSegment, glob: GlobalGraph, mem: EvidenceMemory,
                        labels: np.ndarray | None = None) -> SegmentOutput:
        cfg, store = self.config, self.params
        if cfg.use_global and cfg.use_memory and not mem.empty:
            glob = write_memory(mem, glob, store)
        hidden = self.encoder(seg, store)
        g = init_local_graph(SegmentEncoding(hidden, seg))
        g = interact_levels(g, store)
        g = run_local_hops(g, store, cfg.local_hops, cfg.heads)
        if cfg.use_global:
            glob = compress_receive(g, glob, store, cfg.heads)
            glob = run_global_hops(glob, store, cfg.global_hops, cfg.heads)
            enhanced = enhance_local(g, glob, store, cfg.heads)
        else:
            enhanced = g.paragraphs
        logits = paragraph_logits(enhanced, store)
        summary = summarize(logits, enhanced) if cfg.use_memory else None
        loss = None
        if labels is not None:
            loss = bce_with_logits(logits, labels).mean()
        return SegmentOutput(logits, enhanced, glob, summary, loss)

    def start_document(self) -> tuple[GlobalGraph, EvidenceMemory]:
        return initial_global(self.params), EvidenceMemory()

    def forward_document(self, inst: Instance | PreparedInstance, track_memory: bool = False):
        """Logits for every paragraph, in document order.

        With ``track_memory`` each segment runs on its own tape and the tape's
        peak live bytes are returned per segment as a second value.
        """
        prep = inst if isinstance(inst, PreparedInstance) else self.prepare(inst)
        glob, mem = self.start_document()
        logits, peaks = [], []
        for seg in prep.segments:
            if track_memory:
                with Tape() as tape:
                    out = self.forward_segment(seg, glob, mem)
                peaks.append(tape.peak_bytes)
            else:
                out = self.forward_segment(seg, glob, mem)
            logits.append(out.logits.data.copy())
            glob = out.glob.detach()
            mem = EvidenceMemory(out.summary)
        all_logits = np.concatenate(logits)
        return (all_logits, peaks) if track_memory else all_logits

    def probabilities(self, inst) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.forward_document(inst)))


def _toy(seg, store, heads, layers):
    return toy_encode(seg, store, heads, layers)


# -------------------------------------------------------------- selection


def select_evidence(probabilities: Sequence[float], threshold: float = 0.5) -> list[int]:
    """Indices with probability above ``threshold``; the argmax alone if none are."""
    p = np.asarray(probabilities, dtype=float)
    if p.size == 0:
        return []
    chosen = np.flatnonzero(p > threshold)
    return chosen.tolist() if chosen.size else [int(np.argmax(p))]


def tune_threshold(model: CGSN, dev: Sequence[Instance],
                   grid: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7)) -> tuple[float, dict]:
    """Pick the grid threshold with the best mean evidence F1 (ties -> earlier grid value)."""
    from .evalkit import evidence_f1

    probs = [model.probabilities(inst) for inst in dev]
    scores = {}
    for tau in grid:
        f1s = [evidence_f1(select_evidence(p, tau), inst.evidence)[2] for p, inst in zip(probs, dev)]
        scores[tau] = float(np.mean(f1s))
    best = max(grid, key=lambda t: (scores[t], -list(grid).index(t)))
    return best, scores


# --------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    params: Params
    metadata: dict = field(default_factory=dict)

    def model(self, encoder: Encoder | None = None) -> CGSN:
        return CGSN(self.config, self.vocab, self.params, encoder)

    def manifest(self) -> dict:
        tensors, offset = [], 0
        for name, v in self.params.items():
            tensors.append({"name": name, "shape": list(v.shape), "offset": offset})
            offset += v.data.nbytes
        return {"format": "cgsn-checkpoint/1", "config": self.config.to_dict(),
                "vocab_hash": self.vocab.digest(), "vocab_file": "vocab.txt",
                "metadata": self.metadata, "tensors": tensors, "total_bytes": offset}

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        with open(d / "params.bin", "wb") as fh:
            for v in self.params.values():
                fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        self.vocab.save(d / "vocab.txt")
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format") != "cgsn-checkpoint/1":
            raise ValueError(f"{d}: unrecognised checkpoint format")
        vocab = Vocabulary.load(d / manifest["vocab_file"])
        if vocab.digest() != manifest["vocab_hash"]:
            raise ValueError(f"{d}: vocabulary hash mismatch")
        blob = (d / "params.bin").read_bytes()
        params: Params = {}
        for t in manifest["tensors"]:
            n = int(np.prod(t["shape"])) * 8
            arr = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=t["offset"])
            params[t["name"]] = Value(arr.reshape(t["shape"]), requires_grad=True, name=t["name"])
        config = ModelConfig(**manifest["config"])
        return cls(config, vocab, params, manifest.get("metadata", {}))


def corpus_texts(instances: Iterable[Instance]) -> list[str]:
    texts = []
    for inst in instances:
        texts.append(inst.question)
        for p in inst.document.paragraphs:
            texts.extend(p)
    return texts


def _epoch_orders(n: int, epochs: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    return [rng.permutation(n) for _ in range(epochs)]


def _batches(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def train(dataset: Sequence[Instance], config: ModelConfig, vocab: Vocabulary | None = None,
          encoder: Encoder | None = None, max_steps: int | None = None,
          on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Shuffled epochs; documents advance in segment-synchronous batches, one AdamW step per segment.

    ``max_steps`` caps the number of optimizer steps (the schedule is still laid
    out over the full run so stopping early does not change its shape).
    """
    if not dataset:
        raise ValueError("empty training set")
    vocab = vocab or build_vocab(corpus_texts(dataset), config.min_freq)
    model = CGSN(config, vocab, encoder=encoder)
    prepared = [model.prepare(inst) for inst in dataset]
    orders = _epoch_orders(len(prepared), config.epochs, config.seed)
    plan = [(e, b) for e, order in enumerate(orders) for b in _batches(order, config.batch_size)]
    total = sum(max(len(prepared[i].segments) for i in b) for _, b in plan)
    if max_steps is not None:
        total_for_stop = min(total, max_steps)
    else:
        total_for_stop = total
    adam = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon,
                     config.weight_decay)
    names = list(model.params)
    step, losses = 0, []
    for epoch, batch in plan:
        docs = [prepared[i] for i in batch]
        states = [model.start_document() for _ in docs]
        for t in range(max(len(d.segments) for d in docs)):
            if step >= total_for_stop:
                break
            live = [k for k, d in enumerate(docs) if t < len(d.segments)]
            with Tape() as tape:
                seg_losses, outs = [], {}
                for k in live:
                    d = docs[k]
                    r = d.ranges[t]
                    glob, mem = states[k]
                    out = model.forward_segment(d.segments[t], glob, mem, d.labels[r.start:r.stop])
                    outs[k] = out
                    seg_losses.append(out.loss)
                loss = seg_losses[0]
                for extra in seg_losses[1:]:
                    loss = loss + extra
                loss = loss * (1.0 / len(seg_losses))
            value = loss.item()
            if not math.isfinite(value):
                ids = [docs[k].instance.id for k in live]
                raise TrainingDiverged(f"loss became {value} at step {step} (epoch {epoch}, "
                                       f"segment {t}, instances {ids})")
            grads = backward(tape, loss)
            named = {n: grads[model.params[n]] for n in names}
            lr = config.learning_rate * linear_warmup_decay(step, total, config.warmup)
            model.params, adam = adam_step(model.params, named, adam, lr=lr)
            for k, out in outs.items():
                states[k] = (out.glob.detach(), EvidenceMemory(out.summary))
            losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
        if step >= total_for_stop:
            break
    meta = {"step": step, "epoch": epoch, "seed": config.seed,
            "final_loss": losses[-1] if losses else None}
    return Checkpoint(config, vocab, model.params, meta)


# ---------------------------------------------------------- memory estimate


@dataclass
class MemoryModel:
    """Activation-cost symbols: document length L, local window W, global tokens,
    paragraphs per segment B, and the constant global-graph cost."""

    L: int
    W: int
    B: int = 16
    global_tokens: int = 0
    m_global: float = 0.0
    f_local: Callable[[int, int], float] | None = None

    @property
    def w_half(self) -> int:
        return self.W // 2


def default_f_local(B: int, W: int) -> float:
    # token + sentence + paragraph nodes of one segment, each at most B * W/2
    return 3.0 * B * (W // 2)


def estimate_memory(mode: str, mm: MemoryModel, breakdown: bool = False):
    """Relative activation cost of one forward pass.

    ``cgsn``: B * W_half^2 + f_local(B, W) + M_global (no dependence on L).
    ``led-style``: L * (W + G_t).
    """
    for name in ("L", "W", "B"):
        if getattr(mm, name) <= 0:
            raise ValueError(f"{name} must be positive")
    if mode == "cgsn":
        f_local = mm.f_local or default_f_local
        parts = {"encoder": float(mm.B * mm.w_half ** 2), "local": float(f_local(mm.B, mm.W)),
                 "global": float(mm.m_global)}
    elif mode == "led-style":
        parts = {"windowed": float(mm.L * (mm.W + mm.global_tokens))}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    total = sum(parts.values())
    return (total, parts) if breakdown else total
