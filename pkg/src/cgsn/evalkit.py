"""Evidence metrics, redundancy scoring, synthetic corpora, Qasper ingestion and a lexical baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import split_sentences, tokenize
from .pipeline import Document, Instance, write_dataset

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ metrics


def evidence_f1(pred: Iterable[int], gold: Iterable[int]) -> tuple[float, float, float]:
    """Set precision, recall and F1. Both empty scores 1.0; exactly one empty scores 0.0."""
    pred, gold = set(pred), set(gold)
    if not pred and not gold:
        return 1.0, 1.0, 1.0
    if not pred or not gold:
        return 0.0, 0.0, 0.0
    hit = len(pred & gold)
    if hit == 0:
        return 0.0, 0.0, 0.0
    p, r = hit / len(pred), hit / len(gold)
    return p, r, 2 * p * r / (p + r)


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def rep_inter(paragraphs: Sequence[str], n: int) -> float | None:
    """Distinct n-grams across all selected paragraphs over the total n-gram count.

    n-grams never span paragraph boundaries. Returns None when no paragraph is
    long enough to contain an n-gram.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not paragraphs:
        raise ValueError("need at least one paragraph")
    total, uniq = 0, set()
    for text in paragraphs:
        grams = ngrams(text.lower().split(), n)
        total += len(grams)
        uniq.update(grams)
    return len(uniq) / total if total else None


@dataclass
class MetricReport:
    precision: float
    recall: float
    evidence_f1: float
    rep_inter: dict[int, float | None]
    n_instances: int
    per_instance: list[dict] = field(default_factory=list)

    @property
    def rep_inter_mean(self) -> float | None:
        vals = [v for v in self.rep_inter.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> dict:
        out = {"evidence_f1": self.evidence_f1, "precision": self.precision, "recall": self.recall}
        for n in (1, 2, 3):
            out[f"rep_inter_{n}"] = self.rep_inter.get(n)
        out["rep_inter_mean"] = self.rep_inter_mean
        out["n_instances"] = self.n_instances
        return out


def evaluate(predictions: dict[str, Sequence[int]], gold: Sequence[Instance],
             ns: Sequence[int] = (1, 2, 3)) -> MetricReport:
    """Average evidence P/R/F1 and REP_inter of the selected paragraphs over ``gold``.

    Instances without a prediction count as an empty selection.
    """
    rows, reps = [], {n: [] for n in ns}
    for inst in gold:
        pred = sorted(set(predictions.get(inst.id, [])))
        p, r, f = evidence_f1(pred, inst.evidence)
        row = {"id": inst.id, "precision": p, "recall": r, "f1": f}
        if pred:
            texts = [inst.document.paragraph_text(i) for i in pred]
            for n in ns:
                v = rep_inter(texts, n)
                row[f"rep_inter_{n}"] = v
                if v is not None:
                    reps[n].append(v)
        rows.append(row)
    mean = lambda key: float(np.mean([r[key] for r in rows])) if rows else 0.0
    return MetricReport(mean("precision"), mean("recall"), mean("f1"),
                        {n: (float(np.mean(v)) if v else None) for n, v in reps.items()},
                        len(rows), rows)


def write_predictions(rows: Iterable[tuple[str, Sequence[int], Sequence[float]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, idx, probs in rows:
            fh.write(json.dumps({"id": rid, "indices": [int(i) for i in idx],
                                 "probabilities": [float(p) for p in probs]}) + "\n")


def read_predictions(path) -> dict[str, list[int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = [int(i) for i in rec["indices"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction line ({exc})") from None
    return out


# ---------------------------------------------------------------- baseline


def lexical_baseline(inst: Instance, k: int) -> list[int]:
    """Top-k paragraphs by number of distinct question tokens they contain; ties -> lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = set(tokenize(inst.question))
    scores = [len(q & set(tokenize(inst.document.paragraph_text(i)))) for i in range(inst.document.n)]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


# -------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic long-document evidence task.

    In ``cross_segment`` mode the first evidence paragraph (segment 0) carries
    the question keywords plus a key token; the second evidence paragraph sits
    in a later segment and shares only that key. Decoy paragraphs carry other
    keys. Otherwise both evidence paragraphs carry the keywords and share one
    segment. ``duplicate_rate`` is the chance that an exact copy of the first
    evidence paragraph is planted in a later segment as a non-evidence paragraph.
    In same-segment mode with duplicates the evidence segment is never the last
    one, so the copy always follows the evidence it repeats.
    """

    n_docs: int = 100
    paragraphs_per_doc: int = 12
    n_seg: int = 4
    cross_segment: bool = True
    duplicate_rate: float = 0.0
    vocab_size: int = 60
    n_keys: int = 4
    n_decoys: int = 1
    question_len: int = 3
    sentences_per_paragraph: int = 2
    words_per_sentence: int = 5
    keyword_leak: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_docs", "paragraphs_per_doc", "n_seg", "vocab_size", "question_len",
                     "sentences_per_paragraph", "words_per_sentence"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.paragraphs_per_doc < 2:
            raise ValueError("need at least 2 paragraphs for 2 evidence paragraphs")
        if self.cross_segment and self.paragraphs_per_doc <= self.n_seg:
            raise ValueError("cross-segment mode needs more than one segment per document")
        if self.question_len * 2 > self.vocab_size:
            raise ValueError("vocabulary too small for the question length")
        if not 0.0 <= self.duplicate_rate <= 1.0 or not 0.0 <= self.keyword_leak <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        if self.cross_segment and self.n_keys < self.n_decoys + 1:
            raise ValueError("need more keys than decoys")
        later = self.paragraphs_per_doc - self.n_seg
        extra = 1 + self.n_decoys + (1 if self.duplicate_rate > 0 else 0)
        if self.cross_segment and later < extra:
            raise ValueError(f"only {later} paragraphs after segment 0 for {extra} planted paragraphs")
        if not self.cross_segment and self.duplicate_rate > 0 and self.paragraphs_per_doc < 3:
            raise ValueError("duplicates need at least 3 paragraphs")

    @property
    def max_pair_tokens(self) -> int:
        para = self.sentences_per_paragraph * (self.words_per_sentence + 1) + self.question_len + 1
        return 3 + self.question_len + para


def _sentence_words(rng, pool, n):
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def _paragraph(rng, spec: SyntheticSpec, pool, planted: Sequence[str]) -> list[str]:
    sents = [_sentence_words(rng, pool, spec.words_per_sentence)
             for _ in range(spec.sentences_per_paragraph)]
    for tok in planted:
        s = sents[int(rng.integers(len(sents)))]
        s.insert(int(rng.integers(len(s) + 1)), tok)
    return [" ".join(s) + " ." for s in sents]


def generate_instances(spec: SyntheticSpec) -> list[Instance]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    words = [f"w{i}" for i in range(spec.vocab_size)]
    keys = [f"key{i}" for i in range(spec.n_keys)]
    n, S = spec.paragraphs_per_doc, spec.n_seg
    out = []
    for d in range(spec.n_docs):
        kw = list(rng.choice(words, size=spec.question_len, replace=False))
        filler = [w for w in words if w not in kw]
        leak = lambda: [kw[int(rng.integers(len(kw)))]] if rng.random() < spec.keyword_leak else []
        plan: dict[int, list[str]] = {}
        if spec.cross_segment:
            a = int(rng.integers(0, min(S, n)))
            later = list(rng.permutation(np.arange(S, n)))
            b = int(later.pop())
            key, *decoys = rng.choice(keys, size=1 + spec.n_decoys, replace=False)
            plan[a] = kw + [key]
            plan[b] = leak() + [key]
            for dk in decoys:
                plan[int(later.pop())] = leak() + [dk]
            dup_slots = later
        else:
            n_segs = (n + S - 1) // S
            # with duplicates on, keep the last segment free so the copy always comes later
            span = n_segs - 1 if spec.duplicate_rate > 0 and n_segs > 1 else n_segs
            seg = int(rng.integers(0, span))
            members = list(range(seg * S, min(n, seg * S + S)))
            if len(members) < 2:
                members = list(range(max(0, n - 2), n))
            a, b = (int(x) for x in rng.choice(members, size=2, replace=False))
            plan[a] = list(kw)
            plan[b] = list(kw)
            dup_slots = [i for i in range(n) if i not in (a, b) and i // S > max(a, b) // S]
            if not dup_slots:
                dup_slots = [i for i in range(n) if i not in (a, b)]
        paragraphs = [None] * n
        for i, toks in plan.items():
            paragraphs[i] = _paragraph(rng, spec, filler, [str(t) for t in toks])
        if spec.duplicate_rate > 0 and rng.random() < spec.duplicate_rate and dup_slots:
            paragraphs[int(rng.choice(dup_slots))] = list(paragraphs[a])
        for i in range(n):
            if paragraphs[i] is None:
                paragraphs[i] = _paragraph(rng, spec, filler, leak())
        rid = f"syn-{spec.seed}-{d}"
        out.append(Instance(rid, " ".join(str(w) for w in kw) + " ?", Document(rid, paragraphs),
                            sorted([a, b]), answer=""))
    return out


def generate_corpus(spec: SyntheticSpec, path) -> list[Instance]:
    """Generate instances and write them as a dataset file; returns the instances."""
    instances = generate_instances(spec)
    write_dataset(instances, path)
    return instances


# ---------------------------------------------------------------- qasper


def ingest_qasper(path, out_path=None) -> tuple[list[Instance], dict]:
    """Flatten a Qasper JSON file into instances (first annotator only).

    Evidence strings are matched to paragraphs by exact (whitespace-stripped)
    text; unmatched strings are dropped and counted in the returned stats.
    """
    path = Path(path)
    try:
        papers = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: cannot read Qasper file ({exc})") from None
    if not isinstance(papers, dict):
        raise ValueError(f"{path}: expected an object keyed by paper id")
    stats = {"papers": 0, "questions": 0, "evidence_matched": 0, "evidence_dropped": 0}
    instances = []
    for pid, paper in papers.items():
        try:
            sections = paper["full_text"]
            qas = paper["qas"]
        except (KeyError, TypeError):
            raise ValueError(f"{path}: paper {pid!r} lacks full_text/qas") from None
        texts = [p.strip() for sec in sections for p in (sec.get("paragraphs") or []) if p and p.strip()]
        if not texts:
            log.warning("%s: paper %s has no paragraphs, skipped", path, pid)
            continue
        stats["papers"] += 1
        index = {}
        for i, t in enumerate(texts):
            index.setdefault(t, i)
        doc = Document(str(pid), [split_sentences(t) or [t] for t in texts])
        for qa in qas:
            answers = qa.get("answers") or []
            first = answers[0].get("answer", {}) if answers else {}
            strings = first.get("evidence") or first.get("highlighted_evidence") or []
            evidence = set()
            for s in strings:
                i = index.get(s.strip())
                if i is None:
                    stats["evidence_dropped"] += 1
                else:
                    stats["evidence_matched"] += 1
                    evidence.add(i)
            answer = first.get("free_form_answer") or " ".join(first.get("extractive_spans") or [])
            if not answer and first.get("yes_no") is not None:
                answer = "Yes" if first["yes_no"] else "No"
            qid = qa.get("question_id") or f"{pid}-{stats['questions']}"
            instances.append(Instance(str(qid), qa["question"], doc, sorted(evidence), answer))
            stats["questions"] += 1
    if out_path is not None:
        write_dataset(instances, out_path)
    return instances, stats


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
