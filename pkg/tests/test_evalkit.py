import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgsn.evalkit import (SyntheticSpec, evaluate, evidence_f1, generate_corpus, generate_instances,
                          ingest_qasper, lexical_baseline, read_predictions, rep_inter,
                          write_predictions)
from cgsn.pipeline import Document, Instance, load_dataset


def test_evidence_f1_examples():
    assert evidence_f1({2}, {2}) == (1.0, 1.0, 1.0)
    assert evidence_f1({1, 2}, {2, 3}) == (0.5, 0.5, 0.5)
    assert evidence_f1(set(), set()) == (1.0, 1.0, 1.0)
    assert evidence_f1({1}, set())[2] == 0.0 and evidence_f1(set(), {1})[2] == 0.0


@given(st.sets(st.integers(0, 9)), st.sets(st.integers(0, 9)))
def test_evidence_f1_symmetric(a, b):
    assert evidence_f1(a, b)[2] == evidence_f1(b, a)[2]


def test_rep_inter_examples():
    assert rep_inter(["a b c", "a b c"], 1) == 0.5
    assert rep_inter(["a b", "c d"], 1) == 1.0
    assert rep_inter(["a b c", "b c d"], 2) == 0.75


def test_rep_inter_short_paragraphs_absent():
    assert rep_inter(["a", "b"], 2) is None
    with pytest.raises(ValueError):
        rep_inter([], 1)


@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6), min_size=1, max_size=4),
       st.integers(1, 3), st.randoms())
def test_rep_inter_permutation_invariant(paras, n, rnd):
    texts = [" ".join(p) for p in paras]
    shuffled = list(texts)
    rnd.shuffle(shuffled)
    assert rep_inter(texts, n) == rep_inter(shuffled, n)


def test_rep_inter_disjoint_is_one():
    assert rep_inter(["a b c", "d e f", "g h"], 2) == 1.0


def _inst(paragraphs, question="x y", evidence=(0,), rid="i"):
    return Instance(rid, question, Document(rid, [[p] for p in paragraphs]), list(evidence), "")


def test_lexical_baseline_examples():
    inst = _inst(["a", "b", "c", "x y z"])
    assert lexical_baseline(inst, 1) == [3]
    assert lexical_baseline(_inst(["a", "b"]), 1) == [0]
    assert lexical_baseline(_inst(["a", "b"]), 5) == [0, 1]


def test_evaluate_report_and_json():
    gold = [_inst(["a b", "a b", "c d"], evidence=[0, 2], rid="g")]
    report = evaluate({"g": [0, 1]}, gold)
    js = report.to_json()
    assert set(js) == {"evidence_f1", "precision", "recall", "rep_inter_1", "rep_inter_2",
                       "rep_inter_3", "rep_inter_mean", "n_instances"}
    assert js["evidence_f1"] == 0.5 and js["rep_inter_1"] == 0.5
    assert js["rep_inter_3"] is None and js["rep_inter_mean"] == pytest.approx(0.5)


def test_missing_prediction_counts_as_empty():
    gold = [_inst(["a"], evidence=[0], rid="g")]
    assert evaluate({}, gold).evidence_f1 == 0.0


def test_prediction_file_roundtrip(tmp_path):
    write_predictions([("a", [0, 2], [0.9, 0.1, 0.7])], tmp_path / "p.jsonl")
    rec = json.loads((tmp_path / "p.jsonl").read_text())
    assert rec == {"id": "a", "indices": [0, 2], "probabilities": [0.9, 0.1, 0.7]}
    assert read_predictions(tmp_path / "p.jsonl") == {"a": [0, 2]}


def test_bad_prediction_line(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"id": 1}\n')
    with pytest.raises(ValueError, match="p.jsonl:1"):
        read_predictions(tmp_path / "p.jsonl")


# ------------------------------------------------------------------ corpus


def test_corpus_is_byte_identical(tmp_path):
    generate_corpus(SyntheticSpec(n_docs=20, seed=7), tmp_path / "a.jsonl")
    generate_corpus(SyntheticSpec(n_docs=20, seed=7), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_cross_segment_guarantee():
    spec = SyntheticSpec(n_docs=200, seed=3)
    for inst in generate_instances(spec):
        a, b = inst.evidence
        assert 0 <= a < b < inst.document.n
        assert a // spec.n_seg == 0 and b // spec.n_seg > 0
        assert inst.document.n // spec.n_seg >= 3


def test_key_links_the_evidence_pair():
    for inst in generate_instances(SyntheticSpec(n_docs=50, seed=4)):
        keys = [set(t for t in inst.document.paragraph_text(i).split() if t.startswith("key"))
                for i in range(inst.document.n)]
        a, b = inst.evidence
        assert len(keys[a]) == 1 and keys[a] == keys[b]
        assert sum(keys[a] == k for k in keys) == 2  # no other paragraph carries it


def test_duplicates_are_planted_as_non_evidence():
    spec = SyntheticSpec(n_docs=50, duplicate_rate=1.0, seed=5)
    for inst in generate_instances(spec):
        a = inst.evidence[0]
        copies = [i for i in range(inst.document.n) if inst.document.paragraphs[i] == inst.document.paragraphs[a]]
        assert len(copies) == 2 and copies[1] not in inst.evidence


def test_lexical_baseline_calibration():
    cross = generate_instances(SyntheticSpec(n_docs=200, seed=1))
    same = generate_instances(SyntheticSpec(n_docs=200, seed=1, cross_segment=False))
    f = lambda data: np.mean([evidence_f1(lexical_baseline(i, 2), i.evidence)[2] for i in data])
    assert f(cross) < 0.6
    assert f(same) >= 0.95


@pytest.mark.parametrize("kw", [dict(n_decoys=8, n_keys=10), dict(paragraphs_per_doc=4, n_seg=4),
                                dict(paragraphs_per_doc=1), dict(question_len=40)])
def test_inconsistent_spec(kw):
    with pytest.raises(ValueError):
        generate_instances(SyntheticSpec(**kw))


# ------------------------------------------------------------------ qasper


def _qasper(tmp_path):
    paper = {"full_text": [{"section_name": f"s{s}", "paragraphs": [f"Section {s} para {p}. More text." for p in range(2)]}
                           for s in range(3)],
             "qas": [{"question": "What is it?", "question_id": "q1",
                      "answers": [{"answer": {"evidence": ["Section 1 para 0. More text.", "not in paper"],
                                              "highlighted_evidence": [], "free_form_answer": "it"}}]}]}
    path = tmp_path / "qasper.json"
    path.write_text(json.dumps({"p1": paper}))
    return path


def test_ingest_qasper_flattens_and_counts(tmp_path):
    insts, stats = ingest_qasper(_qasper(tmp_path))
    (inst,) = insts
    assert inst.document.n == 6
    assert inst.document.paragraphs[3] == ["Section 1 para 1.", "More text."]
    assert inst.evidence == [2]
    assert stats["evidence_dropped"] == 1 and stats["evidence_matched"] == 1


def test_ingest_qasper_roundtrip(tmp_path):
    insts, _ = ingest_qasper(_qasper(tmp_path), tmp_path / "d.jsonl")
    again = load_dataset(tmp_path / "d.jsonl")
    assert [i.to_record() for i in again] == [i.to_record() for i in insts]


def test_ingest_qasper_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="bad.json"):
        ingest_qasper(bad)


def test_same_segment_duplicates_follow_the_evidence():
    spec = SyntheticSpec(n_docs=100, cross_segment=False, duplicate_rate=1.0, seed=6)
    for inst in generate_instances(spec):
        a, b = inst.evidence
        assert a // spec.n_seg == b // spec.n_seg
        paras = inst.document.paragraphs
        copies = [i for i in range(inst.document.n) if i not in (a, b) and paras[i] in (paras[a], paras[b])]
        assert len(copies) == 1 and copies[0] // spec.n_seg > a // spec.n_seg
