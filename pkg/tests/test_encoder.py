import numpy as np
import pytest

from cgsn.encoder import (CLS_ID, PAD_ID, SEP_ID, UNK_ID, Vocabulary, build_vocab, encode_segment,
                          format_pair, init_encoder, prepare_segment, split_sentences, tokenize,
                          toy_encode)


@pytest.fixture
def vocab():
    return build_vocab(["a b", "b c"])


def test_build_vocab_small(vocab):
    assert len(vocab) == 7
    assert [vocab.id(t) for t in "abc"] == [4, 5, 6]


def test_unseen_token_maps_to_unk(vocab):
    assert vocab.encode("a zebra") == [4, UNK_ID]


def test_build_vocab_deterministic():
    corpus = ["The cat sat.", "A dog ran!", "the end"]
    assert build_vocab(corpus).itos == build_vocab(list(corpus)).itos


def test_build_vocab_min_freq():
    v = build_vocab(["a a b"], min_freq=2)
    assert "a" in v and "b" not in v


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_tokenizer_lowercases_and_splits_punctuation():
    assert tokenize("Hello, World!") == ["hello", ",", "world", "!"]


def test_sentence_split():
    assert split_sentences("One two. Three? Four! five") == ["One two.", "Three?", "Four!", "five"]


def test_vocab_file_roundtrip(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines == ["a", "b", "c"]  # line number == id - 4
    assert Vocabulary.load(tmp_path / "v.txt").itos == vocab.itos


def test_format_pair_basic(vocab):
    a, b = vocab.id("a"), vocab.id("b")
    assert format_pair("a", "b", vocab, 6) == [CLS_ID, a, SEP_ID, b, SEP_ID, PAD_ID]


def test_format_pair_empty_paragraph(vocab):
    a = vocab.id("a")
    assert format_pair("a", "", vocab, 6) == [CLS_ID, a, SEP_ID, SEP_ID, PAD_ID, PAD_ID]


def test_format_pair_truncates_paragraph_keeps_final_sep(vocab):
    ids = format_pair("a", "b c b c b", vocab, 6)
    assert ids == [CLS_ID, vocab.id("a"), SEP_ID, vocab.id("b"), vocab.id("c"), SEP_ID]


def test_format_pair_question_too_long(vocab):
    with pytest.raises(ValueError):
        format_pair("a b c a", "b", vocab, 6)


def test_prepare_segment_maps_tokens():
    prep = prepare_segment([4], [[[5, 6], [7]], [[8]]], l_max=8)
    assert prep.token_sentence[0].tolist() == [-1, -1, -1, 0, 0, 1, -1, -1]
    assert prep.token_paragraph[1].tolist() == [-1, -1, -1, 1, -1, -1, -1, -1]
    assert prep.sentence_paragraph.tolist() == [0, 0, 1]
    assert prep.cls_positions.tolist() == [0, 0]
    assert prep.paragraph_token_spans == [(3, 6), (3, 4)]


def test_prepare_segment_last_sep_anchor():
    prep = prepare_segment([4], [[[5, 6]]], l_max=8, anchor="last-sep")
    assert prep.anchor_positions.tolist() == [5]
    assert prep.token_ids[0, 5] == SEP_ID


def test_prepare_segment_empty_errors():
    with pytest.raises(ValueError):
        prepare_segment([4], [], l_max=8)


def _store(vocab_size, d=32, l_max=64, layers=1, seed=0):
    store = {}
    init_encoder(store, np.random.default_rng(seed), vocab_size, d, d, l_max, layers)
    return store


def test_encode_segment_shape():
    words = [f"w{i}" for i in range(30)]
    vocab = build_vocab([" ".join(words)])
    store = _store(len(vocab))
    rng = np.random.default_rng(1)
    seg = [" ".join(rng.choice(words, 10)) + "." for _ in range(16)]
    enc = encode_segment("w1 w2", seg, vocab, store, l_max=64, heads=4)
    assert enc.hidden.shape == (16, 64, 32)
    again = encode_segment("w1 w2", seg, vocab, store, l_max=64, heads=4)
    assert np.array_equal(enc.hidden.data, again.hidden.data)


def test_encode_segment_zero_paragraphs():
    vocab = build_vocab(["a"])
    with pytest.raises(ValueError):
        encode_segment("a", [], vocab, _store(len(vocab)), l_max=8, heads=4)


def test_toy_encoder_matches_hand_forward():
    vocab = build_vocab(["a b"])
    d, heads, l_max = 4, 2, 6
    store = _store(len(vocab), d=d, l_max=l_max, seed=3)
    prep = prepare_segment(vocab.encode("a"), [[vocab.encode("b")]], l_max)
    out = toy_encode(prep, store, heads).data[0]

    P = {k: v.data for k, v in store.items()}
    ids = prep.token_ids[0]
    x = np.array([P["enc.embed"][t] + P["enc.pos"][i] for i, t in enumerate(ids)])
    dz = d // heads
    att = np.zeros_like(x)
    for i in range(l_max):
        for h in range(heads):
            sl = slice(h * dz, (h + 1) * dz)
            q = (x[i] @ P["enc.l0.att.wq"])[sl]
            scores, vals = [], []
            for j in range(l_max):
                if ids[j] == PAD_ID:
                    continue
                scores.append(q @ (x[j] @ P["enc.l0.att.wk"])[sl] / np.sqrt(dz))
                vals.append((x[j] @ P["enc.l0.att.wv"])[sl])
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            att[i, sl] = w @ np.array(vals)
    h1 = x + att @ P["enc.l0.wo"]
    ref = h1 + np.tanh(h1 @ P["enc.l0.w1"] + P["enc.l0.b1"]) @ P["enc.l0.w2"]
    assert np.allclose(out, ref, atol=1e-12)


def test_pad_embedding_does_not_reach_real_positions():
    vocab = build_vocab(["a b c"])
    store = _store(len(vocab), d=8, l_max=10)
    prep = prepare_segment(vocab.encode("a"), [[vocab.encode("b c")]], 10)
    before = toy_encode(prep, store, heads=2).data
    emb = store["enc.embed"].data.copy()
    emb[PAD_ID] += 100.0
    store["enc.embed"] = type(store["enc.embed"])(emb, requires_grad=True)
    after = toy_encode(prep, store, heads=2).data
    real = prep.token_ids[0] != PAD_ID
    assert np.allclose(before[0, real], after[0, real], atol=1e-12)
