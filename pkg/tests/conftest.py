import numpy as np
import pytest

from cgsn.evalkit import SyntheticSpec, generate_instances
from cgsn.local_graph import LocalGraph
from cgsn.numerics import Value
from cgsn.pipeline import CGSN, ModelConfig, corpus_texts
from cgsn.encoder import build_vocab

MICRO = dict(n_seg=2, n_global_sent=4, n_global_para=2, n_global_doc=1, local_hops=1,
             global_hops=1, d_w=16, d_h=16, heads=2, encoder_layers=1, learning_rate=1e-2,
             batch_size=1, epochs=1)


def micro_spec(**kw):
    base = dict(n_docs=2, paragraphs_per_doc=6, n_seg=2, vocab_size=20, n_keys=3, n_decoys=1,
                question_len=2, sentences_per_paragraph=2, words_per_sentence=3, seed=5)
    base.update(kw)
    return SyntheticSpec(**base)


def micro_config(spec=None, **kw):
    spec = spec or micro_spec()
    cfg = dict(MICRO, n_seg=spec.n_seg, l_max=spec.max_pair_tokens)
    cfg.update(kw)
    return ModelConfig(**cfg)


@pytest.fixture
def micro():
    """(model, instances) for a tiny untrained configuration."""
    spec = micro_spec()
    insts = generate_instances(spec)
    vocab = build_vocab(corpus_texts(insts))
    return CGSN(micro_config(spec), vocab), insts


def random_local_graph(rng, d, sent_sizes=(2, 3, 1), para_of_sent=(0, 0, 1)):
    """A hand-built local graph with random states; default is 6+3+2+1 = 12 nodes."""
    n_tok = sum(sent_sizes)
    tok_sent = np.repeat(np.arange(len(sent_sizes)), sent_sizes)
    n_par = max(para_of_sent) + 1
    v = lambda n: Value(rng.normal(size=(n, d)), requires_grad=True)
    return LocalGraph(v(n_tok), v(len(sent_sizes)), v(n_par), v(1), tok_sent,
                      np.asarray(para_of_sent))
