#!/usr/bin/env python3
"""Walk through one document segment by segment and look at what each stage produces.

Run:  python demos/01_walkthrough.py
"""

import numpy as np

from cgsn import CGSN, ModelConfig, SyntheticSpec, generate_instances
from cgsn.encoder import SegmentEncoding, build_vocab
from cgsn.global_graph import compress_receive, enhance_local, initial_global, run_global_hops
from cgsn.local_graph import init_local_graph, interact_levels, run_local_hops
from cgsn.pipeline import corpus_texts

np.set_printoptions(precision=3, suppress=True)

# a small synthetic document: 12 paragraphs, 4 per segment
spec = SyntheticSpec(n_docs=1, seed=3)
inst = generate_instances(spec)[0]
print("question:", inst.question)
for i in range(inst.document.n):
    mark = "*" if i in inst.evidence else " "
    print(f" {mark} [{i:2d}] {inst.document.paragraph_text(i)}")

cfg = ModelConfig(n_seg=4, n_global_sent=8, n_global_para=4, n_global_doc=2, local_hops=2,
                  d_w=32, d_h=32, heads=4, l_max=spec.max_pair_tokens)
model = CGSN(cfg, build_vocab(corpus_texts([inst])))
prep = model.prepare(inst)
seg = prep.segments[0]
print("\nsegment 0 token ids (one row per [CLS] q [SEP] p [SEP] pair):")
print(seg.token_ids)

# local graph for the first segment
hidden = model.encoder(seg, model.params)
g = init_local_graph(SegmentEncoding(hidden, seg))
print("\nnodes: tokens", g.tokens.shape, "sentences", g.sentences.shape,
      "paragraphs", g.paragraphs.shape, "segment", g.segment.shape)
g = run_local_hops(interact_levels(g, model.params), model.params, cfg.local_hops, cfg.heads)

# the global banks have a fixed size however long the document is
glob = compress_receive(g, initial_global(model.params), model.params, cfg.heads)
glob = run_global_hops(glob, model.params, cfg.global_hops, cfg.heads)
print("banks:", {b: glob.bank(b).shape for b in ("sentence", "paragraph", "document")})
enhanced = enhance_local(g, glob, model.params, cfg.heads)
print("enhanced paragraphs:", enhanced.shape)

# the whole document, untrained
p = model.probabilities(inst)
print("\nuntrained probabilities:", p)
