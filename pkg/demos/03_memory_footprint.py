#!/usr/bin/env python3
"""Activation memory per segment does not grow with document length.

Each segment runs on its own tape; the tape's peak live bytes is the
measured footprint. The analytic estimate is printed next to a windowed
attention model whose cost is linear in the document length.

Run:  python demos/03_memory_footprint.py
"""

import numpy as np

from cgsn import CGSN, MemoryModel, ModelConfig, SyntheticSpec, estimate_memory, generate_instances
from cgsn.encoder import build_vocab
from cgsn.pipeline import corpus_texts

cfg = ModelConfig(n_seg=4, n_global_sent=8, n_global_para=4, n_global_doc=2, local_hops=2,
                  d_w=32, d_h=32, heads=4, l_max=24)
docs = {n: generate_instances(SyntheticSpec(n_docs=1, paragraphs_per_doc=4 * n, seed=n))[0]
        for n in (4, 8, 16, 32)}
model = CGSN(cfg, build_vocab(corpus_texts(docs.values())))

print("segments  mean peak KiB/segment  max/min")
for n, inst in docs.items():
    _, peaks = model.forward_document(inst, track_memory=True)
    peaks = np.array(peaks[1:]) / 1024
    print(f"{n:8d}  {peaks.mean():21.1f}  {peaks.max() / peaks.min():7.3f}")

print("\n      L   cgsn estimate   led-style estimate")
for L in (1024, 4096, 16384):
    mm = MemoryModel(L=L, W=512, B=16, global_tokens=16)
    print(f"{L:7d}  {estimate_memory('cgsn', mm):14.0f}  {estimate_memory('led-style', mm):19.0f}")
