"""Segment-by-segment evidence selection over long documents with a persistent global graph."""

from .evalkit import (MetricReport, SyntheticSpec, evaluate, evidence_f1, generate_corpus,
                      generate_instances, ingest_qasper, lexical_baseline, rep_inter)
from .pipeline import (CGSN, Checkpoint, Document, Instance, MemoryModel, ModelConfig,
                       estimate_memory, load_dataset, parse_config, segment_document,
                       select_evidence, train, tune_threshold, write_dataset)

__version__ = "0.1.0"
