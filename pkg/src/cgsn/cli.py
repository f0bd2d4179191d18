"""Command-line entry points: train, select, eval, estimate-mem, gen-corpus, ingest-qasper."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evalkit import (SyntheticSpec, evaluate, generate_corpus, ingest_qasper, read_predictions,
                      write_predictions)
from .pipeline import (Checkpoint, MemoryModel, ModelConfig, TrainingDiverged, estimate_memory,
                       load_dataset, parse_config, select_evidence, train)

log = logging.getLogger("cgsn")


def _cmd_train(args) -> int:
    base = ModelConfig()
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8"), base) if args.config else base
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = load_dataset(args.data)

    def report(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.4f", step, loss)

    ckpt = train(data, cfg, max_steps=args.max_steps, on_step=report)
    ckpt.save(args.out)
    print(json.dumps({"out": str(args.out), **ckpt.metadata}))
    return 0


def _cmd_select(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.model()
    tau = ckpt.config.threshold if args.threshold is None else args.threshold
    if not 0.0 < tau < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    rows = []
    for inst in load_dataset(args.data):
        p = model.probabilities(inst)
        rows.append((inst.id, select_evidence(p, tau), p))
    write_predictions(rows, args.out)
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(read_predictions(args.pred), load_dataset(args.gold))
    print(json.dumps(report.to_json(), indent=2))
    return 0


def _cmd_estimate(args) -> int:
    mm = MemoryModel(L=args.L, W=args.W, B=args.B, global_tokens=args.global_tokens,
                     m_global=args.m_global)
    total, parts = estimate_memory(args.mode, mm, breakdown=True)
    print(json.dumps({"mode": args.mode, "total": total, "parts": parts}))
    return 0


def _cmd_gen(args) -> int:
    spec = SyntheticSpec(n_docs=args.n_docs, paragraphs_per_doc=args.paragraphs, n_seg=args.n_seg,
                         cross_segment=args.mode == "cross", duplicate_rate=args.duplicate_rate,
                         n_keys=args.n_keys, n_decoys=args.n_decoys, seed=args.seed)
    generate_corpus(spec, args.out)
    return 0


def _cmd_qasper(args) -> int:
    _, stats = ingest_qasper(args.input, args.out)
    print(json.dumps(stats))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgsn", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a selector and write a checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("select", help="predict evidence indices and probabilities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("eval", help="score predictions against a gold dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("estimate-mem", help="relative activation cost of one forward pass")
    p.add_argument("--mode", choices=("cgsn", "led-style"), required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--W", type=int, required=True)
    p.add_argument("--B", type=int, default=16)
    p.add_argument("--global-tokens", type=int, default=0)
    p.add_argument("--m-global", type=float, default=0.0)
    p.set_defaults(fn=_cmd_estimate)

    p = sub.add_parser("gen-corpus", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("cross", "same"), default="cross")
    p.add_argument("--n-docs", type=int, default=100)
    p.add_argument("--paragraphs", type=int, default=12)
    p.add_argument("--n-seg", type=int, default=4)
    p.add_argument("--duplicate-rate", type=float, default=0.0)
    p.add_argument("--n-keys", type=int, default=4)
    p.add_argument("--n-decoys", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("ingest-qasper", help="convert a Qasper JSON file into a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_qasper)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
