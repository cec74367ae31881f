"""Command line entry point.

Subcommands: generate / train / eval / infer / gradcheck. Flags override
values from the optional ``--config`` JSON file. Errors exit nonzero with a
machine-readable JSON object on stderr. ``PCREASON_LOG`` controls log
verbosity only; it never changes behavior.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autodiff import Rng
from .config import ConfigError, RunConfig
from .pipeline import (
    EVAL_MODES,
    Model,
    PipelineError,
    assertion_probe,
    evaluate,
    generate_corpus,
    gradcheck_report,
    load_corpus,
    train_model,
)
from . import reasoner

log = logging.getLogger("pcreason")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "objects", None) is not None:
        cfg.objects = args.objects
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg.validate()


def _corpus_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out else cfg.out_dir)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    summary = generate_corpus(cfg, cfg.out_dir)
    print(json.dumps({"out": cfg.out_dir, **summary}, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus_dir = _corpus_dir(args, cfg)
    corpus = load_corpus(corpus_dir)
    train_mode = "direct" if args.mode == "direct" else "cot"
    if args.stage == 2 and args.checkpoint:
        model = Model.load(args.checkpoint, corpus.vocab)
        model.cfg = cfg
        log.info("resumed stage-1 checkpoint %s", args.checkpoint)
    else:
        model = Model(cfg, corpus.vocab, Rng(cfg.seed))
    steps = cfg.stage1_steps if args.stage == 1 else cfg.stage2_steps
    log_path = corpus_dir / f"train-{train_mode}-stage{args.stage}.jsonl"
    train_model(
        model, corpus, steps=steps, stage=args.stage, seed=cfg.seed,
        train_mode=train_mode, log_path=log_path,
    )
    suffix = "direct" if train_mode == "direct" else f"stage{args.stage}"
    ckpt = corpus_dir / f"model-{suffix}.ckpt"
    model.save(ckpt)
    from .report import save_training_figure

    fig = save_training_figure(log_path, corpus_dir / f"train-{train_mode}-stage{args.stage}.png")
    print(json.dumps({
        "checkpoint": str(ckpt), "steps": steps, "stage": args.stage,
        "mode": train_mode, "log": str(log_path), "figure": fig,
    }, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    corpus_dir = _corpus_dir(args, cfg)
    corpus = load_corpus(corpus_dir)
    if not args.checkpoint:
        raise PipelineError("eval requires --checkpoint")
    model = Model.load(args.checkpoint, corpus.vocab)
    report = evaluate(model, corpus, split=args.split, mode=args.mode)
    from .report import save_eval_outputs

    paths = save_eval_outputs(
        report, corpus_dir / "reports", f"eval-{args.mode}-{args.split}"
    )
    print(report.to_table())
    print(json.dumps(paths, indent=2))
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    corpus_dir = _corpus_dir(args, cfg)
    corpus = load_corpus(corpus_dir)
    if not args.checkpoint:
        raise PipelineError("infer requires --checkpoint")
    model = Model.load(args.checkpoint, corpus.vocab)
    records = corpus.records_for(args.split)
    if args.object:
        records = [r for r in records if r.object_id == args.object]
        if not records:
            raise PipelineError(
                f"object {args.object!r} not found in split {args.split!r}"
            )
    record = records[0]
    cloud = corpus.load_cloud(record)
    views = corpus.load_views(record)
    manifold = model.manifold(cloud, views, model.vocab.tokenize(record.question))
    if args.mode == "explicit":
        trace = reasoner.decode_look_think_answer(
            manifold, model.params, model.lm_cfg, model.cfg.max_decode_len
        )
        rationale = model.vocab.detokenize(trace.rationale_ids)
        answer = model.vocab.detokenize(trace.answer_ids)
        complete = trace.complete
    else:
        answer_ids, _ = reasoner.decode_answer_direct(
            manifold, model.params, model.lm_cfg
        )
        answer = model.vocab.detokenize(answer_ids)
        rationale = assertion_probe(model, manifold)
        complete = True
    print(json.dumps({
        "object_id": record.object_id,
        "question": record.question,
        "rationale": rationale,
        "answer": answer,
        "gold_answer": record.answer,
        "complete": complete,
        "mode": args.mode,
    }, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(n_seeds=args.seeds)
    summary = {
        "seeds": args.seeds,
        "max_rel_err": report["max_rel_err"],
        "tol": report["tol"],
        "passed": report["passed"],
    }
    print(json.dumps(summary, indent=2))
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcreason",
        description="Point-cloud rationale-then-answer reasoning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_default="explicit"):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="corpus/run directory")
        p.add_argument(
            "--mode", choices=EVAL_MODES, default=mode_default,
        )
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument(
            "--split", choices=("train", "val", "test"), default="test"
        )

    p = sub.add_parser("generate", help="build a procedural corpus")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="decode one sample")
    common(p)
    p.add_argument("--object", type=str, default=None, help="object id to pick")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PCREASON_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PipelineError, FileNotFoundError, ValueError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
