"""Command-line entry point: ``topicmatch <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

from . import pipeline as P
from .config import ConfigError, load_config
from .retrieval import StaleIndexError

log = logging.getLogger("topicmatch")


def _threads():
    raw = os.environ.get("TOPICMATCH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TOPICMATCH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("TOPICMATCH_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_synth(cfg, args):
    stats = P.run_synth(cfg, args.out)
    print(json.dumps(stats, sort_keys=True))


def cmd_vocab(cfg, args):
    vocab = P.run_vocab(cfg, args.out)
    print(json.dumps({"vocab_size": vocab.size}))


def cmd_train(cfg, args):
    state, ckpt = P.run_train(cfg, args.mode, args.out, args.resume)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"checkpoint": str(ckpt), "epochs": state.epoch, "steps": state.adam.t,
                      "final": last}, sort_keys=True))


def cmd_index(cfg, args):
    index = P.run_index(cfg, args.checkpoint, args.out)
    print(json.dumps({"comments": len(index), "K": index.K,
                      "model_fingerprint": index.model_fingerprint}))


def cmd_retrieve(cfg, args):
    ds = P.Dataset.load(cfg, paired_required=False)
    vocab = P.load_vocab(cfg)
    sc = P.Scorers(cfg, ds, vocab, args.checkpoint, args.index)
    queries = args.article or [a.id for a in ds.test_articles]
    for q in queries:
        if q not in ds.by_id:
            raise ConfigError(f"unknown article id {q!r}")
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    try:
        for q in queries:
            for r in sc.retrieve(args.scorer, q, args.k):
                out.write(json.dumps({"query_id": q, "rank": r.rank, "comment_id": r.id,
                                      "score": r.score}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_eval(cfg, args):
    scorers = args.scorer or None
    report = P.run_eval(cfg, scorers, args.checkpoint, args.index, args.out)
    print(render_report(report))


def render_report(report: dict) -> str:
    cols = ["recall@1", "recall@5", "recall@10", "mr", "mrr", "bleu", "rouge_l", "cider"]
    lines = ["| model | " + " | ".join(cols) + " | top-1 types |",
             "|---" * (len(cols) + 2) + "|"]
    for rec in report["records"]:
        hist = ", ".join(f"{k}:{v}" for k, v in rec["error_histogram"].items())
        vals = " | ".join(f"{rec[c]:.4f}" for c in cols)
        lines.append(f"| {rec['model_name']} | {vals} | {hist} |")
    return "\n".join(lines)


def cmd_report(cfg, args):
    path = args.out or cfg.paths.out(P.REPORT)
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError:
        raise ConfigError(f"missing report {path}; run `eval` first") from None
    print(render_report(report))


COMMANDS = {
    "synth": cmd_synth, "vocab": cmd_vocab, "train": cmd_train, "index": cmd_index,
    "retrieve": cmd_retrieve, "eval": cmd_eval, "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="topicmatch", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output path of the command's main artifact")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("vocab", parents=[common], help="build the pruned vocabulary")
    p = sub.add_parser("train", parents=[common], help="train the topic model")
    p.add_argument("--mode", choices=["unsupervised", "joint"], default="unsupervised")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--lr", type=float, help="override train.lr")
    helps = {"index": "embed the comment pool with a checkpoint",
             "retrieve": "print the top-k comments for articles",
             "eval": "score the test articles against their candidate sets"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint path (default: <out_dir>/model.ckpt)")
        if name != "index":
            p.add_argument("--index", help="index path (default: <out_dir>/index.bin)")
    p = sub.choices["retrieve"]
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--scorer", choices=["nvtm", "tfidf"], default="nvtm")
    p.add_argument("--article", action="append", help="article id (repeatable; default: test set)")
    sub.choices["eval"].add_argument("--scorer", action="append", choices=["nvtm", "tfidf"],
                                     help="scorer to evaluate (repeatable; default: config)")
    sub.add_parser("report", parents=[common], help="print a saved evaluation report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "train":
            if args.epochs is not None:
                cfg.train.epochs = args.epochs
            if args.lr is not None:
                cfg.train.lr = args.lr
            cfg.validate()
        with _threads():
            COMMANDS[args.command](cfg, args)
    except StaleIndexError:
        print("error: stale index", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
