"""``cst`` command line: synth, score, precompute, train, pipeline, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including a training run aborted on a non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import (DEFAULT_MAX_LEN, DEFAULT_MIN_COUNT, Vocabulary, build_vocab, dataset_from_records,
                   encode_caption, generate_synthetic, load_dataset, read_records, save_dataset)
from .evaluate import evaluate
from .metrics import build_doc_freq, corpus_score
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, Trainer, TrainLog, precompute_rewards

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cst")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(args) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if args.json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        obj = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return obj


def _resolve_config(base: dict, overrides, scope: str, seed) -> TrainConfig:
    obj = dict(base)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not key=value")
        head, dot, rest = key.partition(".")
        if dot:
            if head != scope:
                continue
            key = rest
        obj[key] = _parse_value(value)
    if seed is not None:
        obj["seed"] = seed
    try:
        return TrainConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{scope} config: {exc}") from None


def _write_log(out: Path, tl: TrainLog) -> None:
    with open(out / "train_log.jsonl", "w") as fh:
        for e in tl.epochs:
            fh.write(json.dumps(e.record()) + "\n")
    with open(out / "timing.jsonl", "w") as fh:
        for e in tl.epochs:
            fh.write(json.dumps({"epoch": e.epoch, "seconds": e.seconds, "batch_seconds": e.batch_seconds}) + "\n")


def cmd_synth(args) -> None:
    ds = generate_synthetic(args.seed, args.items, args.vocab_size, args.captions_per_item, args.noise,
                            n_topics=args.topics, val_fraction=args.val_fraction, test_fraction=args.test_fraction)
    save_dataset(ds, args.out)


def cmd_score(args) -> None:
    records = read_records(args.dataset)
    candidates = json.loads(Path(args.candidates).read_text())
    if not isinstance(candidates, dict):
        raise UsageError("candidates file must hold a JSON object item_id -> caption")
    # every word of references and candidates gets an id, so nothing maps to <unk>
    corpus = [(r["id"], r["captions"]) for r in records] + [("", list(candidates.values()))]
    vocab = build_vocab(corpus, min_count=0)
    ds, _ = dataset_from_records(records, vocab, max_len=args.max_len)
    encoded = {k: encode_caption(v, vocab, args.max_len) for k, v in candidates.items()}
    result = corpus_score(encoded, ds, args.metric)
    _emit_json({"metric": args.metric, "corpus": result.value, "per_item": result.per_item}, args.out)


def cmd_precompute(args) -> None:
    ds, _ = load_dataset(args.dataset, "build", args.min_count, args.max_len)
    if ds.split == "mixed":
        ds = ds.subset("train")
    table = precompute_rewards(ds, args.metric, args.mode)
    table.save(args.out)


def _load_training_data(args):
    ds, vocab = load_dataset(args.dataset, "build", args.min_count, args.max_len)
    train = ds.subset("train") if ds.split == "mixed" else ds
    val = ds.subset("val") if "val" in ds.splits() else None
    return train, val, vocab


def _run_stage(cfg: TrainConfig, train, val, params=None):
    trainer = Trainer(cfg, train, "compute", val, params)
    return trainer, trainer.fit()


def cmd_train(args) -> None:
    cfg = _resolve_config(load_config(args.config), args.set, "train", args.seed)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    train, val, vocab = _load_training_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer, (params, tl) = _run_stage(cfg, train, val)
    if trainer.rewards is not None:
        trainer.rewards.save(out / "rewards.json")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.json", params, vocab.tokens)
    vocab.save(out / "vocab.json")
    _write_log(out, tl)


def cmd_pipeline(args) -> None:
    pre = _resolve_config(load_config(args.pretrain), args.set, "pretrain", args.seed)
    fine = _resolve_config(load_config(args.finetune), args.set, "finetune", args.seed)
    if pre.mode not in ("XE", "WXE") or fine.mode != "RL":
        raise UsageError("pipeline needs an XE/WXE pre-training config and an RL fine-tuning config")
    log.info("resolved pretrain config: %s", json.dumps(pre.to_dict(), sort_keys=True))
    log.info("resolved finetune config: %s", json.dumps(fine.to_dict(), sort_keys=True))
    train, val, vocab = _load_training_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pre_trainer, (pre_params, tl) = _run_stage(pre, train, val)
    save_checkpoint(out / "pretrain.json", pre_params, vocab.tokens)
    fine_trainer, (params, ft) = _run_stage(fine, train, val, pre_params)
    tl.extend(ft)
    table = fine_trainer.rewards or pre_trainer.rewards
    if table is not None:
        table.save(out / "rewards.json")
    (out / "config.json").write_text(
        json.dumps({"pretrain": pre.to_dict(), "finetune": fine.to_dict()}, indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.json", params, vocab.tokens)
    vocab.save(out / "vocab.json")
    _write_log(out, tl)


def cmd_eval(args) -> None:
    params, tokens = load_checkpoint(args.checkpoint)
    if tokens is None:
        raise UsageError("checkpoint carries no vocabulary")
    vocab = Vocabulary(tuple(tokens))
    ds, _ = load_dataset(args.dataset, vocab, max_len=args.max_len)
    split = args.split or ("test" if "test" in ds.splits() else "val" if "val" in ds.splits() else None)
    target = ds.subset(split) if split and ds.split == "mixed" else ds
    df = build_doc_freq(ds.subset("train").references()) if args.df == "train" else None
    report = evaluate(params, target, args.beam, args.max_len, df=df)
    _emit_json(report.to_json(), args.out)


def _emit_json(obj, out) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single source of randomness")
    common.add_argument("--json-logs", action="store_true", help="machine-readable logs on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")

    parser = _Parser(prog="cst", description="Train and evaluate caption decoders with consensus rewards")
    parser.add_argument("--version", action="version", version=f"cst {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic JSON-lines dataset")
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--captions-per-item", type=int, required=True)
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--topics", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, seed_required=True)

    p = sub.add_parser("score", parents=[common], help="score candidate captions against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", required=True, help="JSON object item_id -> caption")
    p.add_argument("--metric", choices=("cider", "bleu4", "rougeL"), default="cider")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("precompute", parents=[common], help="pre-compute ground-truth caption rewards")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=("cider", "bleu4", "rougeL"), default="cider")
    p.add_argument("--mode", choices=("leave_one_out", "include_self"), default="leave_one_out")
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    for name, func, helptext in (("train", cmd_train, "run one training stage"),
                                 ("pipeline", cmd_pipeline, "pre-train then RL fine-tune")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "train":
            p.add_argument("--config", required=True, help="TOML or JSON training config")
        else:
            p.add_argument("--pretrain", required=True, help="TOML or JSON pre-training config")
            p.add_argument("--finetune", required=True, help="TOML or JSON RL config")
        p.add_argument("--dataset", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
        p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="beam-decode and score a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    p.add_argument("--df", choices=("eval", "train"), default="eval",
                   help="reference corpus for CIDEr document frequencies")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args)
    if getattr(args, "seed_required", False) and args.seed is None:
        print("cst synth: error: --seed is required", file=sys.stderr)
        return 1
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as exc:
        print(f"cst {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
