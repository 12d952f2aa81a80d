"""Command-line entry point: ``shared-ape <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import attention, evaluation
from .corpus import Corpus, Origin, load_parallel_files, load_split, oversample_and_merge
from .decoding import translate_corpus
from .model import ModelConfig, check_params, init_params
from .numerics import load_checkpoint, save_checkpoint
from .subword import BpeModel, Preprocessor, Vocabulary, apply_bpe, build_vocab, debpe, learn_bpe
from .training import TrainConfig, read_config_file, train, write_config_file

log = logging.getLogger("shared_ape")

MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig) if f.name not in ("src_vocab", "mt_vocab", "pe_vocab")}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "checkpoint_dir"}


class CliError(Exception):
    pass


def _read_token_lines(path) -> List[List[str]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def _write_lines(path: Optional[str], lines) -> None:
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- subcommands ---------------------------------------------------------------


def cmd_bpe_learn(args) -> None:
    lines: List[List[str]] = []
    for path in args.input:
        lines.extend(_read_token_lines(path))
    model = learn_bpe(lines, args.merges, min_frequency=args.min_frequency)
    model.save(args.output)
    log.info("learned %d merges", len(model))


def cmd_bpe_apply(args) -> None:
    if not args.reverse and not args.codes:
        raise CliError("bpe-apply needs --codes unless --reverse is given")
    source = sys.stdin.read() if args.input in (None, "-") else Path(args.input).read_text(encoding="utf-8")
    lines = source.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if args.reverse:
        out = [" ".join(debpe(line.split())) for line in lines]
    else:
        model = BpeModel.load(args.codes)
        cache: Dict[str, List[str]] = {}
        out = [" ".join(apply_bpe(model, line.split(), cache)) for line in lines]
    _write_lines(args.output, out)


def cmd_build_vocab(args) -> None:
    lines: List[List[str]] = []
    for path in args.input:
        lines.extend(_read_token_lines(path))
    vocab = build_vocab(lines, args.max_size)
    vocab.save(args.output)
    log.info("vocabulary of %d entries", len(vocab))


def _coerce(value: str, kind) -> object:
    kind = str(kind)
    if "Optional[float]" in kind:
        return None if value.lower() in ("none", "") else float(value)
    if "float" in kind:
        return float(value)
    if "int" in kind:
        return int(value)
    return value


def _effective_config(args) -> Dict[str, object]:
    merged: Dict[str, object] = {}
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in MODEL_KEYS and key not in TRAIN_KEYS:
                raise CliError(f"unknown key {key!r} in {args.config}")
            merged[key] = _coerce(value, MODEL_KEYS.get(key) or TRAIN_KEYS[key])
    for key in list(MODEL_KEYS) + list(TRAIN_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if args.seed is not None:
        merged["seed"] = args.seed
    return merged


def _model_manifest(out_dir: Path, config: ModelConfig, has_bpe: bool) -> dict:
    return {
        "model_config": config.to_dict(),
        "bpe": "codes.bpe" if has_bpe else None,
        "vocab": {side: {"file": f"vocab.{side}", "sha256": _file_digest(out_dir / f"vocab.{side}")}
                  for side in ("src", "mt", "pe")},
    }


def cmd_train(args) -> None:
    cfg = _effective_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    official = load_split(args.train, Origin.OFFICIAL)
    train_corpus = official
    if args.artificial:
        artificial = load_split(args.artificial, Origin.ARTIFICIAL)
        train_corpus = oversample_and_merge(official, artificial, args.oversample)
    elif args.oversample != 1:
        train_corpus = oversample_and_merge(official, Corpus((), "none"), args.oversample)
    valid = load_split(args.valid, Origin.OFFICIAL)

    bpe = BpeModel.load(args.codes) if args.codes else None
    if bpe is not None:
        shutil.copyfile(args.codes, out_dir / "codes.bpe")
    pre = Preprocessor({side: bpe for side in ("src", "mt", "pe")}, {})
    for side in ("src", "mt", "pe"):
        given = getattr(args, f"vocab_{side}")
        if given:
            vocab = Vocabulary.load(given)
        else:
            # vocabularies come from the official data only, like the merges
            vocab = build_vocab([pre.segment(side, t) for t in official.side(side)], args.max_vocab)
        vocab.save(out_dir / f"vocab.{side}")
        pre.vocabs[side] = vocab

    model_cfg = ModelConfig(**{k: v for k, v in cfg.items() if k in MODEL_KEYS},
                            src_vocab=len(pre.vocabs["src"]), mt_vocab=len(pre.vocabs["mt"]),
                            pe_vocab=len(pre.vocabs["pe"]))
    train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in TRAIN_KEYS},
                            checkpoint_dir=str(out_dir / "checkpoints"))
    write_config_file(out_dir / "effective.cfg", {**model_cfg.to_dict(), **{
        k: getattr(train_cfg, k) for k in TRAIN_KEYS}})

    dtype = np.float32 if args.float32 else np.float64
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=dtype)
    train_ids = [pre.triplet_ids(t) for t in train_corpus]
    valid_ids = [pre.triplet_ids(t) for t in valid]
    best, state = train(params, model_cfg, train_ids, valid_ids, train_cfg)
    save_checkpoint(out_dir / "model.ckpt", best)
    shutil.copyfile(out_dir / "checkpoints" / "train.log", out_dir / "train.log")
    (out_dir / "model.json").write_text(json.dumps(_model_manifest(out_dir, model_cfg, bpe is not None),
                                                   indent=2) + "\n", encoding="utf-8")
    log.info("best epoch %d, validation perplexity %.4f", state.best_epoch, state.best_ppl)


def load_model(model_dir) -> tuple:
    """(params, config, preprocessor) from a directory written by ``train``."""
    model_dir = Path(model_dir)
    manifest_path = model_dir / "model.json"
    if not manifest_path.exists():
        raise CliError(f"{model_dir} has no model.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    vocabs = {}
    for side, entry in manifest["vocab"].items():
        path = model_dir / entry["file"]
        if _file_digest(path) != entry["sha256"]:
            raise CliError(f"vocabulary {path} does not match the checkpoint (hash mismatch)")
        vocabs[side] = Vocabulary.load(path)
    config = ModelConfig(**manifest["model_config"])
    for side in ("src", "mt", "pe"):
        if len(vocabs[side]) != getattr(config, f"{side}_vocab"):
            raise CliError(f"{side} vocabulary size does not match the model config")
    bpe = BpeModel.load(model_dir / manifest["bpe"]) if manifest.get("bpe") else None
    params = load_checkpoint(model_dir / "model.ckpt")
    check_params(params, config)
    return params, config, Preprocessor({side: bpe for side in ("src", "mt", "pe")}, vocabs)


def cmd_translate(args) -> None:
    params, config, pre = load_model(args.model)
    src_lines, mt_lines = _read_token_lines(args.src), _read_token_lines(args.mt)
    if len(src_lines) != len(mt_lines):
        raise CliError(f"{args.src} has {len(src_lines)} lines but {args.mt} has {len(mt_lines)}")
    # pe is not needed for decoding; reuse mt as a placeholder so Triplet validation applies
    corpus = load_parallel_files(args.src, args.mt, args.mt)
    results = translate_corpus(params, config, corpus, pre, beam=args.beam, max_len=args.max_len,
                               threads=args.threads)
    _write_lines(args.output, [" ".join(r.tokens) for r in results])
    if args.attn_dir:
        attn_dir = Path(args.attn_dir)
        attn_dir.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.record is not None:
                attention.export_record(r.record, attn_dir / f"{r.index:06d}.attn")
    failures = [r for r in results if r.error]
    for r in failures:
        print(r.error, file=sys.stderr)
    if failures:
        raise CliError(f"{len(failures)} of {len(results)} sentences failed")


def cmd_evaluate(args) -> None:
    hyps, refs = _read_token_lines(args.hyp), _read_token_lines(args.ref)
    if args.metric in ("ter", "both"):
        print(f"TER\t{evaluation.ter(hyps, refs):.2f}")
    if args.metric in ("bleu", "both"):
        print(f"BLEU\t{evaluation.bleu(hyps, refs):.2f}")


def cmd_attn_stats(args) -> None:
    records = attention.load_records(args.dir)
    if not records:
        raise CliError(f"no .attn files in {args.dir}")
    summary = attention.focus_statistics(records, args.threshold)
    print(f"src\t{summary.src_pct:.2f}")
    print(f"mt\t{summary.mt_pct:.2f}")
    print(f"both\t{summary.both_pct:.2f}")
    print(f"steps\t{summary.total}")


def cmd_attn_plot(args) -> None:
    attention.render_heatmap(attention.import_record(args.record), args.out)


# -- argument parsing ----------------------------------------------------------


def _existing_file(value: str) -> str:
    if value != "-" and not Path(value).is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return value


def _existing_prefix(value: str) -> str:
    for side in ("src", "mt", "pe"):
        if not Path(f"{value}.{side}").is_file():
            raise argparse.ArgumentTypeError(f"no such file: {value}.{side}")
    return value


def _threshold(value: str) -> float:
    t = float(value)
    if not 0.5 < t < 1.0:
        raise argparse.ArgumentTypeError("threshold must lie strictly between 0.5 and 1")
    return t


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    common.add_argument("--config", type=_existing_file, default=None, help="key=value configuration file")
    common.add_argument("--threads", type=int, default=1, help="worker threads for decoding")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shared-ape", description="Dual-encoder shared-attention APE toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe-learn", parents=[common], help="learn BPE merges")
    p.add_argument("--input", nargs="+", required=True, type=_existing_file)
    p.add_argument("--merges", type=int, default=30000)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", parents=[common], help="segment text with BPE merges (or undo with --reverse)")
    p.add_argument("--codes", type=_existing_file)
    p.add_argument("--input", type=_existing_file, default="-")
    p.add_argument("--output", default="-")
    p.add_argument("--reverse", action="store_true", help="join subword units back into words")
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("build-vocab", parents=[common], help="build a frequency-ranked vocabulary")
    p.add_argument("--input", nargs="+", required=True, type=_existing_file)
    p.add_argument("--max-size", type=int, default=50000)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train", required=True, type=_existing_prefix, help="prefix of official .src/.mt/.pe")
    p.add_argument("--valid", required=True, type=_existing_prefix)
    p.add_argument("--artificial", type=_existing_prefix)
    p.add_argument("--oversample", type=int, default=1)
    p.add_argument("--codes", type=_existing_file, help="BPE merges shared by all three sides")
    for side in ("src", "mt", "pe"):
        p.add_argument(f"--vocab-{side}", type=_existing_file)
    p.add_argument("--max-vocab", type=int, default=50000)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--float32", action="store_true")
    for key in ("word_dim", "enc_hidden", "dec_hidden", "enc_layers", "dec_layers", "epochs", "batch_size"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    for key in ("dropout", "lr", "lr_decay", "clip_norm"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    p.add_argument("--variant", choices=["shared", "projected"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="post-edit src/mt with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--src", required=True, type=_existing_file)
    p.add_argument("--mt", required=True, type=_existing_file)
    p.add_argument("--output", default="-")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--attn-dir")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", parents=[common], help="corpus TER/BLEU")
    p.add_argument("--hyp", required=True, type=_existing_file)
    p.add_argument("--ref", required=True, type=_existing_file)
    p.add_argument("--metric", choices=["ter", "bleu", "both"], default="both")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attn-stats", parents=[common], help="src/mt/both focus percentages")
    p.add_argument("--dir", required=True)
    p.add_argument("--threshold", type=_threshold, default=0.6)
    p.set_defaults(func=cmd_attn_stats)

    p = sub.add_parser("attn-plot", parents=[common], help="render an attention record as SVG or PGM")
    p.add_argument("--record", required=True, type=_existing_file)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"shared-ape {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
