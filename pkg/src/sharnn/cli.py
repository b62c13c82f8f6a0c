"""Command-line entry point: ``sharnn <command> ...``.

Exit codes:
    0  success
    1  missing or unreadable files, bad checkpoint
    2  usage or configuration error
    3  training aborted on a non-finite loss or gradient
    4  checkpoint does not fit the data
    5  checkpoint already folded

Results go to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .data import SPLIT_NAMES, load_and_split, load_prepared
from .engine import bpc_to_word_ppl, evaluate_bpc, generate, train
from .errors import CheckpointError, ContractError, DataError, NonFiniteError
from .model import SHARNN, count_params, fold_overparam

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NONFINITE, EXIT_MISMATCH, EXIT_FOLDED = 0, 1, 2, 3, 4, 5


def _err(msg: str) -> None:
    print(f"sharnn: {msg}", file=sys.stderr)


def _default_seed() -> int:
    raw = os.environ.get("SHARNN_SEED")
    return int(raw) if raw else 0


def _fractions(text: str):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be numbers, got {text!r}")
    return parts


def cmd_prepare(args) -> int:
    fr = args.fractions
    if len(fr) != 3 or any(f < 0 for f in fr) or sum(fr) > 1 + 1e-9:
        _err(f"fractions must be three non-negative numbers summing to at most 1.0, got {fr}")
        return EXIT_USAGE
    try:
        # tiny inputs are allowed here; the library default rejects them
        corpus = load_and_split(args.input, fr, min_bytes=1)
    except OSError as e:
        _err(f"cannot read input {args.input}: {e.strerror or e}")
        return EXIT_IO
    except DataError as e:
        _err(str(e))
        return EXIT_IO
    out = Path(args.outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name in SPLIT_NAMES:
            (out / f"{name}.bin").write_bytes(corpus.split(name).astype("u1").tobytes())
    except OSError as e:
        _err(f"cannot write to {out}: {e}")
        return EXIT_IO
    print(" ".join(f"{n}={len(corpus.split(n))}" for n in SPLIT_NAMES))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        _err(f"cannot read config {args.config}: {e.strerror or e}")
        return EXIT_IO
    try:
        model_cfg, train_cfg = parse_config(text)
    except ConfigError as e:
        _err(str(e))
        return EXIT_USAGE
    if args.seed is not None:
        train_cfg.seed = args.seed
    elif os.environ.get("SHARNN_SEED"):
        train_cfg.seed = _default_seed()
    train_cfg.checkpoint_path = args.checkpoint
    try:
        corpus = load_prepared(args.data)
    except OSError as e:
        _err(f"cannot read prepared data in {args.data}: {e.strerror or e}")
        return EXIT_IO

    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.checkpoint)
        except (OSError, CheckpointError) as e:
            _err(f"cannot resume from {args.checkpoint}: {e}")
            return EXIT_IO
        if resume.model_config != model_cfg:
            _err("checkpoint model configuration differs from the config file")
            return EXIT_MISMATCH
        if int(resume.state.get("epoch", 0)) >= train_cfg.epochs:
            _err(f"nothing to do: {resume.state.get('epoch')} of {train_cfg.epochs} epochs already trained")
            return EXIT_OK
        model = resume.build_model()
    else:
        model = SHARNN(model_cfg, seed=train_cfg.seed)

    try:
        train(model, corpus, train_cfg, resume=resume, log=lambda line: print(line, flush=True))
    except NonFiniteError as e:
        _err(f"training aborted: {e}")
        return EXIT_NONFINITE
    except DataError as e:
        _err(str(e))
        return EXIT_IO
    return EXIT_OK


def _load(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        _err(f"cannot read checkpoint {path}: {e.strerror or e}")
    except CheckpointError as e:
        _err(f"bad checkpoint {path}: {e}")
    return None


def cmd_eval(args) -> int:
    ckpt = _load(args.checkpoint)
    if ckpt is None:
        return EXIT_IO
    try:
        data = load_prepared(args.data).split(args.split)
    except OSError as e:
        _err(f"cannot read prepared data in {args.data}: {e.strerror or e}")
        return EXIT_IO
    if len(data) and int(data.max()) >= ckpt.model_config.vocab_size:
        _err(f"data holds byte {int(data.max())} but the model vocabulary is {ckpt.model_config.vocab_size}")
        return EXIT_MISMATCH
    try:
        model = ckpt.build_model()
        report = evaluate_bpc(model, data, args.batch_size, args.bptt, args.split, uniform=args.uniform)
    except ContractError as e:
        _err(f"checkpoint does not match its configuration: {e}")
        return EXIT_MISMATCH
    except DataError as e:
        _err(str(e))
        return EXIT_IO
    print(f"bpc={report.bpc:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = _load(args.checkpoint)
    if ckpt is None:
        return EXIT_IO
    try:
        model = ckpt.build_model()
    except ContractError as e:
        _err(f"bad checkpoint {args.checkpoint}: {e}")
        return EXIT_IO
    seed = args.seed if args.seed is not None else _default_seed()
    prime = args.prime.encode("utf-8")
    try:
        out = generate(model, prime, args.length, args.temperature, seed)
    except ValueError as e:
        _err(str(e))
        return EXIT_USAGE
    sys.stdout.buffer.write(out)
    sys.stdout.flush()
    return EXIT_OK


def cmd_fold(args) -> int:
    ckpt = _load(getattr(args, "in"))
    if ckpt is None:
        return EXIT_IO
    if ckpt.folded:
        _err("checkpoint is already folded")
        return EXIT_FOLDED
    model = ckpt.build_model()
    before = count_params(model)
    fold_overparam(model, inplace=True)
    after = count_params(model)
    state = {k: v for k, v in ckpt.state.items() if k in ("epoch", "step")}
    try:
        save_checkpoint(model, ckpt.train_config, args.out, **state)
    except OSError as e:
        _err(f"cannot write {args.out}: {e}")
        return EXIT_IO
    print(f"params_before={before} params_after={after} removed={before - after}")
    return EXIT_OK


def cmd_ppl_convert(args) -> int:
    if args.chars < 1 or args.words < 1:
        _err("--chars and --words must be positive")
        return EXIT_USAGE
    ppl = bpc_to_word_ppl(args.bpc, args.chars, args.words)
    print(f"ppl={ppl:#.6g}")
    _err(
        "note: this conversion assumes entropy is spread equally across the characters of each word "
        "and ignores information revealed by teacher forcing"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharnn", description="Byte-level SHA-RNN language model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="split a raw byte file into train/valid/test")
    s.add_argument("--input", required=True)
    s.add_argument("--outdir", required=True)
    s.add_argument("--fractions", type=_fractions, default=(0.90, 0.05, 0.05))
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="report bits per character on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True, choices=SPLIT_NAMES)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--bptt", type=int, default=256)
    s.add_argument("--uniform", action="store_true", help="debug: replace logits with a uniform distribution")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("generate", help="sample bytes to stdout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prime", required=True)
    s.add_argument("--length", type=int, default=256)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("fold", help="freeze over-parameterized gates into static vectors")
    s.add_argument("--in", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fold)

    s = sub.add_parser("ppl-convert", help="convert bits per character to word perplexity")
    s.add_argument("--bpc", type=float, required=True)
    s.add_argument("--chars", type=int, required=True)
    s.add_argument("--words", type=int, required=True)
    s.set_defaults(func=cmd_ppl_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
