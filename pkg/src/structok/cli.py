"""Command-line pipeline: synth | train-tokenizer | encode | pretrain | evaluate | report.

Every subcommand is deterministic given its flags. Machine output goes to
files or stdout as JSON; diagnostics go to stderr. Exit codes: 0 success,
1 usage error, 2 data error, 3 internal error.

Heavy imports happen inside the handlers so that --threads can pin the BLAS
thread pools before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


class _Parser(argparse.ArgumentParser):
    # usage errors must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo(payload: dict) -> None:
    print(json.dumps(payload, ensure_ascii=False, separators=(",", ":")))


def _flag_map(args: argparse.Namespace) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _cmd_synth(args) -> int:
    from .corpus import SynthConfig, generate_synthetic, save_corpus

    cfg = SynthConfig(
        n_patients=args.patients,
        n_codes=args.codes,
        n_conditions=args.conditions,
        group_size=args.group_size,
        cooccur_prob=args.cooccur_prob,
        chronic_prob=args.chronic_prob,
        noise_rate=args.noise_rate,
        visits_mean=args.visits_mean,
        text_template_vocab=args.text_vocab,
        seed=args.seed,
    )
    corpus, truth = generate_synthetic(cfg)
    save_corpus(corpus, args.out)
    if args.truth:
        with open(args.truth, "w", encoding="utf-8") as f:
            f.write(truth.to_json() + "\n")
    _echo({
        "command": "synth",
        "config": _flag_map(args),
        "patients": len(corpus.patients),
        "codes": len(corpus.code_universe),
    })
    return 0


def _cmd_train_tokenizer(args) -> int:
    from . import tokenizer
    from .corpus import load_corpus

    corpus = load_corpus(args.input, canonicalize=not args.no_canonicalize)
    cfg = tokenizer.TrainerConfig(
        target_vocab_size=args.vocab_size,
        min_pair_frequency=args.min_pair_freq,
        max_merges=args.max_merges,
        canonicalize_input=not args.no_canonicalize,
    )
    tok = tokenizer.train(corpus, cfg)
    tokenizer.save(tok, args.out)
    _echo({
        "command": "train-tokenizer",
        "config": _flag_map(args),
        "vocab_size": tok.vocab_size,
        "base_codes": len(tok.vocab.base_codes),
        "merges": len(tok.merges),
    })
    return 0


def _cmd_encode(args) -> int:
    from . import tokenizer
    from .corpus import load_corpus

    tok = tokenizer.load(args.tokenizer)
    corpus = load_corpus(args.input, canonicalize=True)
    n = 0
    with open(args.out, "w", encoding="utf-8") as f:
        for t in corpus.patients:
            ids = tokenizer.encode(tok, t, mode=args.mode)
            f.write(json.dumps(
                {"patient_id": t.patient_id, "ids": ids},
                ensure_ascii=False, separators=(",", ":"),
            ) + "\n")
            n += 1
    _echo({"command": "encode", "config": _flag_map(args), "sequences": n})
    return 0


def _read_token_file(path) -> list[list[int]]:
    from .errors import ParseError, SchemaError

    sequences = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: malformed token line: {e.msg}",
                                 line=line_no, offset=e.pos) from None
            if "ids" not in obj:
                raise SchemaError(f"{path}:{line_no}: missing field 'ids'")
            sequences.append([int(x) for x in obj["ids"]])
    return sequences


def _model_config(args, vocab_size: int):
    from .errors import ConfigError
    from .lm import ModelConfig

    overrides = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            overrides = json.load(f)
        if not isinstance(overrides, dict):
            raise ConfigError(f"{args.config}: model config must be a JSON object")
    if overrides.get("vocab_size", vocab_size) != vocab_size:
        raise ConfigError(
            f"model config vocab_size {overrides['vocab_size']} "
            f"does not match tokenizer vocabulary {vocab_size}"
        )
    overrides["vocab_size"] = vocab_size
    try:
        return ModelConfig(**overrides)
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from None


def _cmd_pretrain(args) -> int:
    from . import tokenizer
    from .lm import TrainConfig, save_checkpoint, train_lm

    tok = tokenizer.load(args.tokenizer)
    sequences = _read_token_file(args.tokens)
    mcfg = _model_config(args, tok.vocab_size)
    tcfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        warmup_steps=args.warmup,
        seed=args.seed,
    )
    params, report = train_lm(sequences, mcfg, tcfg)
    save_checkpoint(args.out, mcfg, params)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
        _echo({
            "command": "pretrain",
            "config": _flag_map(args),
            "final_loss": report.final_loss,
            "steps": len(report.losses),
        })
    else:
        print(report.to_json())
    return 0


def _cmd_evaluate(args) -> int:
    from . import tokenizer
    from .corpus import load_corpus
    from .downstream import HeadConfig, load_tasks, report_to_json, run_benchmark
    from .lm import load_checkpoint

    corpus = load_corpus(args.corpus, canonicalize=True)
    tok = tokenizer.load(args.tokenizer)
    element_tok = tokenizer.load(args.element_tokenizer) if args.element_tokenizer else None
    settings = tuple(s.strip() for s in args.settings.split(",") if s.strip())
    lm_cfg = lm_params = None
    if any(s in ("element", "bpe") for s in settings):
        if not args.checkpoint:
            from .errors import ConfigError

            raise ConfigError("--checkpoint is required for the element/bpe settings")
        lm_cfg, lm_params = load_checkpoint(args.checkpoint)
    tasks = load_tasks(args.tasks)
    head_cfg = HeadConfig(l2=args.head_l2, epochs=args.head_epochs,
                          lr=args.head_lr, seed=args.seed)
    report = run_benchmark(
        corpus, tok, lm_cfg, lm_params, tasks,
        settings=settings, seed=args.seed, head_cfg=head_cfg,
        element_tok=element_tok, train_frac=args.train_frac,
    )
    report["config"] = _flag_map(args)
    text = report_to_json(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        _echo({"command": "evaluate", "config": _flag_map(args), "out": args.out})
    else:
        print(text)
    return 0


def _cmd_report(args) -> int:
    from .downstream import format_report_table
    from .errors import SchemaError

    with open(args.input, encoding="utf-8") as f:
        report = json.load(f)
    if report.get("format") != "structok-report":
        raise SchemaError(f"{args.input}: not a structok report file")
    print(format_report_table(report))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="structok", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OMP thread pools (1 for bitwise determinism)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted structure")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--codes", type=int, default=500)
    p.add_argument("--conditions", type=int, default=40)
    p.add_argument("--group-size", type=int, default=3)
    p.add_argument("--cooccur-prob", type=float, default=0.9)
    p.add_argument("--chronic-prob", type=float, default=0.7)
    p.add_argument("--noise-rate", type=float, default=2.0)
    p.add_argument("--visits-mean", type=float, default=8.0)
    p.add_argument("--text-vocab", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-tokenizer", help="train visit-aware BPE merge rules")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--min-pair-freq", type=int, default=2)
    p.add_argument("--max-merges", type=int, default=None)
    p.add_argument("--no-canonicalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_tokenizer)

    p = sub.add_parser("encode", help="encode a corpus to token-id sequences")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--mode", choices=("bpe", "element"), default="bpe")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("pretrain", help="pre-train the causal LM on encoded sequences")
    p.add_argument("--tokens", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--config", default=None, help="JSON file with ModelConfig overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--report", default=None, help="write TrainReport JSON here instead of stdout")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("evaluate", help="fit probe heads and compute task metrics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--element-tokenizer", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tasks", required=True)
    p.add_argument("--settings", default="text,element,bpe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--head-l2", type=float, default=1e-4)
    p.add_argument("--head-epochs", type=int, default=300)
    p.add_argument("--head-lr", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="pretty-print an EvalReport as a text table")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.threads is not None:
        if args.threads < 1:
            print("structok: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import ConfigError, DataError

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"structok: config error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f"structok: data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort mapping to exit code 3
        print(f"structok: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
