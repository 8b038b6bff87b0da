"""``stylemux`` command line: gen-synth, preprocess, train, translate, evaluate, classify, demo."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

from . import pipeline as P
from .classifier import ClassifierConfigError
from .config import ConfigError, load_config
from .corpus import DataFormatError, RegistryError
from .model import FactoredTransformer, LengthError
from .synth import AlignmentError, SynthConfigError
from .text import VocabularyConfigError
from .trainer import NumericalError, TrainConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("stylemux")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this contract reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--seed", type=int, help="global seed (overrides seed=)")
    p.add_argument("--workers", type=int, help="bound on internal parallelism; 1 is bit-deterministic")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stylemux", description="Multilingual NMT with zero-shot style transfer.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="generate a synthetic multi-language, multi-style corpus")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="tokenize, filter, truecase, learn subwords, write shards")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the factored transformer")
    _common(p)
    p.add_argument("--prep", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("translate", help="translate a file into a target language and style")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--prep", required=True)
    p.add_argument("--src", required=True, help="raw input, one sentence per line")
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--tgt-style", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("evaluate", help="score the style-direction grid")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--prep", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classifiers", help="directory of cls.<style>.ckpt; trained when omitted")
    p.add_argument("--tgt-lang")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)

    p = sub.add_parser("classify", help="percentage of sentences judged to be in each style")
    _common(p)
    p.add_argument("--prep", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--classifiers", help="directory of cls.<style>.ckpt")
    p.add_argument("--corpus", help="train classifiers from this corpus when --classifiers is absent")
    p.add_argument("--tgt-lang", help="language of the input (default eval.target_lang)")
    p.add_argument("--out")

    p = sub.add_parser("demo", help="gen-synth -> preprocess -> train -> evaluate at toy scale")
    _common(p)
    p.add_argument("--out", required=True)
    return ap


def _overrides(args) -> Dict[str, str]:
    ov: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    if args.workers is not None:
        ov["workers"] = str(args.workers)
    for flag, key in (("tgt_lang", "eval.target_lang"), ("beam", "eval.beam"), ("max_len", "eval.max_len")):
        val = getattr(args, flag, None)
        if val is not None and args.command != "translate":
            ov[key] = str(val)
    return ov


def _load(args, preset: Optional[Dict[str, str]] = None):
    return load_config(args.config, _overrides(args), base=preset)


def _run(args) -> int:
    cmd = args.command
    cfg = _load(args, P.DEMO_PRESET if cmd == "demo" else None)
    if cmd == "gen-synth":
        P.gen_synth(cfg, args.out)
    elif cmd == "preprocess":
        P.preprocess(cfg, args.corpus, args.out)
    elif cmd == "train":
        _, res = P.train_model(cfg, args.prep, args.out)
        if res.best is not None:
            print(f"best checkpoint at step {res.best.step}: val_ppl {res.best.val_ppl:.4f}")
    elif cmd == "translate":
        if args.beam < 1:
            raise UsageError("--beam must be >= 1")
        prep = P.load_prepared(args.prep, shards=False)
        model = FactoredTransformer.load(args.model)
        lang, style = prep.langs.id(args.tgt_lang), prep.styles.id(args.tgt_style)
        lines = P.read_lines(args.src)
        outs = P.translate_tokens(model, prep.pipeline, lines, lang, style, args.beam, args.max_len)
        text = "".join(P.detok(o) + "\n" for o in outs)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text, encoding="utf-8")
            cfg.write(Path(args.out).parent)
        else:
            sys.stdout.write(text)
    elif cmd == "evaluate":
        reports = P.evaluate(cfg, args.corpus, args.prep, args.model, args.out, args.classifiers)
        for name, rep in reports.items():
            print(f"### {rep.metadata['direction']}")
            print(rep.render())
    elif cmd == "classify":
        prep = P.load_prepared(args.prep, shards=False)
        if args.classifiers:
            clfs = P.load_style_classifiers(args.classifiers, prep.styles.names)
        elif args.corpus:
            cls_dir = Path(args.out or ".") / "classifiers"
            clfs = P.train_style_classifiers(cfg, args.corpus, prep.pipeline, cfg.eval.target_lang, cls_dir,
                                             prep.styles.names)
        else:
            raise UsageError("classify needs --classifiers or --corpus")
        pct = P.classify_file(clfs, prep.styles.names, prep.pipeline, args.input, args.out)
        if args.out:
            cfg.write(args.out)
        for style, v in pct.items():
            print(f"{style}\t{v:.1f}%")
    elif cmd == "demo":
        reports = P.demo(cfg, args.out)
        for rep in reports.values():
            print(f"### {rep.metadata['direction']}")
            print(rep.render())
    return EXIT_OK


def _setup_logging() -> None:
    level = os.environ.get("STYLEMUX_LOG", "WARNING").upper()
    numeric = getattr(logging, level, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, UsageError, TrainConfigError, SynthConfigError, VocabularyConfigError,
            ClassifierConfigError, RegistryError) as exc:
        print(f"stylemux: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, AlignmentError, LengthError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"stylemux: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"stylemux: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"stylemux: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
