"""End-to-end orchestration shared by the command line and the acceptance suite.

Directory layout produced by the stages::

    corpus/   train.<style>.<la>-<lb>.<la|lb>, test.<style>.<lang>, truth.jsonl, synonyms.tsv
    prep/     vocab.txt, truecase.tsv, langs.txt, styles.txt, train.tsv, dev.tsv, filter_report.tsv
    model/    ckpt-<step>, train.log, best.ckpt
    eval/     <src>-<tgt>/<table>.tsv, report.txt

Every stage writes ``config.resolved`` into its output directory.
"""

from __future__ import annotations

import logging
import re
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classifier import StyleClassifier, classify_corpus, train_classifier, write_classification
from .config import RunConfig
from .corpus import (
    DataFormatError,
    FactoredExample,
    Registry,
    annotate_factors,
    filter_pair,
    read_parallel,
    read_shard,
    write_shard,
)
from .evaluation import EvalReport, bleu, count_contractions, meteor_lite
from .model import FactoredTransformer, ModelConfig
from .synth import generate, load_synonyms, load_truth, score_style_transfer, write_corpus
from .text import (
    SubwordVocabulary,
    TextPipeline,
    TruecaseModel,
    apply_truecase,
    detokenize,
    invert_truecase,
    learn_subwords,
    tokenize,
    train_truecaser,
)
from .trainer import TrainResult, train

log = logging.getLogger(__name__)

TRAIN_FILE_RE = re.compile(r"^train\.(?P<style>[^.]+)\.(?P<a>[^.\-]+)-(?P<b>[^.\-]+)\.(?P=a)$")

# Toy scale for the ``demo`` command; a config file or flags still override these.
DEMO_PRESET = {
    "gen.num_sentences": "1500",
    "gen.num_test": "60",
    "prep.vocab_size": "2000",
    "prep.dev_per_direction": "20",
    "model.layers": "2",
    "model.model_dim": "64",
    "model.heads": "4",
    "model.token_embed_dim": "64",
    "model.max_len": "64",
    "train.lr": "0.001",
    "train.checkpoint_interval": "100",
    "train.max_updates": "400",
    "cnn.updates": "200",
    "cnn.num_filters": "32",
    "cnn.embed_dim": "32",
    "eval.classifier_sentences": "1000",
    "eval.beam": "2",
    "eval.max_len": "40",
}


# --------------------------------------------------------------------------
# gen-synth
# --------------------------------------------------------------------------


def gen_synth(cfg: RunConfig, outdir) -> Path:
    corpus = generate(cfg.synth, cfg.gen.num_sentences, cfg.gen.num_test)
    out = write_corpus(corpus, outdir)
    cfg.write(out)
    log.info("wrote synthetic corpus to %s", out)
    return out


# --------------------------------------------------------------------------
# preprocess
# --------------------------------------------------------------------------


@dataclass
class TrainFile:
    style: str
    lang_a: str
    lang_b: str
    path_a: Path
    path_b: Path


def discover_train_files(corpus_dir) -> List[TrainFile]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise DataFormatError(f"{root}: corpus directory not found")
    found = []
    for p in sorted(root.iterdir()):
        m = TRAIN_FILE_RE.match(p.name)
        if not m:
            continue
        other = root / f"train.{m['style']}.{m['a']}-{m['b']}.{m['b']}"
        if not other.exists():
            raise DataFormatError(f"{p}: missing parallel side {other.name}")
        found.append(TrainFile(m["style"], m["a"], m["b"], p, other))
    if not found:
        raise DataFormatError(f"{root}: no train.<style>.<a>-<b>.<a> files")
    return found


@dataclass
class Prepared:
    pipeline: TextPipeline
    langs: Registry
    styles: Registry
    train: List[FactoredExample]
    dev: List[FactoredExample]


def _write_names(path: Path, names: Sequence[str]) -> None:
    path.write_text("".join(n + "\n" for n in names), encoding="utf-8")


def _read_names(path: Path) -> List[str]:
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line]


def preprocess(cfg: RunConfig, corpus_dir, outdir) -> Prepared:
    """Tokenize, filter, learn truecaser and subwords, then emit factored shards for both directions."""
    files = discover_train_files(corpus_dir)
    langs = Registry(sorted({f.lang_a for f in files} | {f.lang_b for f in files}))
    styles = Registry(sorted({f.style for f in files}))
    reasons: Counter = Counter()
    kept: List[Tuple[TrainFile, List[Tuple[List[str], List[str]]]]] = []
    total = 0
    for f in files:
        pairs = []
        for _, a, b in read_parallel(f.path_a, f.path_b):
            total += 1
            ta, tb = tokenize(a).tokens, tokenize(b).tokens
            res = filter_pair(ta, tb, cfg.prep.max_tokens, cfg.prep.max_ratio)
            if res.keep:
                pairs.append((ta, tb))
            for r in res.reasons:
                reasons[r] += 1
        kept.append((f, pairs))

    all_tokens = [side for _, pairs in kept for pair in pairs for side in pair]
    truecaser = train_truecaser(all_tokens)
    vocab = learn_subwords((apply_truecase(truecaser, t) for t in all_tokens), cfg.prep.vocab_size)
    pipe = TextPipeline(truecaser, vocab)

    rng = np.random.default_rng([cfg.seed, 3])
    train_ex: List[FactoredExample] = []
    dev_ex: List[FactoredExample] = []
    for f, pairs in kept:
        s = styles.id(f.style)
        dev_idx = set(rng.permutation(len(pairs))[:cfg.prep.dev_per_direction].tolist())
        for i, (ta, tb) in enumerate(pairs):
            ia = vocab.encode(apply_truecase(truecaser, ta))
            ib = vocab.encode(apply_truecase(truecaser, tb))
            dest = dev_ex if i in dev_idx else train_ex
            dest.append(annotate_factors(ia, ib, f.lang_b, s, langs, styles))
            dest.append(annotate_factors(ib, ia, f.lang_a, s, langs, styles))

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    truecaser.save(out / "truecase.tsv")
    _write_names(out / "langs.txt", langs.names)
    _write_names(out / "styles.txt", styles.names)
    write_shard(out / "train.tsv", train_ex)
    write_shard(out / "dev.tsv", dev_ex)
    with open(out / "filter_report.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"total\t{total}\n")
        fh.write(f"kept\t{sum(len(p) for _, p in kept)}\n")
        for r in ("empty", "too_long", "no_alpha", "ratio"):
            fh.write(f"{r}\t{reasons[r]}\n")
    cfg.write(out)
    log.info("preprocessed %d pairs -> %d train / %d dev examples, vocab %d",
             total, len(train_ex), len(dev_ex), len(vocab))
    return Prepared(pipe, langs, styles, train_ex, dev_ex)


def load_prepared(prep_dir, shards: bool = True) -> Prepared:
    d = Path(prep_dir)
    try:
        pipe = TextPipeline(TruecaseModel.load(d / "truecase.tsv"), SubwordVocabulary.load(d / "vocab.txt"))
        langs = Registry(_read_names(d / "langs.txt"))
        styles = Registry(_read_names(d / "styles.txt"))
    except FileNotFoundError as exc:
        raise DataFormatError(f"{prep_dir}: incomplete preprocessing output ({exc.filename})") from None
    tr = read_shard(d / "train.tsv") if shards else []
    dev = read_shard(d / "dev.tsv") if shards else []
    return Prepared(pipe, langs, styles, tr, dev)


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def model_config(cfg: RunConfig, prep: Prepared) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=len(prep.pipeline.vocab), num_langs=len(prep.langs), num_styles=len(prep.styles),
                       layers=m.layers, model_dim=m.model_dim, heads=m.heads, ffn_dim=m.ffn_dim,
                       token_embed_dim=m.token_embed_dim, factor_embed_dim=m.factor_embed_dim,
                       dropout_p=m.dropout_p, max_len=m.max_len)


def train_model(cfg: RunConfig, prep_dir, outdir) -> Tuple[FactoredTransformer, TrainResult]:
    prep = load_prepared(prep_dir)
    model = FactoredTransformer(model_config(cfg, prep), seed=cfg.seed)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    result = train(model, prep.train, prep.dev, cfg.train, out)
    model.save(out / "best.ckpt")
    return model, result


# --------------------------------------------------------------------------
# translate
# --------------------------------------------------------------------------


def translate_tokens(model: FactoredTransformer, pipe: TextPipeline, lines: Sequence[str], tgt_lang: int,
                     tgt_style: int, beam: int = 5, max_len: Optional[int] = None,
                     chunk: int = 256) -> List[List[str]]:
    """Translate raw lines; returns truecased output tokens per line."""
    out: List[List[str]] = []
    for i in range(0, len(lines), chunk):
        srcs = [pipe.encode(s) for s in lines[i:i + chunk]]
        for ids in model.translate(srcs, tgt_lang, tgt_style, beam=beam, max_len=max_len):
            out.append(pipe.decode_tokens(ids))
    return out


def detok(tokens: Sequence[str]) -> str:
    return detokenize(invert_truecase(list(tokens)))


def read_lines(path) -> List[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not UTF-8 ({exc.reason} at byte {exc.start})") from None


# --------------------------------------------------------------------------
# classifiers
# --------------------------------------------------------------------------


def classifier_corpus(cfg: RunConfig, corpus_dir, pipe: TextPipeline, lang: str) -> Dict[int, List[List[str]]]:
    """Target-language sides of the training files, grouped by style id and capped per style."""
    files = discover_train_files(corpus_dir)
    names = sorted({f.style for f in files})
    by_style: Dict[int, List[List[str]]] = defaultdict(list)
    for f in files:
        path = f.path_a if f.lang_a == lang else f.path_b if f.lang_b == lang else None
        if path is None:
            continue
        by_style[names.index(f.style)].extend(pipe.tokens(s) for s in read_lines(path))
    rng = np.random.default_rng([cfg.seed, 5])
    cap = cfg.eval.classifier_sentences
    for s, sents in by_style.items():
        if len(sents) > cap:
            keep = np.sort(rng.permutation(len(sents))[:cap])
            by_style[s] = [sents[i] for i in keep]
    return dict(by_style)


def train_style_classifiers(cfg: RunConfig, corpus_dir, pipe: TextPipeline, lang: str, outdir,
                            style_names: Sequence[str]) -> Dict[int, StyleClassifier]:
    data = classifier_corpus(cfg, corpus_dir, pipe, lang)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    classifiers = {}
    with open(out / "classifiers.tsv", "w", encoding="utf-8") as fh:
        for s in sorted(data):
            res = train_classifier(s, data, cfg.cnn)
            res.classifier.save(out / f"cls.{style_names[s]}.ckpt")
            fh.write(f"{style_names[s]}\t{res.val_accuracy:.4f}\t{res.val_size}\n")
            log.info("classifier %s: val accuracy %.3f", style_names[s], res.val_accuracy)
            classifiers[s] = res.classifier
    return classifiers


def load_style_classifiers(cls_dir, style_names: Sequence[str]) -> Dict[int, StyleClassifier]:
    d = Path(cls_dir)
    found = {}
    for i, name in enumerate(style_names):
        p = d / f"cls.{name}.ckpt"
        if p.exists():
            found[i] = StyleClassifier.load(p)
    if not found:
        raise DataFormatError(f"{cls_dir}: no cls.<style>.ckpt files")
    return found


def classify_file(classifiers: Dict[int, StyleClassifier], style_names: Sequence[str], pipe: TextPipeline,
                  input_path, outdir=None) -> Dict[str, float]:
    sents = [pipe.tokens(s) for s in read_lines(input_path)]
    if not sents:
        raise DataFormatError(f"{input_path}: empty input")
    pct = {}
    for s, clf in sorted(classifiers.items()):
        pct[style_names[s]] = classify_corpus(clf, sents)
        if outdir is not None:
            Path(outdir).mkdir(parents=True, exist_ok=True)
            write_classification(Path(outdir) / f"classified.{style_names[s]}.tsv", clf.predict_proba(sents))
    return pct


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _init_worker(model_path, prep_dir):
    _WORKER_STATE["model"] = FactoredTransformer.load(model_path)
    _WORKER_STATE["pipe"] = load_prepared(prep_dir, shards=False).pipeline


def _translate_job(job):
    lines, tgt_lang, tgt_style, beam, max_len = job
    return translate_tokens(_WORKER_STATE["model"], _WORKER_STATE["pipe"], lines, tgt_lang, tgt_style, beam, max_len)


def evaluate(cfg: RunConfig, corpus_dir, prep_dir, model_path, outdir, classifiers_dir=None) -> Dict[str, EvalReport]:
    """Translate the test grid from every source language into ``eval.target_lang`` in every style.

    BLEU and METEOR-lite are scored against references in the *source*
    style, so off-diagonal drops measure style change. When a synthetic
    ground-truth sidecar is present the transfer rates are also scored
    against the cross-style references.
    """
    corpus = Path(corpus_dir)
    prep = load_prepared(prep_dir, shards=False)
    pipe, langs, styles = prep.pipeline, prep.langs, prep.styles
    model = FactoredTransformer.load(model_path)
    tgt_name = cfg.eval.target_lang
    tgt = langs.id(tgt_name)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)

    if classifiers_dir is not None:
        classifiers = load_style_classifiers(classifiers_dir, styles.names)
    else:
        classifiers = train_style_classifiers(cfg, corpus, pipe, tgt_name, out / "classifiers", styles.names)

    syn_path = corpus / "synonyms.tsv"
    synonyms = load_synonyms(syn_path, tgt_name) if syn_path.exists() else {}
    truth = load_truth(corpus)[2] if (corpus / "truth.jsonl").exists() else None

    def test_lines(lang: str, style: str) -> List[str]:
        return read_lines(corpus / f"test.{style}.{lang}")

    sources = [l for l in langs.names if l != tgt_name]
    if cfg.eval.monolingual:
        sources.append(tgt_name)
    n = len(styles)
    jobs, keys = [], []
    for src_name in sources:
        for ss in range(n):
            lines = test_lines(src_name, styles.name(ss))
            for ts in range(n):
                jobs.append((lines, tgt, ts, cfg.eval.beam, cfg.eval.max_len))
                keys.append((src_name, ss, ts))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, mp_context=get_context("fork"), initializer=_init_worker,
                                 initargs=(str(model_path), str(prep_dir))) as pool:
            outputs = list(pool.map(_translate_job, jobs))
    else:
        outputs = [translate_tokens(model, pipe, *job) for job in jobs]

    reports: Dict[str, EvalReport] = {}
    refs = {s: [pipe.tokens(x) for x in test_lines(tgt_name, styles.name(s))] for s in range(n)}
    for (src_name, ss, ts), hyps in zip(keys, outputs):
        rep = reports.setdefault(src_name, EvalReport(list(styles.names), metadata={
            "direction": f"{src_name}->{tgt_name}", "beam": str(cfg.eval.beam)}))
        c = rep.cell(ss, ts)
        ref = refs[ss]
        c.bleu = bleu(hyps, ref)
        c.meteor = meteor_lite(hyps, ref, synonyms)
        c.contractions = count_contractions(hyps)
        c.ref_contractions = count_contractions(ref)
        if ts in classifiers:
            c.cls_ref_pct = classify_corpus(classifiers[ts], ref)
            c.cls_sys_pct = classify_corpus(classifiers[ts], hyps)
        if truth is not None:
            sc = score_style_transfer(hyps, truth, tgt, ss, ts)
            c.marker_rate, c.synonym_accuracy = sc.marker_rate, sc.synonym_accuracy
        stem = out / f"{src_name}-{tgt_name}"
        stem.mkdir(parents=True, exist_ok=True)
        (stem / f"hyp.{styles.name(ss)}-{styles.name(ts)}").write_text(
            "".join(detok(h) + "\n" for h in hyps), encoding="utf-8")
    for src_name, rep in reports.items():
        rep.write(out / f"{src_name}-{tgt_name}")
    return reports


# --------------------------------------------------------------------------
# demo
# --------------------------------------------------------------------------


def demo(cfg: RunConfig, outdir) -> Dict[str, EvalReport]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    gen_synth(cfg, out / "corpus")
    preprocess(cfg, out / "corpus", out / "prep")
    train_model(cfg, out / "prep", out / "model")
    return evaluate(cfg, out / "corpus", out / "prep", out / "model" / "best.ckpt", out / "eval")
