"""Parallel-corpus data model: filtering, factor annotation, batching."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .model import Batch, make_batch
from .text import BOS, EOS, SubwordVocabulary

MAX_TOKENS = 100
MAX_RATIO = 9.0


class RegistryError(KeyError):
    pass


class BatchConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


class Registry:
    """Fixed name <-> id map for languages or styles."""

    def __init__(self, names: Sequence[str]):
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate registry names: {names}")
        self.names = list(names)
        self._ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def id(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < len(self.names):
                raise RegistryError(f"id {name} outside registry {self.names}")
            return int(name)
        try:
            return self._ids[name]
        except KeyError:
            raise RegistryError(f"unknown name {name!r}; known: {self.names}") from None

    def name(self, i: int) -> str:
        return self.names[self.id(i)]


@dataclass
class ParallelPair:
    src: List[str]
    tgt: List[str]
    src_lang: int
    tgt_lang: int
    style: int


@dataclass
class FactoredExample:
    src_ids: List[int]
    factor_lang: List[int]
    factor_style: List[int]
    tgt_ids: List[int]

    @property
    def target_words(self) -> int:
        return len(self.tgt_ids) - 2


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reasons: Tuple[str, ...] = ()


def _has_alpha(tokens: Sequence[str]) -> bool:
    return any(ch.isalpha() for tok in tokens for ch in tok)


def filter_pair(src: Sequence[str], tgt: Sequence[str], max_tokens: int = MAX_TOKENS,
                max_ratio: float = MAX_RATIO) -> FilterResult:
    """Discard rules on tokenized (pre-subword) sides; every rule that fires is reported."""
    reasons = []
    if not src or not tgt:
        reasons.append("empty")
    if len(src) > max_tokens or len(tgt) > max_tokens:
        reasons.append("too_long")
    if not _has_alpha(src) or not _has_alpha(tgt):
        reasons.append("no_alpha")
    if src and tgt and max(len(src), len(tgt)) / min(len(src), len(tgt)) > max_ratio:
        reasons.append("ratio")
    return FilterResult(not reasons, tuple(reasons))


def enumerate_directions(langs: Sequence, styles: Sequence) -> List[Tuple[int, int, int]]:
    """Every ordered (src_lang, tgt_lang, style) training task; styles are never crossed."""
    if len(langs) < 2:
        return []
    return [(a, b, s) for s in range(len(styles)) for a, b in itertools.permutations(range(len(langs)), 2)]


def annotate_factors(src_ids: Sequence[int], tgt_ids: Optional[Sequence[int]], tgt_lang: int, style: int,
                     langs: Registry, styles: Registry) -> FactoredExample:
    """Replicate the (target language, target style) factors over every source piece.

    For training data ``style`` is the pair's own style; at inference any
    style may be passed, which is the zero-shot path.
    """
    lang_id, style_id = langs.id(tgt_lang), styles.id(style)
    n = len(src_ids)
    tgt = [BOS] + list(tgt_ids or []) + [EOS]
    return FactoredExample(list(src_ids), [lang_id] * n, [style_id] * n, tgt)


def annotate_pair(pair: ParallelPair, vocab: SubwordVocabulary, langs: Registry, styles: Registry,
                  style_override: Optional[int] = None) -> FactoredExample:
    style = pair.style if style_override is None else style_override
    return annotate_factors(vocab.encode(pair.src), vocab.encode(pair.tgt), pair.tgt_lang, style, langs, styles)


def build_batches(examples: Sequence[FactoredExample], max_words: int, seed: int = 0,
                  epoch: int = 0) -> List[List[int]]:
    """Group example indices into length-bucketed batches of at most ``max_words`` target words.

    Ties in length are broken by a seeded permutation, and the batch order is
    shuffled per epoch, so every epoch sees each example exactly once.
    """
    if not examples:
        return []
    words = np.array([e.target_words for e in examples])
    src_len = np.array([len(e.src_ids) for e in examples])
    if words.max() > max_words:
        raise BatchConfigError(f"example with {words.max()} target words exceeds max_words={max_words}")
    rng = np.random.default_rng([seed, epoch])
    tiebreak = rng.permutation(len(examples))
    order = np.lexsort((tiebreak, src_len, words))
    batches, cur, total = [], [], 0
    for i in order:
        w = int(words[i])
        if cur and total + w > max_words:
            batches.append(cur)
            cur, total = [], 0
        cur.append(int(i))
        total += w
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def iter_batches(examples: Sequence[FactoredExample], max_words: int, seed: int = 0,
                 epoch: int = 0) -> Iterator[Batch]:
    for ids in build_batches(examples, max_words, seed, epoch):
        yield make_batch([examples[i] for i in ids], ids)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def read_parallel(src_path, tgt_path) -> Iterator[Tuple[int, str, str]]:
    """Yield (line number, source line, target line) from line-aligned UTF-8 files."""
    with open(src_path, encoding="utf-8") as fs, open(tgt_path, encoding="utf-8") as ft:
        for lineno, (a, b) in enumerate(itertools.zip_longest(fs, ft), 1):
            if a is None or b is None:
                short = src_path if a is None else tgt_path
                raise DataFormatError(f"{short}:{lineno}: parallel files have different line counts")
            yield lineno, a.rstrip("\n"), b.rstrip("\n")


def write_shard(path, examples: Sequence[FactoredExample]) -> None:
    """TSV: src_piece_ids, lang factor, style factor, tgt_piece_ids (BOS/EOS stripped)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write("{}\t{}\t{}\t{}\n".format(
                " ".join(map(str, e.src_ids)), e.factor_lang[0] if e.factor_lang else "",
                e.factor_style[0] if e.factor_style else "", " ".join(map(str, e.tgt_ids[1:-1]))))


def read_shard(path) -> List[FactoredExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                src = [int(x) for x in parts[0].split()]
                lang, style = int(parts[1]), int(parts[2])
                tgt = [int(x) for x in parts[3].split()]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            out.append(FactoredExample(src, [lang] * len(src), [style] * len(src), [BOS] + tgt + [EOS]))
    return out
