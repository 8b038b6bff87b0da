"""Synthetic multilingual, multi-style parallel corpora with exact ground truth.

Sentences are sequences of abstract concepts. Every language is a bijective
relexification of the concepts plus a chunk-order permutation; styles change
only the surface form of a subset of concepts:

* synonym concepts get a style-specific word (like "ease" vs "alleviate");
* auxiliary concepts follow a pronoun host and, in style 0 of the contracting
  languages, are rendered as apostrophe clitics ("'ll") instead of full words.

Language 0 marks every style distinction. Other languages keep a random
subset of synonym distinctions (``source_marking``) and never contract, so
the style of a translation into language 0 is partly underdetermined by the
source text alone.

Training emission pairs languages within a single style only; the test grid
keeps all (language, style) realizations of each concept sequence so that
cross-style references exist.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .text import detokenize

CLITICS = ("'ll", "'s", "'re", "'ve", "'d", "'m", "n't")
_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"

Chunk = Tuple[int, ...]


class SynthConfigError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class SynthSpec:
    seed: int = 0
    num_langs: int = 3
    num_styles: int = 3
    num_concepts: int = 64
    synonym_fraction: float = 0.2
    num_pronouns: int = 6
    num_aux: int = 4
    contraction_rate: float = 0.35
    min_len: int = 4
    max_len: int = 9
    source_marking: float = 0.5
    contraction_langs: Tuple[int, ...] = (0,)

    def __post_init__(self):
        self.contraction_langs = tuple(self.contraction_langs)
        if self.num_langs < 1 or self.num_styles < 1:
            raise SynthConfigError("need at least one language and one style")
        if self.num_aux > len(CLITICS):
            raise SynthConfigError(f"at most {len(CLITICS)} auxiliary concepts (one per clitic)")
        if self.num_aux and self.num_pronouns < 1:
            raise SynthConfigError("auxiliary concepts need pronoun hosts")
        if not 1 <= self.min_len <= self.max_len:
            raise SynthConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.min_len < 3 and self.contraction_rate > 0:
            raise SynthConfigError("min_len must leave room for a pronoun+aux chunk and a synonym")
        if self.num_concepts < 1 or not 0.0 <= self.synonym_fraction <= 1.0:
            raise SynthConfigError("bad concept inventory")

    @property
    def lang_names(self) -> List[str]:
        return [f"l{i}" for i in range(self.num_langs)]

    @property
    def style_names(self) -> List[str]:
        return [f"s{i}" for i in range(self.num_styles)]

    @property
    def num_synonyms(self) -> int:
        if self.num_styles < 2:
            return 0
        return max(1, int(round(self.synonym_fraction * self.num_concepts)))

    # concept id layout: pronouns, auxiliaries, synonym concepts, plain content
    @property
    def pronouns(self) -> range:
        return range(0, self.num_pronouns)

    @property
    def auxes(self) -> range:
        return range(self.num_pronouns, self.num_pronouns + self.num_aux)

    @property
    def content(self) -> range:
        start = self.num_pronouns + self.num_aux
        return range(start, start + self.num_concepts)

    @property
    def synonyms(self) -> range:
        start = self.content.start
        return range(start, start + self.num_synonyms)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


class Lexicon:
    """Per language: concept -> tuple of per-style word forms."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 7919])
        used = set()
        self.forms: List[Dict[int, Tuple[str, ...]]] = []
        n = spec.num_styles
        for lang in range(spec.num_langs):
            cons = "".join(rng.permutation(list(_CONSONANTS))[:9])

            def word():
                while True:
                    k = int(rng.integers(2, 4))
                    w = "".join(cons[rng.integers(len(cons))] + _VOWELS[rng.integers(5)] for _ in range(k))
                    if w not in used:
                        used.add(w)
                        return w

            table: Dict[int, Tuple[str, ...]] = {}
            for c in spec.pronouns:
                table[c] = (word(),) * n
            for j, c in enumerate(spec.auxes):
                full = word()
                if lang in spec.contraction_langs:
                    table[c] = (CLITICS[j],) + (full,) * (n - 1)
                else:
                    table[c] = (full,) * n
            for c in spec.content:
                if c in spec.synonyms and (lang == 0 or rng.random() < spec.source_marking):
                    table[c] = tuple(word() for _ in range(n))
                else:
                    table[c] = (word(),) * n
            self.forms.append(table)

    def form(self, lang: int, concept: int, style: int) -> str:
        return self.forms[lang][concept][style]

    def concept_of(self, lang: int) -> Dict[str, int]:
        return {w: c for c, ws in self.forms[lang].items() for w in ws}

    def marked(self, lang: int, concept: int) -> bool:
        return len(set(self.forms[lang][concept])) > 1

    def synonym_table(self, lang: int = 0) -> Dict[str, int]:
        """Word -> synset id (the concept) for every style-variable concept of ``lang``."""
        return {w: c for c, ws in self.forms[lang].items() if len(set(ws)) > 1 for w in ws}


def permute_chunks(chunks: Sequence[Chunk], lang: int) -> List[Chunk]:
    """Language word-order rule applied to whole chunks (pronoun+aux stays host-first)."""
    chunks = list(chunks)
    rule = lang % 3
    if rule == 1:
        return chunks[::-1]
    if rule == 2:
        out = []
        for i in range(0, len(chunks) - 1, 2):
            out += [chunks[i + 1], chunks[i]]
        if len(chunks) % 2:
            out.append(chunks[-1])
        return out
    return chunks


@dataclass
class Realization:
    tokens: List[str]
    contraction_sites: List[Tuple[int, int]]  # (token position, concept)
    synonym_sites: List[Tuple[int, int]]

    @property
    def text(self) -> str:
        toks = list(self.tokens)
        toks[0] = toks[0][0].upper() + toks[0][1:]
        return detokenize(toks)


def realize(lex: Lexicon, chunks: Sequence[Chunk], lang: int, style: int) -> Realization:
    tokens, csites, ssites = [], [], []
    spec = lex.spec
    for chunk in permute_chunks(chunks, lang):
        for c in chunk:
            if c in spec.auxes:
                csites.append((len(tokens), c))
            elif c in spec.synonyms:
                ssites.append((len(tokens), c))
            tokens.append(lex.form(lang, c, style))
    tokens.append(".")
    return Realization(tokens, csites, ssites)


@dataclass
class SynthExample:
    chunks: List[Chunk]
    cells: Dict[Tuple[int, int], Realization] = field(default_factory=dict)

    @property
    def concept_ids(self) -> List[int]:
        return [c for ch in self.chunks for c in ch]

    @property
    def has_contraction(self) -> bool:
        return any(len(ch) == 2 for ch in self.chunks)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    lexicon: Lexicon
    # (src_lang, tgt_lang, style) -> list of (src Realization, tgt Realization)
    train: Dict[Tuple[int, int, int], List[Tuple[Realization, Realization]]]
    test: List[SynthExample]

    def test_cell(self, lang: int, style: int) -> List[Realization]:
        return [ex.cells[(lang, style)] for ex in self.test]


def _sample_chunks(spec: SynthSpec, rng: np.random.Generator) -> List[Chunk]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    contract = spec.num_aux > 0 and rng.random() < spec.contraction_rate
    n_content = length - (2 if contract else 0)
    content = list(spec.content)
    chosen = [content[i] for i in rng.integers(len(content), size=n_content)]
    syn = list(spec.synonyms)
    if syn and not any(c in spec.synonyms for c in chosen):
        chosen[int(rng.integers(n_content))] = syn[int(rng.integers(len(syn)))]
    chunks: List[Chunk] = [(c,) for c in chosen]
    if contract:
        pron = spec.pronouns[int(rng.integers(len(spec.pronouns)))]
        aux = spec.auxes[int(rng.integers(len(spec.auxes)))]
        chunks.insert(int(rng.integers(len(chunks) + 1)), (pron, aux))
    return chunks


def _capacity(spec: SynthSpec) -> int:
    c = spec.num_concepts
    return sum(c ** n for n in range(max(spec.min_len - 2, 1), spec.max_len + 1))


def _draw_unique(spec: SynthSpec, stream: int, count: int, exclude: set) -> List[List[Chunk]]:
    out, seen = [], set(exclude)
    for i in range(count):
        for attempt in itertools.count():
            if attempt > 1000:
                raise SynthConfigError("could not draw enough distinct sentences; enlarge the vocabulary")
            rng = np.random.default_rng([spec.seed, stream, i, attempt])
            chunks = _sample_chunks(spec, rng)
            key = tuple(chunks)
            if key not in seen:
                seen.add(key)
                out.append(chunks)
                break
    return out


def generate(spec: SynthSpec, num_sentences: int, num_test: int = 200) -> SynthCorpus:
    """Build the training pairs and the full test grid.

    ``num_sentences`` concept sequences are drawn per unordered language pair
    and style; each yields a training pair in both directions. With a single
    language the training sets hold identical source and target sides.
    """
    need = num_sentences * max(1, len(list(itertools.combinations(range(spec.num_langs), 2)))) + num_test
    if need > _capacity(spec):
        raise SynthConfigError(f"{need} distinct sentences requested but vocabulary allows ~{_capacity(spec)}")
    lex = Lexicon(spec)
    test_chunks = _draw_unique(spec, 1, num_test, set())
    test_keys = {tuple(c) for c in test_chunks}
    test = []
    for chunks in test_chunks:
        ex = SynthExample(chunks)
        for lang in range(spec.num_langs):
            for style in range(spec.num_styles):
                ex.cells[(lang, style)] = realize(lex, chunks, lang, style)
        test.append(ex)

    train: Dict[Tuple[int, int, int], List[Tuple[Realization, Realization]]] = {}
    pairs = list(itertools.combinations(range(spec.num_langs), 2)) or [(0, 0)]
    for pi, (la, lb) in enumerate(pairs):
        for style in range(spec.num_styles):
            stream = 1000 + pi * spec.num_styles + style
            drawn = _draw_unique(spec, stream, num_sentences, test_keys)
            fwd = [(realize(lex, ch, la, style), realize(lex, ch, lb, style)) for ch in drawn]
            train[(la, lb, style)] = fwd
            if la != lb:
                train[(lb, la, style)] = [(b, a) for a, b in fwd]
    return SynthCorpus(spec, lex, train, test)


# --------------------------------------------------------------------------
# file emission
# --------------------------------------------------------------------------


def write_corpus(corpus: SynthCorpus, outdir) -> Path:
    """Write paired text files, the test grid, a JSON-lines truth sidecar and the synonym table."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    spec = corpus.spec
    L, S = spec.lang_names, spec.style_names
    for (la, lb, style), pairs in sorted(corpus.train.items()):
        if la > lb:
            continue
        stem = out / f"train.{S[style]}.{L[la]}-{L[lb]}"
        Path(f"{stem}.{L[la]}").write_text("".join(a.text + "\n" for a, _ in pairs), encoding="utf-8")
        Path(f"{stem}.{L[lb]}").write_text("".join(b.text + "\n" for _, b in pairs), encoding="utf-8")
    for lang in range(spec.num_langs):
        for style in range(spec.num_styles):
            cell = corpus.test_cell(lang, style)
            (out / f"test.{S[style]}.{L[lang]}").write_text("".join(r.text + "\n" for r in cell), encoding="utf-8")
    with open(out / "truth.jsonl", "w", encoding="utf-8") as fh:
        for i, ex in enumerate(corpus.test):
            rec = {
                "id": i,
                "concept_ids": ex.concept_ids,
                "chunks": [list(c) for c in ex.chunks],
                "cells": {f"{L[l]}.{S[s]}": r.tokens for (l, s), r in sorted(ex.cells.items())},
                "planted": {
                    f"{L[l]}.{S[s]}": {"contraction": r.contraction_sites, "synonym": r.synonym_sites}
                    for (l, s), r in sorted(ex.cells.items())
                },
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    lines = []
    for lang in range(spec.num_langs):
        for w, c in sorted(corpus.lexicon.synonym_table(lang).items()):
            lines.append(f"{L[lang]}\t{w}\t{c}")
    (out / "synonyms.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "synth_spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    return out


def load_truth(outdir) -> Tuple[SynthSpec, Lexicon, List[SynthExample]]:
    """Rebuild the test grid from a directory written by :func:`write_corpus`."""
    out = Path(outdir)
    spec = SynthSpec.from_json((out / "synth_spec.json").read_text(encoding="utf-8"))
    lex = Lexicon(spec)
    examples = []
    with open(out / "truth.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            ex = SynthExample([tuple(c) for c in rec["chunks"]])
            for lang in range(spec.num_langs):
                for style in range(spec.num_styles):
                    ex.cells[(lang, style)] = realize(lex, ex.chunks, lang, style)
            examples.append(ex)
    return spec, lex, examples


def load_synonyms(path, lang: str = "l0") -> Dict[str, int]:
    table = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and parts[0] == lang:
            table[parts[1]] = int(parts[2])
    return table


# --------------------------------------------------------------------------
# transfer scoring against the grid
# --------------------------------------------------------------------------


@dataclass
class TransferScore:
    marker_rate: Optional[float]
    synonym_accuracy: Optional[float]
    marker_sites: int
    synonym_sites: int
    markers_converted: int
    synonyms_converted: int


def _converted(output: Sequence[str], wanted: Sequence[str]) -> int:
    have: Dict[str, int] = {}
    for tok in output:
        have[tok.lower()] = have.get(tok.lower(), 0) + 1
    need: Dict[str, int] = {}
    for w in wanted:
        need[w] = need.get(w, 0) + 1
    return sum(min(n, have.get(w, 0)) for w, n in need.items())


def score_style_transfer(outputs: Sequence[Sequence[str]], examples: Sequence[SynthExample], lang: int,
                         src_style: int, tgt_style: int) -> TransferScore:
    """Share of style sites rendered in the target style's form.

    A site is an occurrence of an auxiliary (marker) or synonym concept whose
    ``lang`` form differs between ``src_style`` and ``tgt_style``. A site counts
    as converted when the output contains the target form, with counts clipped
    per form so repeated words are not rewarded twice.
    """
    if len(outputs) != len(examples):
        raise AlignmentError(f"{len(outputs)} outputs vs {len(examples)} reference examples")
    m_sites = s_sites = m_conv = s_conv = 0
    for out, ex in zip(outputs, examples):
        src = ex.cells[(lang, src_style)]
        tgt = ex.cells[(lang, tgt_style)]
        for sites_attr, kind in (("contraction_sites", "m"), ("synonym_sites", "s")):
            wanted = [tgt.tokens[pos] for (pos, _), (spos, _) in zip(getattr(tgt, sites_attr), getattr(src, sites_attr))
                      if tgt.tokens[pos] != src.tokens[spos]]
            hit = _converted(out, wanted)
            if kind == "m":
                m_sites += len(wanted)
                m_conv += hit
            else:
                s_sites += len(wanted)
                s_conv += hit
    return TransferScore(
        marker_rate=m_conv / m_sites if m_sites else None,
        synonym_accuracy=s_conv / s_sites if s_sites else None,
        marker_sites=m_sites, synonym_sites=s_sites,
        markers_converted=m_conv, synonyms_converted=s_conv,
    )
