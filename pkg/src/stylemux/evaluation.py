"""Corpus metrics (BLEU, METEOR-lite, contraction census) and style-direction reports."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

Sentence = Union[str, Sequence[str]]

CONTRACTION_RULES = (
    re.compile(r"^['’]ll$", re.IGNORECASE),
    re.compile(r"^['’]s$", re.IGNORECASE),
    re.compile(r"^['’]re$", re.IGNORECASE),
    re.compile(r"^['’]ve$", re.IGNORECASE),
    re.compile(r"^['’]d$", re.IGNORECASE),
    re.compile(r"^['’]m$", re.IGNORECASE),
    re.compile(r"^(?:n['’]t|['’]t)$", re.IGNORECASE),
)


def _toks(s: Sentence) -> List[str]:
    return s.split() if isinstance(s, str) else list(s)


def _lower(s: Sentence) -> List[str]:
    return [t.lower() for t in _toks(s)]


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------


@dataclass
class BleuStats:
    score: float
    precisions: List[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu_stats(hypotheses: Sequence[Sentence], references: Sequence[Sentence], max_n: int = 4) -> BleuStats:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _lower(h), _lower(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        return BleuStats(0.0, precisions, 0.0, 0, ref_len)
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    if min(precisions) == 0.0:
        return BleuStats(0.0, precisions, bp, hyp_len, ref_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuStats(score, precisions, bp, hyp_len, ref_len)


def bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence], max_n: int = 4) -> float:
    """Unsmoothed, lowercased corpus BLEU in [0, 1]."""
    return bleu_stats(hypotheses, references, max_n).score


# --------------------------------------------------------------------------
# METEOR-lite
# --------------------------------------------------------------------------

_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    w = word.lower()
    for suf in _SUFFIXES:
        if w.endswith(suf) and len(w) - len(suf) >= 3:
            return w[: -len(suf)]
    return w


@dataclass
class MeteorDetail:
    matches: int
    chunks: int
    precision: float
    recall: float
    fmean: float
    penalty: float
    score: float
    alignment: List[Tuple[int, int]] = field(default_factory=list)


def _align(hyp: List[str], ref: List[str], synonyms: Mapping[str, object]) -> List[Tuple[int, int]]:
    stages = (
        lambda w: w,
        stem,
        lambda w: synonyms.get(w),
    )
    h_to_r: Dict[int, int] = {}
    used = set()
    for key in stages:
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(hyp):
            if i in h_to_r:
                continue
            k = key(w)
            if k is None:
                continue
            cands = [j for j, rk in enumerate(ref_keys) if j not in used and rk == k]
            if not cands:
                continue
            prev = h_to_r.get(i - 1)
            j = prev + 1 if prev is not None and prev + 1 in cands else cands[0]
            h_to_r[i] = j
            used.add(j)
    return sorted(h_to_r.items())


def count_chunks(alignment: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_sentence(hyp: Sentence, ref: Sentence, synonyms: Optional[Mapping[str, object]] = None,
                    alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> MeteorDetail:
    """Staged unigram alignment (exact, suffix-stripped stem, synonym set) scored METEOR-style."""
    h, r = _lower(hyp), _lower(ref)
    syn = {k.lower(): v for k, v in (synonyms or {}).items()}
    alignment = _align(h, r, syn)
    m = len(alignment)
    if m == 0:
        return MeteorDetail(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, [])
    chunks = count_chunks(alignment)
    p, rc = m / len(h), m / len(r)
    fmean = p * rc / (alpha * p + (1.0 - alpha) * rc)
    penalty = gamma * (chunks / m) ** beta
    return MeteorDetail(m, chunks, p, rc, fmean, penalty, fmean * (1.0 - penalty), alignment)


def meteor_lite(hypotheses: Sequence[Sentence], references: Sequence[Sentence],
                synonyms: Optional[Mapping[str, object]] = None, **params) -> float:
    """Mean of per-sentence METEOR-lite scores."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        return 0.0
    return sum(meteor_sentence(h, r, synonyms, **params).score for h, r in zip(hypotheses, references)) / len(hypotheses)


# --------------------------------------------------------------------------
# contractions and relative changes
# --------------------------------------------------------------------------


def is_contraction(token: str) -> bool:
    return any(rule.match(token) for rule in CONTRACTION_RULES)


def count_contractions(corpus: Sequence[Sentence]) -> int:
    return sum(1 for sent in corpus for tok in _toks(sent) if is_contraction(tok))


def relative_style_change(before_pct: float, after_pct: float) -> Optional[float]:
    """Percent increase of the target-style share; None (n/a) when the baseline is zero."""
    if before_pct == 0:
        return None
    return 100.0 * (after_pct - before_pct) / before_pct


def relative_metric_decrease(same_style_score: float, cross_style_score: float) -> Optional[float]:
    if same_style_score == 0:
        return None
    return 100.0 * (same_style_score - cross_style_score) / same_style_score


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class CellMetrics:
    bleu: Optional[float] = None
    meteor: Optional[float] = None
    contractions: Optional[int] = None
    ref_contractions: Optional[int] = None
    cls_ref_pct: Optional[float] = None
    cls_sys_pct: Optional[float] = None
    marker_rate: Optional[float] = None
    synonym_accuracy: Optional[float] = None


@dataclass
class EvalReport:
    """Style-direction matrix: rows are source styles, columns target styles."""

    styles: List[str]
    cells: Dict[Tuple[int, int], CellMetrics] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def cell(self, src: int, tgt: int) -> CellMetrics:
        return self.cells.setdefault((src, tgt), CellMetrics())

    def style_change(self, src: int, tgt: int) -> Optional[float]:
        c = self.cells.get((src, tgt))
        if c is None or c.cls_ref_pct is None or c.cls_sys_pct is None:
            return None
        return relative_style_change(c.cls_ref_pct, c.cls_sys_pct)

    def metric_decrease(self, src: int, tgt: int, metric: str) -> Optional[float]:
        """Relative decrease of ``metric`` for src->tgt against the src->src diagonal; diagonal is n/a."""
        if src == tgt:
            return None
        same, cross = self.cells.get((src, src)), self.cells.get((src, tgt))
        if same is None or cross is None:
            return None
        a, b = getattr(same, metric), getattr(cross, metric)
        if a is None or b is None:
            return None
        return relative_metric_decrease(a, b)

    # -- tables -------------------------------------------------------------
    def table(self, name: str) -> List[List[str]]:
        n = len(self.styles)

        def fmt(v, pct=False, scale=1.0):
            if v is None:
                return "n/a"
            if isinstance(v, int):
                return str(v)
            return f"{v * scale:.1f}%" if pct else f"{v * scale:.1f}"

        rows = []
        for s in range(n):
            row = []
            for t in range(n):
                c = self.cells.get((s, t), CellMetrics())
                if name == "bleu_meteor":
                    row.append(f"{fmt(c.bleu, scale=100)}/{fmt(c.meteor, scale=100)}")
                elif name == "contractions":
                    ref = "" if s != t or c.ref_contractions is None else f" ({c.ref_contractions})"
                    row.append(f"{fmt(c.contractions)}{ref}")
                elif name == "classifier":
                    row.append(f"{fmt(c.cls_ref_pct)} / {fmt(c.cls_sys_pct)}")
                elif name == "style_change":
                    row.append(fmt(self.style_change(s, t), pct=True))
                elif name == "metric_decrease":
                    if s == t:
                        row.append("-")
                    else:
                        b, m = self.metric_decrease(s, t, "bleu"), self.metric_decrease(s, t, "meteor")
                        row.append(f"{fmt(b)}/{fmt(m, pct=True)}")
                elif name == "transfer":
                    row.append(f"{fmt(c.marker_rate, pct=True, scale=100)} {fmt(c.synonym_accuracy, pct=True, scale=100)}")
                else:
                    raise KeyError(f"unknown table {name!r}")
            rows.append(row)
        return rows

    TABLES = ("bleu_meteor", "contractions", "classifier", "style_change", "metric_decrease", "transfer")

    def to_tsv(self, name: str) -> str:
        head = "".join(f"# {k}={v}\n" for k, v in sorted(self.metadata.items()))
        lines = ["src\\tgt\t" + "\t".join(self.styles)]
        for s, row in zip(self.styles, self.table(name)):
            lines.append(s + "\t" + "\t".join(row))
        return head + "\n".join(lines) + "\n"

    def render(self) -> str:
        out = []
        for name in self.TABLES:
            rows = [["src\\tgt"] + self.styles] + [[s] + r for s, r in zip(self.styles, self.table(name))]
            widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
            out.append(f"== {name} ==")
            for r in rows:
                out.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
            out.append("")
        return "\n".join(out)

    def write(self, outdir) -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for name in self.TABLES:
            (out / f"{name}.tsv").write_text(self.to_tsv(name), encoding="utf-8")
        (out / "report.txt").write_text(self.render(), encoding="utf-8")
