"""Rule-based tokenization, frequency truecasing and byte-pair subword segmentation.

All three stages are deterministic and invertible on text over the training
alphabet. Apostrophe clitics ("'ll", "'s", "n't", ...) become separate tokens so
contraction counts survive preprocessing.
"""

from __future__ import annotations

import heapq
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
END = "</w>"
CONT = "@@"


class VocabularyConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# tokenization
# --------------------------------------------------------------------------

_APOS = "'’"
_TOKEN_RE = re.compile(
    rf"[{_APOS}](?:ll|s|re|ve|d|m)\b|n[{_APOS}]t\b|\w+(?:[{_APOS}-]\w+)*|[^\w\s]",
    re.IGNORECASE,
)
_CLITIC_SUFFIX_RE = re.compile(rf"^(.+?)([{_APOS}](?:ll|s|re|ve|d|m)|n[{_APOS}]t)$", re.IGNORECASE)
_CLITIC_RE = re.compile(rf"^(?:[{_APOS}](?:ll|s|re|ve|d|m)|n[{_APOS}]t)$", re.IGNORECASE)
_NO_SPACE_BEFORE = set(".,!?;:)]}%…")
_NO_SPACE_AFTER = set("([{¿¡")


@dataclass
class TokenizedSentence:
    tokens: List[str]
    original: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def _split_clitic(word: str) -> List[str]:
    m = _CLITIC_SUFFIX_RE.match(word)
    if m is None or not any(ch.isalpha() for ch in m.group(1)):
        return [word]
    return [m.group(1), m.group(2)]


def tokenize(raw: str, lang: str = "") -> TokenizedSentence:
    """Split punctuation from words and detach apostrophe clitics.

    ``lang`` is accepted for interface symmetry; the rules are language-neutral.
    """
    tokens: List[str] = []
    for tok in _TOKEN_RE.findall(raw):
        tokens.extend(_split_clitic(tok))
    return TokenizedSentence(tokens, raw)


def is_clitic(token: str) -> bool:
    return _CLITIC_RE.match(token) is not None


def detokenize(tokens: Sequence[str]) -> str:
    out: List[str] = []
    quote_open = False
    glue_next = False
    for tok in tokens:
        attach = glue_next or tok in _NO_SPACE_BEFORE or is_clitic(tok)
        glue_next = tok in _NO_SPACE_AFTER
        if tok == '"':
            if quote_open:
                attach = True
            else:
                glue_next = True
            quote_open = not quote_open
        if out and attach:
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


def normalize_whitespace(s: str) -> str:
    return " ".join(s.split())


# --------------------------------------------------------------------------
# truecasing
# --------------------------------------------------------------------------


@dataclass
class TruecaseModel:
    counts: Dict[str, Counter] = field(default_factory=dict)

    def best_casing(self, word: str) -> str:
        seen = self.counts.get(word.lower())
        if not seen:
            return word
        # highest count; ties prefer the all-lowercase form, then lexicographic order
        return min(seen.items(), key=lambda kv: (-kv[1], kv[0] != kv[0].lower(), kv[0]))[0]

    def save(self, path) -> None:
        lines = []
        for low in sorted(self.counts):
            for casing, n in sorted(self.counts[low].items()):
                lines.append(f"{low}\t{casing}\t{n}")
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TruecaseModel":
        counts: Dict[str, Counter] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected word<TAB>casing<TAB>count")
            counts.setdefault(parts[0], Counter())[parts[1]] = int(parts[2])
        return cls(counts)


def train_truecaser(corpus: Iterable[Sequence[str]]) -> TruecaseModel:
    counts: Dict[str, Counter] = {}
    for tokens in corpus:
        for tok in tokens:
            if any(ch.isalpha() for ch in tok):
                counts.setdefault(tok.lower(), Counter())[tok] += 1
    return TruecaseModel(counts)


def apply_truecase(model: TruecaseModel, tokens: Sequence[str]) -> List[str]:
    tokens = list(tokens)
    if tokens:
        tokens[0] = model.best_casing(tokens[0])
    return tokens


def invert_truecase(tokens: Sequence[str]) -> List[str]:
    tokens = list(tokens)
    if tokens and tokens[0]:
        tokens[0] = tokens[0][0].upper() + tokens[0][1:]
    return tokens


# --------------------------------------------------------------------------
# byte-pair subwords
# --------------------------------------------------------------------------


def _word_symbols(word: str) -> List[str]:
    return list(word[:-1]) + [word[-1] + END]


def _symbol_to_piece(sym: str) -> str:
    return sym[: -len(END)] if sym.endswith(END) else sym + CONT


class SubwordVocabulary:
    """Joint merge table plus dense piece ids.

    Base symbols are every training character in word-internal and word-final
    form; each merge adds one symbol. Non-final pieces carry an ``@@`` suffix.
    """

    def __init__(self, merges: Sequence[Tuple[str, str]], pieces: Sequence[str]):
        self.merges = [tuple(m) for m in merges]
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self.id_to_piece = list(pieces)
        self.piece_to_id = {p: i for i, p in enumerate(self.id_to_piece)}
        self._cache: Dict[str, Tuple[int, ...]] = {}
        # base symbols in word-final form are single characters
        self.alphabet = {p for p in self.id_to_piece[len(RESERVED):] if len(p) == 1}

    def __len__(self) -> int:
        return len(self.id_to_piece)

    # -- encoding ---------------------------------------------------------
    def _segment(self, word: str) -> List[str]:
        syms = _word_symbols(word)
        while len(syms) > 1:
            best, best_rank = None, None
            for pair in zip(syms, syms[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        return syms

    def encode_word(self, word: str) -> Tuple[int, ...]:
        ids = self._cache.get(word)
        if ids is None:
            out = []
            for sym in self._segment(word):
                pid = self.piece_to_id.get(_symbol_to_piece(sym))
                if pid is None:
                    out = [UNK]
                    break
                out.append(pid)
            ids = tuple(out)
            self._cache[word] = ids
        return ids

    def encode(self, tokens: Sequence[str]) -> List[int]:
        ids: List[int] = []
        for tok in tokens:
            ids.extend(self.encode_word(tok))
        return ids

    def pieces(self, tokens: Sequence[str]) -> List[str]:
        return [self.id_to_piece[i] for i in self.encode(tokens)]

    def decode(self, ids: Iterable[int]) -> TokenizedSentence:
        words: List[str] = []
        buf = ""
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            piece = self.id_to_piece[i] if 0 <= i < len(self.id_to_piece) else RESERVED[UNK]
            if piece.endswith(CONT) and i != UNK:
                buf += piece[: -len(CONT)]
            else:
                words.append(buf + piece)
                buf = ""
        if buf:
            words.append(buf)
        return TokenizedSentence(words, " ".join(words))

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        lines = [f"{a} {b}" for a, b in self.merges]
        lines += [f"{p}\t{i}" for i, p in enumerate(self.id_to_piece)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocabulary":
        merges, pieces = [], {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            if "\t" in line:
                piece, idx = line.rsplit("\t", 1)
                pieces[int(idx)] = piece
            else:
                parts = line.split(" ")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: malformed merge rule {line!r}")
                merges.append((parts[0], parts[1]))
        if sorted(pieces) != list(range(len(pieces))):
            raise ValueError(f"{path}: piece ids are not dense 0..{len(pieces) - 1}")
        return cls(merges, [pieces[i] for i in range(len(pieces))])


def learn_subwords(corpus: Iterable[Sequence[str]], vocab_size: int) -> SubwordVocabulary:
    """Learn byte-pair merges over a tokenized corpus.

    Repeatedly merges the most frequent adjacent symbol pair (ties go to the
    lexicographically smallest pair) until ``vocab_size`` pieces exist or no
    pair occurs more than once.
    """
    freqs: Counter = Counter()
    for tokens in corpus:
        freqs.update(tokens)
    chars = sorted({ch for w in freqs for ch in w})
    base = sorted([c for c in chars] + [c + END for c in chars])
    budget = vocab_size - len(RESERVED) - len(base)
    if budget < 0:
        raise VocabularyConfigError(
            f"vocab_size {vocab_size} < reserved ({len(RESERVED)}) + base symbols ({len(base)})")

    words = [_word_symbols(w) for w in sorted(freqs)]
    counts = [freqs[w] for w in sorted(freqs)]
    pair_counts: Counter = Counter()
    where: Dict[Tuple[str, str], set] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += counts[wi]
            where[pair].add(wi)
    heap = [(-n, pair) for pair, n in pair_counts.items()]
    heapq.heapify(heap)

    merges: List[Tuple[str, str]] = []
    while len(merges) < budget and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < 2:
            break
        merges.append(pair)
        touched: set = set()
        for wi in sorted(where.pop(pair, ())):
            syms, n = words[wi], counts[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= n
                touched.add(p)
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += n
                where[p].add(wi)
                touched.add(p)
        for p in sorted(touched):
            if pair_counts[p] > 0:
                heapq.heappush(heap, (-pair_counts[p], p))
            else:
                pair_counts.pop(p, None)
                where.pop(p, None)

    pieces = list(RESERVED) + [_symbol_to_piece(s) for s in base]
    seen = set(pieces)
    for a, b in merges:
        # different merge paths can spell the same symbol
        piece = _symbol_to_piece(a + b)
        if piece not in seen:
            seen.add(piece)
            pieces.append(piece)
    return SubwordVocabulary(merges, pieces)


class TextPipeline:
    """tokenize -> truecase -> subwords, and the exact inverse."""

    def __init__(self, truecaser: TruecaseModel, vocab: SubwordVocabulary):
        self.truecaser = truecaser
        self.vocab = vocab

    @classmethod
    def train(cls, raw_sentences: Iterable[str], vocab_size: int) -> "TextPipeline":
        toks = [tokenize(s).tokens for s in raw_sentences]
        tc = train_truecaser(toks)
        cased = [apply_truecase(tc, t) for t in toks]
        return cls(tc, learn_subwords(cased, vocab_size))

    def tokens(self, raw: str) -> List[str]:
        return apply_truecase(self.truecaser, tokenize(raw).tokens)

    def encode(self, raw: str) -> List[int]:
        return self.vocab.encode(self.tokens(raw))

    def decode_tokens(self, ids: Iterable[int]) -> List[str]:
        return self.vocab.decode(ids).tokens

    def postprocess(self, ids: Iterable[int]) -> str:
        return detokenize(invert_truecase(self.decode_tokens(ids)))
