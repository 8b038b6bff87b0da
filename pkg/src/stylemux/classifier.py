"""One-vs-rest text CNN style classifier on word-level input."""

from __future__ import annotations

import math
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .model import linear, load_checkpoint, save_checkpoint
from .trainer import AdamState, adam_step, zero_grads

PAD, UNK = 0, 1
NEG = -1e9


class ClassifierConfigError(ValueError):
    pass


@dataclass
class CnnConfig:
    filter_widths: Tuple[int, ...] = (3, 4, 5)
    num_filters: int = 128
    dropout: float = 0.5
    embed_dim: int = 128
    num_classes: int = 2
    max_vocab: int = 20000
    lr: float = 0.0002  # the NMT trainer's Adam default
    batch_size: int = 64
    updates: int = 600
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.filter_widths = tuple(int(w) for w in self.filter_widths)
        if not self.filter_widths or min(self.filter_widths) < 1 or self.num_filters < 1:
            raise ClassifierConfigError("filter widths and filter count must be positive")

    def to_lines(self) -> str:
        d = asdict(self)
        d["filter_widths"] = ",".join(map(str, self.filter_widths))
        return "".join(f"{k}={v}\n" for k, v in d.items())

    @classmethod
    def from_lines(cls, text: str) -> "CnnConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line or line.startswith("word="):
                continue
            k, v = line.split("=", 1)
            if k == "filter_widths":
                kw[k] = tuple(int(x) for x in v.split(","))
            elif types[k] in (float, "float"):
                kw[k] = float(v)
            else:
                kw[k] = int(v)
        return cls(**kw)


class WordVocab:
    def __init__(self, words: Sequence[str]):
        self.words = ["<pad>", "<unk>"] + [w for w in words if w not in ("<pad>", "<unk>")]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, sentences: Sequence[Sequence[str]], max_size: int) -> "WordVocab":
        counts = Counter(w.lower() for s in sentences for w in s)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
        return cls([w for w, _ in ranked])

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, sentence: Sequence[str]) -> List[int]:
        return [self.index.get(w.lower(), UNK) for w in sentence]


class StyleClassifier:
    def __init__(self, cfg: CnnConfig, vocab: WordVocab, params=None):
        self.cfg = cfg
        self.vocab = vocab
        if params is None:
            rng = np.random.default_rng([cfg.seed, 11])
            params = OrderedDict()
            params["embed"] = T.parameter(rng.uniform(-0.08, 0.08, (len(vocab), cfg.embed_dim)), "embed")
            for w in cfg.filter_widths:
                fan = w * cfg.embed_dim
                params[f"conv{w}.w"] = T.parameter(rng.uniform(-1, 1, (fan, cfg.num_filters)) / math.sqrt(fan))
                params[f"conv{w}.b"] = T.parameter(np.zeros(cfg.num_filters))
            feat = cfg.num_filters * len(cfg.filter_widths)
            params["out.w"] = T.parameter(rng.uniform(-1, 1, (feat, cfg.num_classes)) / math.sqrt(feat))
            params["out.b"] = T.parameter(np.zeros(cfg.num_classes))
        self.params = params

    def _pad(self, sentences: Sequence[Sequence[str]]) -> Tuple[np.ndarray, np.ndarray]:
        lens = np.array([max(len(s), 1) for s in sentences])
        width = max(int(lens.max()), max(self.cfg.filter_widths))
        ids = np.full((len(sentences), width), PAD, dtype=np.int64)
        for i, s in enumerate(sentences):
            enc = self.vocab.encode(s)
            ids[i, :len(enc)] = enc
        return ids, lens

    def logits(self, ids: np.ndarray, lens: np.ndarray, train: bool = False, rng=None) -> T.Tensor:
        p, cfg = self.params, self.cfg
        b, t = ids.shape
        x = T.embedding_lookup(p["embed"], ids)
        x = T.mul(x, T.Tensor(np.broadcast_to((ids != PAD)[..., None], x.shape)))
        pooled = []
        for w in cfg.filter_widths:
            n = t - w + 1
            windows = T.concat_last_dim([x[:, k:k + n, :] for k in range(w)])
            h = T.relu(linear(windows, p[f"conv{w}.w"], p[f"conv{w}.b"]))
            valid = np.arange(n)[None, :] < np.maximum(lens - w + 1, 1)[:, None]
            h = T.add_const(h, np.where(valid, 0.0, NEG)[..., None])
            pooled.append(T.tmax(h, axis=1))
        feats = T.dropout(T.concat_last_dim(pooled), cfg.dropout, train, rng)
        return linear(feats, p["out.w"], p["out.b"])

    def predict_proba(self, sentences: Sequence[Sequence[str]], batch_size: int = 256) -> np.ndarray:
        """P(target style) per sentence; dropout is off."""
        out = []
        with T.no_grad():
            for i in range(0, len(sentences), batch_size):
                ids, lens = self._pad(sentences[i:i + batch_size])
                z = self.logits(ids, lens).data.astype(np.float64)
                z -= z.max(axis=1, keepdims=True)
                prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                out.append(prob)
        probs = np.concatenate(out) if out else np.zeros((0, self.cfg.num_classes))
        return probs[:, 1]

    def accuracy(self, sentences: Sequence[Sequence[str]], labels: Sequence[int]) -> float:
        pred = self.predict_proba(sentences) > 0.5
        return float(np.mean(pred == np.asarray(labels, dtype=bool)))

    def save(self, path) -> None:
        header = self.cfg.to_lines() + "".join(f"word={w}\n" for w in self.vocab.words[2:])
        save_checkpoint(path, header, self.params)

    @classmethod
    def load(cls, path) -> "StyleClassifier":
        header, params = load_checkpoint(path)
        words = [line[5:] for line in header.splitlines() if line.startswith("word=")]
        return cls(CnnConfig.from_lines(header), WordVocab(words), params)


@dataclass
class ClassifierResult:
    classifier: StyleClassifier
    val_accuracy: float
    val_size: int


def train_classifier(style_id: int, corpus_by_style: Mapping[int, Sequence[Sequence[str]]],
                     cfg: Optional[CnnConfig] = None, shuffle_labels: bool = False) -> ClassifierResult:
    """Train ``style_id`` vs. the pooled other styles with balanced mini-batches.

    A balanced held-out split (``val_fraction`` of the target style plus as
    many negatives) is reserved for the reported accuracy. ``shuffle_labels``
    permutes labels before splitting, a chance-level control.
    """
    cfg = cfg or CnnConfig()
    if len([s for s, xs in corpus_by_style.items() if xs]) < 2 or style_id not in corpus_by_style:
        raise ClassifierConfigError("need the target style and at least one other style")
    rng = np.random.default_rng([cfg.seed, style_id])
    sents: List[Sequence[str]] = []
    labels: List[int] = []
    for s in sorted(corpus_by_style):
        for x in corpus_by_style[s]:
            sents.append(x)
            labels.append(int(s == style_id))
    y = np.array(labels)
    if shuffle_labels:
        y = rng.permutation(y)
    pos, neg = rng.permutation(np.flatnonzero(y == 1)), rng.permutation(np.flatnonzero(y == 0))
    n_val = max(1, int(round(cfg.val_fraction * min(len(pos), len(neg)))))
    val_idx = np.concatenate([pos[:n_val], neg[:n_val]])
    pos_tr, neg_tr = pos[n_val:], neg[n_val:]
    if not len(pos_tr) or not len(neg_tr):
        raise ClassifierConfigError("not enough data for a held-out split")

    vocab = WordVocab.build([sents[i] for i in np.concatenate([pos_tr, neg_tr])], cfg.max_vocab)
    clf = StyleClassifier(cfg, vocab)
    state = AdamState()
    half = max(cfg.batch_size // 2, 1)
    for _ in range(cfg.updates):
        idx = np.concatenate([rng.choice(pos_tr, half), rng.choice(neg_tr, half)])
        ids, lens = clf._pad([sents[i] for i in idx])
        logits = clf.logits(ids, lens, train=True, rng=rng)
        loss = T.cross_entropy(logits, y[idx])
        T.backward(loss)
        adam_step(clf.params, state, cfg.lr)
        zero_grads(clf.params)
    acc = clf.accuracy([sents[i] for i in val_idx], y[val_idx])
    return ClassifierResult(clf, acc, len(val_idx))


def classify_corpus(classifier: StyleClassifier, sentences: Sequence[Sequence[str]]) -> float:
    """Percentage of sentences with P(target style) > 0.5."""
    if not sentences:
        raise ClassifierConfigError("cannot classify an empty corpus")
    return 100.0 * float(np.mean(classifier.predict_proba(sentences) > 0.5))


def write_classification(path, probs: Sequence[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(probs):
            fh.write(f"{i}\t{p:.6f}\t{int(p > 0.5)}\n")
