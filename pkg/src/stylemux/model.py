"""Factored transformer encoder-decoder with beam-search decoding.

Each source position carries a token id plus two factor ids (target language
and target style). Their embeddings are concatenated and projected to the
model width before the sinusoidal position code is added.
"""

from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .text import BOS, EOS, PAD

MAGIC = b"SMUXCKPT"
FORMAT_VERSION = 1
NEG_INF = -1e9


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_langs: int
    num_styles: int
    layers: int = 6
    model_dim: int = 512
    heads: int = 8
    ffn_dim: int = 0  # 0 means 4 * model_dim
    token_embed_dim: int = 512
    factor_embed_dim: int = 4
    dropout_p: float = 0.1
    max_len: int = 128

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.model_dim
        for f in ("vocab_size", "num_langs", "num_styles", "layers", "model_dim", "heads",
                  "ffn_dim", "token_embed_dim", "factor_embed_dim", "max_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"ModelConfig.{f} must be positive, got {getattr(self, f)}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_lines(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_lines(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line:
                continue
            k, v = line.split("=", 1)
            if k not in types:
                raise ValueError(f"unknown ModelConfig key {k!r}")
            kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(cfg: ModelConfig, rng: np.random.Generator, init_scale: float = 0.08) -> "OrderedDict[str, Tensor]":
    """Uniform(-init_scale, init_scale) weights, zero biases, unit layer-norm gains."""
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes: List[Tuple[str, tuple, str]] = [
        ("src_embed", (cfg.vocab_size, cfg.token_embed_dim), "u"),
        ("lang_embed", (cfg.num_langs, cfg.factor_embed_dim), "u"),
        ("style_embed", (cfg.num_styles, cfg.factor_embed_dim), "u"),
        ("src_proj.w", (cfg.token_embed_dim + 2 * cfg.factor_embed_dim, d), "u"),
        ("src_proj.b", (d,), "0"),
        ("tgt_embed", (cfg.vocab_size, d), "u"),
    ]

    def attn(prefix):
        out = []
        for n in ("q", "k", "v", "o"):
            out += [(f"{prefix}.w{n}", (d, d), "u"), (f"{prefix}.b{n}", (d,), "0")]
        return out

    def norm(prefix):
        return [(f"{prefix}.g", (d,), "1"), (f"{prefix}.b", (d,), "0")]

    def ffn(prefix):
        return [(f"{prefix}.w1", (d, f), "u"), (f"{prefix}.b1", (f,), "0"),
                (f"{prefix}.w2", (f, d), "u"), (f"{prefix}.b2", (d,), "0")]

    for i in range(cfg.layers):
        shapes += attn(f"enc{i}.self") + norm(f"enc{i}.ln1") + ffn(f"enc{i}.ffn") + norm(f"enc{i}.ln2")
    for i in range(cfg.layers):
        shapes += (attn(f"dec{i}.self") + norm(f"dec{i}.ln1") + attn(f"dec{i}.cross")
                   + norm(f"dec{i}.ln2") + ffn(f"dec{i}.ffn") + norm(f"dec{i}.ln3"))
    shapes += [("out.w", (d, cfg.vocab_size), "u"), ("out.b", (cfg.vocab_size,), "0")]

    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape, kind in shapes:
        if kind == "u":
            data = rng.uniform(-init_scale, init_scale, size=shape)
        elif kind == "1":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = T.parameter(data, name=name)
    return params


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = T.add(T.matmul(x.reshape(-1, x.shape[-1]), w), b)
    return y.reshape(*lead, w.shape[1])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention(p, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is additive, broadcastable to [B,H,Tq,Tk]."""
    q = _split_heads(linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = T.softmax(T.add_const(scores, mask), axis=-1)
    ctx = _merge_heads(T.matmul(weights, v))
    return linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _sublayer(p, prefix: str, x: Tensor, y: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    """Post-norm residual: LayerNorm(x + Dropout(y))."""
    y = T.dropout(y, cfg.dropout_p, train, rng)
    return T.layer_norm(T.add(x, y), p[f"{prefix}.g"], p[f"{prefix}.b"])


def _ffn(p, prefix: str, x: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    h = T.relu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    h = T.dropout(h, cfg.dropout_p, train, rng)
    return linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    return a[None, :] if a.ndim == 1 else a


def embed_source(p, cfg: ModelConfig, src_ids, factor_lang, factor_style) -> Tensor:
    """Token and factor embeddings, concatenated, projected to model width, plus positions.

    Accepts a single sequence ([S] -> [S, d]) or a batch ([B, S] -> [B, S, d]).
    """
    single = np.ndim(src_ids) == 1
    src, lang, style = _as_batch(src_ids), _as_batch(factor_lang), _as_batch(factor_style)
    if not (src.shape == lang.shape == style.shape):
        raise T.ShapeError(f"source/factor shapes differ: {src.shape} {lang.shape} {style.shape}")
    b, s = src.shape
    if s > cfg.max_len:
        raise LengthError(f"source length {s} exceeds max_len {cfg.max_len}")
    x = T.concat_last_dim([
        T.embedding_lookup(p["src_embed"], src),
        T.embedding_lookup(p["lang_embed"], lang),
        T.embedding_lookup(p["style_embed"], style),
    ])
    x = T.scale(linear(x, p["src_proj.w"], p["src_proj.b"]), math.sqrt(cfg.model_dim))
    x = T.add_const(x, positional_encoding(s, cfg.model_dim)[None])
    return x.reshape(s, cfg.model_dim) if single else x


def source_mask(src: np.ndarray) -> np.ndarray:
    """Additive key mask [B,1,1,S] hiding PAD source positions."""
    return np.where(src == PAD, NEG_INF, 0.0)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)[None, None]


def encode(p, cfg: ModelConfig, embedded: Tensor, src_mask: Optional[np.ndarray] = None,
           train: bool = False, rng=None) -> Tensor:
    single = embedded.ndim == 2
    x = embedded.reshape(1, *embedded.shape) if single else embedded
    if src_mask is None:
        src_mask = np.zeros((x.shape[0], 1, 1, x.shape[1]))
    x = T.dropout(x, cfg.dropout_p, train, rng)
    for i in range(cfg.layers):
        x = _sublayer(p, f"enc{i}.ln1", x, attention(p, f"enc{i}.self", x, x, src_mask, cfg.heads), cfg, train, rng)
        x = _sublayer(p, f"enc{i}.ln2", x, _ffn(p, f"enc{i}.ffn", x, cfg, train, rng), cfg, train, rng)
    return x.reshape(*embedded.shape) if single else x


def decode(p, cfg: ModelConfig, memory: Tensor, src_mask: np.ndarray, tgt_in, train: bool = False,
           rng=None) -> Tensor:
    """Teacher-forced decoder pass; returns logits [B, T, V]."""
    tgt_in = _as_batch(tgt_in)
    t = tgt_in.shape[1]
    if t > cfg.max_len:
        raise LengthError(f"target prefix length {t} exceeds max_len {cfg.max_len}")
    x = T.scale(T.embedding_lookup(p["tgt_embed"], tgt_in), math.sqrt(cfg.model_dim))
    x = T.add_const(x, positional_encoding(t, cfg.model_dim)[None])
    x = T.dropout(x, cfg.dropout_p, train, rng)
    self_mask = causal_mask(t)
    for i in range(cfg.layers):
        x = _sublayer(p, f"dec{i}.ln1", x, attention(p, f"dec{i}.self", x, x, self_mask, cfg.heads), cfg, train, rng)
        x = _sublayer(p, f"dec{i}.ln2", x, attention(p, f"dec{i}.cross", x, memory, src_mask, cfg.heads), cfg, train, rng)
        x = _sublayer(p, f"dec{i}.ln3", x, _ffn(p, f"dec{i}.ffn", x, cfg, train, rng), cfg, train, rng)
    return linear(x, p["out.w"], p["out.b"])


@dataclass
class Batch:
    src: np.ndarray
    lang: np.ndarray
    style: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    ids: Tuple[int, ...] = ()

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def make_batch(examples: Sequence, ids: Sequence[int] = ()) -> Batch:
    """Pad factored examples (``src_ids``, ``factor_lang``, ``factor_style``, ``tgt_ids``) into arrays."""
    b = len(examples)
    s = max(len(e.src_ids) for e in examples)
    t = max(len(e.tgt_ids) for e in examples) - 1
    src = np.full((b, s), PAD, dtype=np.int64)
    lang = np.zeros((b, s), dtype=np.int64)
    style = np.zeros((b, s), dtype=np.int64)
    tgt_in = np.full((b, t), PAD, dtype=np.int64)
    tgt_out = np.full((b, t), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        n = len(e.src_ids)
        src[i, :n] = e.src_ids
        lang[i, :n] = e.factor_lang
        style[i, :n] = e.factor_style
        m = len(e.tgt_ids) - 1
        tgt_in[i, :m] = e.tgt_ids[:-1]
        tgt_out[i, :m] = e.tgt_ids[1:]
    return Batch(src, lang, style, tgt_in, tgt_out, tuple(ids))


class FactoredTransformer:
    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    # -- training objective -----------------------------------------------
    def logits(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        p, cfg = self.params, self.cfg
        mask = source_mask(batch.src)
        memory = encode(p, cfg, embed_source(p, cfg, batch.src, batch.lang, batch.style), mask, train, rng)
        return decode(p, cfg, memory, mask, batch.tgt_in, train, rng)

    def forward_loss(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """Mean per-target-token cross-entropy over non-PAD positions."""
        logits = self.logits(batch, train, rng)
        return T.cross_entropy(logits.reshape(-1, self.cfg.vocab_size), batch.tgt_out.reshape(-1), ignore_index=PAD)

    def sum_nll(self, batch: Batch) -> Tuple[float, int]:
        with T.no_grad():
            loss = self.forward_loss(batch)
        n = batch.num_target_tokens
        return float(loss.data) * n, n

    # -- inference --------------------------------------------------------
    def encode_source(self, src: np.ndarray, lang: np.ndarray, style: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        p, cfg = self.params, self.cfg
        mask = source_mask(src)
        with T.no_grad():
            memory = encode(p, cfg, embed_source(p, cfg, src, lang, style), mask)
        return memory, mask

    def decode_step(self, memory: Tensor, src_mask: np.ndarray, prefix_ids) -> np.ndarray:
        """Log-probabilities of the next token after each prefix: [B, V]."""
        with T.no_grad():
            logits = decode(self.params, self.cfg, memory, src_mask, prefix_ids).data[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def translate(self, sources: Sequence[Sequence[int]], tgt_lang: int, tgt_style: int,
                  beam: int = 5, max_len: Optional[int] = None) -> List[List[int]]:
        """Beam-search translations (without BOS/EOS) for a list of source id sequences."""
        if not sources:
            return []
        max_len = max_len or self.cfg.max_len
        n = len(sources)
        s = max(max(len(x) for x in sources), 1)
        src = np.full((n, s), PAD, dtype=np.int64)
        for i, x in enumerate(sources):
            src[i, :len(x)] = x
        lang = np.full((n, s), tgt_lang, dtype=np.int64)
        style = np.full((n, s), tgt_style, dtype=np.int64)
        memory, mask = self.encode_source(src, lang, style)

        def step(rows: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
            mem = T.Tensor(memory.data[rows])
            return self.decode_step(mem, mask[rows], prefixes)

        results = beam_search(step, n, beam=beam, max_len=min(max_len, self.cfg.max_len))
        return [hyp.tokens[:-1] if hyp.finished else hyp.tokens for hyp in results]

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.cfg.to_lines(), self.params)

    @classmethod
    def load(cls, path) -> "FactoredTransformer":
        header, params = load_checkpoint(path)
        return cls(ModelConfig.from_lines(header), params)


# --------------------------------------------------------------------------
# beam search
# --------------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    tokens: List[int]
    logprob: float
    finished: bool = False

    @property
    def score(self) -> float:
        return self.logprob / max(len(self.tokens), 1)


def beam_search(step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], num_sources: int, beam: int = 5,
                max_len: int = 100, bos: int = BOS, eos: int = EOS) -> List[BeamHypothesis]:
    """Length-normalised beam search run for several sources at once.

    ``step_fn(rows, prefixes)`` returns next-token log-probabilities [H, V] for
    prefixes [H, t] (each starting with BOS) belonging to sources ``rows``.
    Each step keeps the ``beam`` best extensions by cumulative log-probability;
    extensions ending in EOS are set aside as finished, so a source's beam
    shrinks as hypotheses complete. The result per source is the finished
    hypothesis with the best ``logprob / length``, or the best unfinished one
    if none finished within ``max_len``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live: List[List[BeamHypothesis]] = [[BeamHypothesis([], 0.0)] for _ in range(num_sources)]
    done: List[List[BeamHypothesis]] = [[] for _ in range(num_sources)]
    for _ in range(max_len):
        rows, prefixes, owners = [], [], []
        for src_i, hyps in enumerate(live):
            for h in hyps:
                rows.append(src_i)
                prefixes.append([bos] + h.tokens)
                owners.append(h)
        if not rows:
            break
        logp = step_fn(np.asarray(rows), np.asarray(prefixes, dtype=np.int64))
        start = 0
        for src_i, hyps in enumerate(live):
            k = len(hyps)
            if k == 0:
                continue
            block = logp[start:start + k].astype(np.float64)
            start += k
            cand = np.array([h.logprob for h in hyps])[:, None] + block
            flat = cand.reshape(-1)
            order = np.argsort(-flat, kind="stable")[:beam]
            vocab = block.shape[1]
            nxt = []
            for idx in order:
                h = hyps[idx // vocab]
                tok = int(idx % vocab)
                new = BeamHypothesis(h.tokens + [tok], float(flat[idx]), tok == eos)
                (done[src_i] if new.finished else nxt).append(new)
            live[src_i] = nxt
    results = []
    for src_i in range(num_sources):
        pool = done[src_i] or live[src_i]
        best = pool[0]
        for h in pool[1:]:
            if h.score > best.score:
                best = h
        results.append(best)
    return results


def greedy_decode(step_fn, num_sources: int, max_len: int = 100, bos: int = BOS, eos: int = EOS) -> List[List[int]]:
    """Argmax decoding, batched over sources; returns tokens including EOS when emitted."""
    out = [[] for _ in range(num_sources)]
    active = list(range(num_sources))
    for _ in range(max_len):
        if not active:
            break
        prefixes = np.asarray([[bos] + out[i] for i in active], dtype=np.int64)
        logp = step_fn(np.asarray(active), prefixes)
        still = []
        for row, i in enumerate(active):
            tok = int(np.argmax(logp[row]))
            out[i].append(tok)
            if tok != eos:
                still.append(i)
        active = still
    return out


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------


def save_checkpoint(path, header: str, params: Dict[str, Tensor]) -> None:
    """Write magic, version, header text and named little-endian float32 blocks."""
    buf = io.BytesIO()
    head = header.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Tuple[str, "OrderedDict[str, Tensor]"]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = data[off:off + hlen].decode("utf-8")
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        params[name] = T.parameter(arr, name=name)
    return header, params
