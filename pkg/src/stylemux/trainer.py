"""Adam optimisation with a validation-perplexity plateau schedule."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import FactoredExample, build_batches
from .model import Batch, FactoredTransformer, make_batch

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0002
    decay_factor: float = 0.7
    patience_decay: int = 8
    patience_stop: int = 32
    checkpoint_interval: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_words: int = 2048
    max_updates: int = 0  # 0: no cap
    max_seconds: float = 0.0  # 0: no cap
    keep_checkpoints: bool = True

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise TrainConfigError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.patience_stop < self.patience_decay:
            raise TrainConfigError("patience_stop must be >= patience_decay")
        if self.checkpoint_interval < 1 or self.lr <= 0:
            raise TrainConfigError("checkpoint_interval and lr must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, T.Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; parameters without a gradient are skipped."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericalError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def zero_grads(params: Dict[str, T.Tensor]) -> None:
    for p in params.values():
        p.grad = None


class PlateauSchedule:
    """Learning-rate decay and early stopping driven by validation perplexity.

    Improvement means strictly lower than the best so far. ``since_decay``
    resets on improvement and on every decay; ``since_best`` resets only on
    improvement and triggers the stop, which takes precedence over a decay at
    the same checkpoint.
    """

    def __init__(self, lr: float, decay_factor: float = 0.7, patience_decay: int = 8, patience_stop: int = 32):
        self.lr0 = lr
        self.lr = lr
        self.decay_factor = decay_factor
        self.patience_decay = patience_decay
        self.patience_stop = patience_stop
        self.best = math.inf
        self.since_best = 0
        self.since_decay = 0
        self.decays = 0
        self.stopped = False

    def update(self, ppl: float) -> str:
        if ppl < self.best:
            self.best = ppl
            self.since_best = 0
            self.since_decay = 0
            return "improved"
        self.since_best += 1
        self.since_decay += 1
        if self.since_best >= self.patience_stop:
            self.stopped = True
            return "stop"
        if self.since_decay >= self.patience_decay:
            self.decays += 1
            self.lr = self.lr0 * self.decay_factor ** self.decays
            self.since_decay = 0
            return "decay"
        return "none"


def validate(model: FactoredTransformer, dev: Sequence[FactoredExample], max_words: int = 2048) -> float:
    """exp(total NLL / total non-PAD target tokens) over the dev set."""
    if not dev:
        raise TrainConfigError("empty dev set")
    nll, count = 0.0, 0
    for ids in build_batches(dev, max_words, seed=0):
        s, n = model.sum_nll(make_batch([dev[i] for i in ids]))
        nll += s
        count += n
    return math.exp(nll / count)


@dataclass
class CheckpointRecord:
    step: int
    train_loss: float
    val_ppl: float
    lr: float
    event: str
    path: Optional[str] = None


@dataclass
class TrainResult:
    history: List[CheckpointRecord]
    best: Optional[CheckpointRecord]
    losses: List[float]
    steps: int
    stopped_early: bool


def train(model: FactoredTransformer, examples: Sequence[FactoredExample], dev: Sequence[FactoredExample],
          cfg: TrainConfig, outdir=None, on_update: Optional[Callable[[int, float], bool]] = None) -> TrainResult:
    """Train until early stop or a cap; on return ``model`` holds the best checkpoint's parameters.

    ``on_update(step, loss)`` may return True to stop after that update; a
    final checkpoint is then taken so the best-checkpoint choice sees it.
    """
    if not examples:
        raise TrainConfigError("empty training set")
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log", "w", encoding="utf-8")
    else:
        log_fh = None
    rng = np.random.default_rng([cfg.seed, 1])
    sched = PlateauSchedule(cfg.lr, cfg.decay_factor, cfg.patience_decay, cfg.patience_stop)
    state = AdamState()
    history: List[CheckpointRecord] = []
    losses: List[float] = []
    best_params: Optional[Dict[str, np.ndarray]] = None
    best: Optional[CheckpointRecord] = None
    window_nll, window_tokens = 0.0, 0
    t0 = time.monotonic()
    step, epoch, done = 0, 0, False

    def checkpoint():
        nonlocal best, best_params, window_nll, window_tokens
        ppl = validate(model, dev, cfg.max_words) if dev else math.exp(window_nll / max(window_tokens, 1))
        train_loss = window_nll / max(window_tokens, 1)
        lr_used = sched.lr
        event = sched.update(ppl)
        path = None
        if out is not None and cfg.keep_checkpoints:
            path = str(out / f"ckpt-{step}")
            model.save(path)
        rec = CheckpointRecord(step, train_loss, ppl, lr_used, event, path)
        history.append(rec)
        if log_fh is not None:
            log_fh.write(f"{step}\t{train_loss:.6f}\t{ppl:.6f}\t{lr_used:.8g}\n")
            log_fh.flush()
        log.info("step %d train_loss %.4f val_ppl %.4f lr %.3g %s", step, train_loss, ppl, lr_used, event)
        if event == "improved":
            best = rec
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        window_nll, window_tokens = 0.0, 0
        return event

    try:
        while not done:
            for ids in build_batches(examples, cfg.max_words, cfg.seed, epoch):
                batch = make_batch([examples[i] for i in ids], ids)
                loss = model.forward_loss(batch, train=True, rng=rng)
                T.backward(loss)
                adam_step(model.params, state, sched.lr, cfg.beta1, cfg.beta2, cfg.eps)
                zero_grads(model.params)
                step += 1
                lv = float(loss.data)
                losses.append(lv)
                window_nll += lv * batch.num_target_tokens
                window_tokens += batch.num_target_tokens
                stop_req = on_update(step, lv) if on_update is not None else False
                capped = (cfg.max_updates and step >= cfg.max_updates) or \
                         (cfg.max_seconds and time.monotonic() - t0 >= cfg.max_seconds)
                if step % cfg.checkpoint_interval == 0:
                    if checkpoint() == "stop":
                        done = True
                        break
                elif stop_req or capped:
                    checkpoint()
                if stop_req or capped:
                    done = True
                    break
            epoch += 1
    finally:
        if log_fh is not None:
            log_fh.close()
    if best_params is not None:
        for k, arr in best_params.items():
            model.params[k].data[...] = arr
    return TrainResult(history, best, losses, step, sched.stopped)
