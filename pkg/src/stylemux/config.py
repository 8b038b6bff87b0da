"""Run configuration: one flat ``section.key=value`` file covering every module."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Tuple

from .classifier import CnnConfig
from .synth import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GenSection:
    num_sentences: int = 20000
    num_test: int = 200


@dataclass
class PrepSection:
    vocab_size: int = 32000
    dev_per_direction: int = 50
    max_tokens: int = 100
    max_ratio: float = 9.0


@dataclass
class ModelSection:
    layers: int = 6
    model_dim: int = 512
    heads: int = 8
    ffn_dim: int = 0
    token_embed_dim: int = 512
    factor_embed_dim: int = 4
    dropout_p: float = 0.1
    max_len: int = 128


@dataclass
class EvalSection:
    target_lang: str = "l0"
    beam: int = 5
    max_len: int = 100
    classifier_sentences: int = 5000
    monolingual: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    synth: SynthSpec = field(default_factory=SynthSpec)
    gen: GenSection = field(default_factory=GenSection)
    prep: PrepSection = field(default_factory=PrepSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("synth", "gen", "prep", "model", "train", "cnn", "eval")

    def items(self) -> Iterable[Tuple[str, object]]:
        yield "seed", self.seed
        yield "workers", self.workers
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                yield f"{sec}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, (tuple, list)):
                return ",".join(map(str, v))
            return str(v)

        return "".join(f"{k}={fmt(v)}\n" for k, v in self.items())

    def write(self, outdir) -> Path:
        path = Path(outdir) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def set(self, key: str, value: str) -> None:
        if key in ("seed", "workers"):
            setattr(self, key, _coerce(key, int, value))
            return
        sec, _, name = key.partition(".")
        if sec not in self.SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, sec)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(key, types[name], value))

    def finalize(self) -> "RunConfig":
        """Propagate the global seed and re-run section validation."""
        self.synth.seed = self.seed
        self.train.seed = self.seed
        self.cnn.seed = self.seed
        try:
            for sec in ("synth", "train", "cnn"):
                obj = getattr(self, sec)
                obj.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


def _coerce(key: str, typ, value: str):
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if t in ("int",):
            return int(value)
        if t in ("float",):
            return float(value)
        if t in ("bool",):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if t.startswith("Tuple") or t.startswith("tuple"):
            return tuple(int(x) for x in value.split(",") if x.strip())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def load_config(path=None, overrides: Dict[str, str] = None, base: Dict[str, str] = None) -> RunConfig:
    """Precedence: defaults < ``base`` preset < config file < ``overrides``."""
    cfg = RunConfig()
    for k, v in (base or {}).items():
        cfg.set(k, v)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        for k, v in parse_config_text(text, str(p)).items():
            try:
                cfg.set(k, v)
            except ConfigError as exc:
                raise ConfigError(f"{p}: {exc}") from exc
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg.finalize()
