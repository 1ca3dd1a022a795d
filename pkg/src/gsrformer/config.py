"""Run configuration: schema, presets, YAML files and ``key=value`` overrides.

A config file is a YAML mapping with the sections below; every key is
optional and missing keys take the value of the preset named by the
top-level ``preset`` key (default ``desk``)::

    preset: desk
    seed: 0
    model:      {dim, heads, verb_layers, role_layers, ffn_verb, ffn_role, ffn_decoder,
                 head_hidden, box_hidden, dropout_verb, dropout_role, dropout_decoder,
                 dropout_heads, iterations, support_k, aggregation, order, alternate,
                 strict_support, redecode, stride, feature_channels, max_grid, embed_dim}
    loss:       {verb_smoothing, noun_smoothing, aux_verb_loss, weights: {...}}
    train:      {encoder_epochs, decoder_epochs, batch_size, optimizer, lr_encoder, lr_decoder,
                 momentum, clip_norm, flip_prob, scales, checkpoint_every}
    data:       {lexicon, train, eval, image_dir, synth: {...} or null}
    paths:      {out_dir}

Relative data paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from gsrformer.decoder import AGGREGATIONS, ORDERS
from gsrformer.errors import ConfigError
from gsrformer.objectives import LossWeights


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    verb_layers: int = 2
    role_layers: int = 2
    ffn_verb: int = 128
    ffn_role: int = 128
    ffn_decoder: int = 128
    head_hidden: int = 64
    box_hidden: int = 64
    dropout_verb: float = 0.0
    dropout_role: float = 0.0
    dropout_decoder: float = 0.0
    dropout_heads: float = 0.0
    iterations: int = 3
    support_k: int = 5
    aggregation: str = "sum"
    order: str = "noun-first"
    alternate: bool = True
    strict_support: bool = False
    redecode: bool = True
    stride: int = 8
    feature_channels: int = 32
    max_grid: int = 16
    embed_dim: int = 0  # 0: role embeddings already at ``dim``


@dataclass
class LossConfig:
    verb_smoothing: float = 0.3
    noun_smoothing: float = 0.2
    aux_verb_loss: bool = False
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TrainConfig:
    encoder_epochs: int = 60
    decoder_epochs: int = 160
    batch_size: int = 16
    optimizer: str = "adam"
    lr_encoder: float = 0.001
    lr_decoder: float = 0.001
    momentum: float = 0.9
    clip_norm: float = 1.0
    flip_prob: float = 0.0
    scales: list[float] = field(default_factory=lambda: [1.0])
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint


@dataclass
class SynthConfig:
    verbs: int = 8
    arities: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    images_per_verb: int = 16
    eval_images_per_verb: int = 8
    noise: float = 0.0
    seed: int = 0


@dataclass
class DataConfig:
    lexicon: str = ""
    train: str = ""
    eval: str = ""
    image_dir: str = ""
    synth: SynthConfig | None = field(default_factory=SynthConfig)


@dataclass
class PathConfig:
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    base_dir: str = field(default=".", metadata={"internal": True})

    def validate(self) -> "RunConfig":
        m, lo, t = self.model, self.loss, self.train
        checks = [
            (m.dim > 0 and m.heads > 0 and m.dim % m.heads == 0, "model.heads", "dim must be divisible by heads"),
            (m.verb_layers >= 1, "model.verb_layers", "must be >= 1"),
            (m.role_layers >= 1, "model.role_layers", "must be >= 1"),
            (m.iterations >= 0, "model.iterations", "must be >= 0"),
            (m.support_k >= 1, "model.support_k", "must be >= 1"),
            (m.aggregation in AGGREGATIONS, "model.aggregation", f"must be one of {AGGREGATIONS}"),
            (m.order in ORDERS, "model.order", f"must be one of {ORDERS}"),
            (m.stride >= 1, "model.stride", "must be >= 1"),
            (m.embed_dim >= 0, "model.embed_dim", "must be >= 0"),
            (0.0 <= lo.verb_smoothing < 1.0, "loss.verb_smoothing", "must lie in [0, 1)"),
            (0.0 <= lo.noun_smoothing < 1.0, "loss.noun_smoothing", "must lie in [0, 1)"),
            (t.batch_size >= 1, "train.batch_size", "must be >= 1"),
            (t.optimizer in ("sgd", "adam"), "train.optimizer", "must be 'sgd' or 'adam'"),
            (t.lr_encoder > 0 and t.lr_decoder > 0, "train.lr_encoder", "learning rates must be positive"),
            (0.0 <= t.flip_prob <= 1.0, "train.flip_prob", "must lie in [0, 1]"),
            (bool(t.scales) and all(0 < s <= 1 for s in t.scales), "train.scales", "need scales in (0, 1]"),
            (t.encoder_epochs >= 0 and t.decoder_epochs >= 0, "train.encoder_epochs", "must be >= 0"),
        ]
        for name in ("dropout_verb", "dropout_role", "dropout_decoder", "dropout_heads"):
            checks.append((0.0 <= getattr(m, name) < 1.0, f"model.{name}", "must lie in [0, 1)"))
        for f in fields(LossWeights):
            checks.append((getattr(lo.weights, f.name) >= 0, f"loss.weights.{f.name}", "must be >= 0"))
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(msg, path)
        if self.data.synth is None and not (self.data.lexicon and self.data.train):
            raise ConfigError("need data.lexicon and data.train, or a data.synth section", "data")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _paper() -> RunConfig:
    cfg = RunConfig(preset="paper")
    cfg.model = ModelConfig(dim=512, heads=8, verb_layers=6, role_layers=6, ffn_verb=2048, ffn_role=1024,
                            ffn_decoder=1024, head_hidden=1024, box_hidden=1024, dropout_verb=0.15,
                            dropout_role=0.3, dropout_decoder=0.3, dropout_heads=0.2, iterations=5,
                            support_k=5, aggregation="gated", stride=32, feature_channels=2048, max_grid=32,
                            embed_dim=256)
    cfg.train.optimizer = "sgd"
    cfg.train.lr_encoder = 0.05
    cfg.train.lr_decoder = 0.05
    cfg.train.flip_prob = 0.5
    cfg.train.scales = [0.5, 0.75, 1.0]
    return cfg


PRESETS = {"desk": RunConfig, "paper": _paper}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", "preset")
    return PRESETS[name]()


def _merge(obj, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected a mapping, got {type(doc).__name__}", path or "<root>")
    known = {f.name: f for f in fields(obj) if not f.metadata.get("internal")}
    for key, value in doc.items():
        full = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown key (expected one of {sorted(known)})", full)
        current = getattr(obj, key)
        if key == "synth" and value is None:
            setattr(obj, key, None)
        elif is_dataclass(current) or key == "synth":
            setattr(obj, key, _merge(current if current is not None else SynthConfig(), value, full))
        else:
            setattr(obj, key, _coerce(value, current, full))
    return obj


def _coerce(value, current, path: str):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"expected true/false, got {value!r}", path)
    if isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"expected a number, got {value!r}", path)
    if isinstance(current, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"expected a string, got {value!r}", path)
    if isinstance(current, list):
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return [type(current[0])(v) if current else v for v in value]
        raise ConfigError(f"expected a list of numbers, got {value!r}", path)
    return value


def from_dict(doc: dict | None, base_dir=".") -> RunConfig:
    doc = copy.deepcopy(doc or {})
    cfg = preset(doc.pop("preset", "desk"))
    cfg = _merge(cfg, doc, "")
    cfg.base_dir = str(base_dir)
    return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", text)
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {raw!r}: {exc}", key) from exc
    return key.strip().split("."), value


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for text in overrides or ():
        keys, value = parse_override(text)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        if keys == ["preset"]:
            raise ConfigError("preset cannot be overridden; set it in the file", "preset")
        _merge(cfg, nested, "")
    return cfg


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Preset, then file, then ``--set`` overrides, then ``GSR_SEED``."""
    env = os.environ if env is None else env
    if path is None:
        cfg = from_dict({})
    else:
        p = Path(path)
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", str(p)) from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", str(p)) from exc
        cfg = from_dict(doc, p.resolve().parent)
    apply_overrides(cfg, overrides)
    seed = env.get("GSR_SEED")
    if seed not in (None, ""):
        try:
            cfg.seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"GSR_SEED={seed!r} is not an integer", "seed") from exc
    return cfg.validate()
