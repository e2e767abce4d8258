"""Run configuration: nested dataclasses, JSON round trip and strict dotted overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    width: int = 8
    depth: int = 3
    seed: int = 0


@dataclass
class LossConfig:
    # per-term weights; setting one to 0 disables that term ("map" follows "cluster" unless set)
    mix: float = 1.0
    cluster: float = 1.0
    ac: float = 1.0
    scribble: float = 1.0
    category: float = 1.0
    map: float | None = None
    tau: float = 0.1
    w: float = 0.05
    eps: float = 0.05
    niters: int = 3
    num_prototypes: int = 16
    detach_mix_target: bool = True
    per_channel_mix: bool = False


@dataclass
class MixConfig:
    alpha: float = 1.0
    max_angle: float = 15.0
    box_area: list = field(default_factory=lambda: [0.1, 0.4])
    use_box: bool = True
    use_rotation: bool = True
    use_inter: bool = True
    global_count: int = 4
    local_count: int = 6
    global_scale: list = field(default_factory=lambda: [0.6, 1.0])
    local_scale: list = field(default_factory=lambda: [0.2, 0.5])
    pairs_per_crop: int = 3


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainerConfig:
    epochs: int = 1
    steps_per_epoch: int | None = None
    batch_size: int = 8
    lr: float = 1e-4
    lr_schedule: str = "constant"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scribble_sources: int = 5
    scribbled_fraction: float | None = None
    seed: int = 0
    checkpoint_every: int = 0
    val_every: int = 1
    deterministic: bool = True
    max_train_samples: int | None = None


@dataclass
class TrainConfig:
    dataset: str = "data"
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t = self.trainer
        if t.lr <= 0:
            raise ConfigError("trainer.lr must be positive")
        if t.batch_size < 2 or t.batch_size % 2:
            raise ConfigError("trainer.batch_size must be an even number >= 2 (inter-mix needs pairs)")
        if t.epochs < 0:
            raise ConfigError("trainer.epochs must be non-negative")
        if t.scribble_sources < 0:
            raise ConfigError("trainer.scribble_sources must be non-negative")
        if t.lr_schedule != "constant":
            raise ConfigError("only the constant learning-rate schedule is implemented")
        if t.optimizer.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {t.optimizer.kind!r}")
        for name in ("mix", "cluster", "ac", "scribble", "category"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} weight must be non-negative")
        if self.loss.num_prototypes < 2:
            raise ConfigError("loss.num_prototypes must be >= 2")

    def loss_weights(self) -> dict:
        l = self.loss
        return {
            "mix": l.mix, "cluster": l.cluster, "ac": l.ac,
            "map": l.cluster if l.map is None else l.map,
            "scribble": l.scribble, "category": l.category,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:10]

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, overrides: list[str] | dict) -> "TrainConfig":
        doc = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
        for key, value in items:
            _set_path(doc, key, value)
        return TrainConfig.from_dict(doc)


def _split(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_path(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        if i == len(parts) - 1:
            node[p] = value
        else:
            node = node[p]


def _build(cls, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)
