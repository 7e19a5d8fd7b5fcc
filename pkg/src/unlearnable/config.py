"""Declarative experiment configuration (YAML, versioned).

Every section is a dataclass; loading rejects unknown keys and wrong types
with the dotted path of the offending field. Defaults carry the full-scale
hyperparameters; ``desk`` presets shrink them for CPU-scale runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AUGMENTATIONS, AugmentConfig
from .emn import EmnSpec
from .encrypt import PerturbationBudget
from .evaluation import DenoiserSpec
from .gan import GanTrainSpec
from .models import CLASSIFIER_ARCHS, ArchSpec, TrainSpec

CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or an image-folder root
    test_root: str | None = None
    image_size: list[int] = field(default_factory=lambda: [32, 32])
    channels: int = 3
    class_count: int = 2
    per_class: int = 200
    test_per_class: int = 200
    separation: float = 1.0
    amplitude: float = 0.12
    noise_std: float = 0.12
    cast: float = 0.2
    p: float = 1.0  # fraction of the training pool treated as D_in
    seed: int = 0


@dataclass
class ModelSection:
    classifier: str = "resnet18"
    capacity_scale: float = 1.0
    mean: list[float] = field(default_factory=lambda: [0.5])
    std: list[float] = field(default_factory=lambda: [0.25])
    generator_width: int | None = None
    discriminator_width: int | None = None


@dataclass
class TrainSection:
    lr: float = 0.025
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    epochs: int = 90
    batch_size: int = 128
    weight_decay: float = 0.0

    def to_spec(self, seed: int) -> TrainSpec:
        return TrainSpec(lr=self.lr, momentum=self.momentum, lr_schedule=self.lr_schedule, epochs=self.epochs,
                         batch_size=self.batch_size, seed=seed, weight_decay=self.weight_decay)


@dataclass
class GanSection:
    lr: float = 0.025
    momentum: float = 0.9
    disc_lr: float = 0.025
    epochs: int = 200
    batch_size: int = 128
    alpha: float = 0.001
    c: float | None = None
    use_generator_adversarial_term: bool = True
    adversarial_weight: float = 1.0


@dataclass
class EmnSection:
    inner_lr: float = 0.003
    inner_steps: int = 20
    outer_lr: float = 0.003
    outer_steps: int = 10
    outer_momentum: float = 0.9
    stop_train_error: float = 0.01
    max_rounds: int = 100
    batch_size: int = 128
    signed: bool = True


@dataclass
class VictimSection(TrainSection):
    backbones: list[str] = field(default_factory=lambda: ["resnet18"])
    capacity_scale: float = 1.0
    augmentation: str = "none"


@dataclass
class DenoiserSection:
    width: int = 64
    depth: int = 17
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 128


@dataclass
class AugmentSection:
    pad: int = 4
    cutout_length: int = 16
    mix_concentration: float = 1.0
    contrast: float = 0.3
    brightness: float = 0.3
    sharpness: float = 0.5
    rotation_degrees: float = 15.0


@dataclass
class BudgetSection:
    epsilon: float | None = None  # None: 8/255 up to 32px images, 16/255 above
    quantize: bool = False


@dataclass
class PatchSection:
    patch_size: int = 32
    colors_file: str | None = None
    class_noise_seed: int = 0


@dataclass
class OutputSection:
    root: str | None = None


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    name: str = "experiment"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainSection = field(default_factory=TrainSection)
    gan: GanSection = field(default_factory=GanSection)
    emn: EmnSection = field(default_factory=EmnSection)
    victim: VictimSection = field(default_factory=VictimSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    budget: BudgetSection = field(default_factory=BudgetSection)
    patch: PatchSection = field(default_factory=PatchSection)
    outputs: OutputSection = field(default_factory=OutputSection)

    # -- derived specs -------------------------------------------------------
    @property
    def image_shape(self) -> tuple[int, int, int]:
        h, w = self.data.image_size
        return (self.data.channels, h, w)

    @property
    def epsilon(self) -> float:
        if self.budget.epsilon is not None:
            return self.budget.epsilon
        return 8 / 255 if max(self.data.image_size) <= 32 else 16 / 255

    def budget_spec(self) -> PerturbationBudget:
        return PerturbationBudget(self.epsilon, self.gan.c)

    def classifier_spec(self) -> ArchSpec:
        m = self.model
        return ArchSpec(m.classifier, self.image_shape, self.data.class_count, m.capacity_scale,
                        tuple(m.mean), tuple(m.std))

    def victim_spec(self, backbone: str | None = None) -> ArchSpec:
        m = self.model
        return ArchSpec(backbone or self.victim.backbones[0], self.image_shape, self.data.class_count,
                        self.victim.capacity_scale, tuple(m.mean), tuple(m.std))

    def gan_spec(self, seed: int | None = None) -> GanTrainSpec:
        g, seed = self.gan, self.seed if seed is None else seed
        return GanTrainSpec(
            gen_train=TrainSpec(lr=g.lr, momentum=g.momentum, epochs=g.epochs, batch_size=g.batch_size, seed=seed),
            disc_train=TrainSpec(lr=g.disc_lr, momentum=g.momentum, lr_schedule="constant", epochs=g.epochs,
                                 batch_size=g.batch_size, seed=seed),
            alpha=g.alpha, c=g.c, epsilon=self.epsilon, epochs=g.epochs,
            use_generator_adversarial_term=g.use_generator_adversarial_term,
            adversarial_weight=g.adversarial_weight, batch_size=g.batch_size, seed=seed,
            generator_width=self.model.generator_width, discriminator_width=self.model.discriminator_width,
        )

    def emn_spec(self, seed: int | None = None) -> EmnSpec:
        return EmnSpec(**dataclasses.asdict(self.emn), epsilon=self.epsilon, seed=self.seed if seed is None else seed)

    def denoiser_spec(self, seed: int | None = None) -> DenoiserSpec:
        return DenoiserSpec(**dataclasses.asdict(self.denoiser), seed=self.seed if seed is None else seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**dataclasses.asdict(self.augment))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# -- loading ---------------------------------------------------------------------

def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw, path: str = ""):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {cfg.version} (expected {CONFIG_VERSION})")
    d = cfg.data
    if len(d.image_size) != 2 or min(d.image_size) < 1:
        raise ConfigError("data.image_size", "expected [height, width] with positive entries")
    if not 0 < d.p <= 1:
        raise ConfigError("data.p", "must lie in (0, 1]")
    if d.class_count < 2:
        raise ConfigError("data.class_count", "need at least two classes")
    if cfg.model.classifier not in CLASSIFIER_ARCHS:
        raise ConfigError("model.classifier", f"unknown classifier {cfg.model.classifier!r}")
    for i, b in enumerate(cfg.victim.backbones):
        if b not in CLASSIFIER_ARCHS:
            raise ConfigError(f"victim.backbones[{i}]", f"unknown backbone {b!r}")
    if cfg.victim.augmentation not in AUGMENTATIONS:
        raise ConfigError("victim.augmentation", f"unknown augmentation {cfg.victim.augmentation!r}")
    # surface the owning modules' own checks with a field path
    for section, build in (("budget.epsilon", cfg.budget_spec), ("pretrain", lambda: cfg.pretrain.to_spec(cfg.seed)),
                           ("victim", lambda: cfg.victim.to_spec(cfg.seed)),
                           ("gan", cfg.gan_spec), ("emn", cfg.emn_spec),
                           ("model", cfg.classifier_spec)):
        try:
            build()
        except ValueError as e:
            raise ConfigError(section, str(e)) from e


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError("", f"cannot parse {path}: {e}") from e
    return from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def desk_config(seed: int = 0) -> ExperimentConfig:
    """CPU-scale preset on synthetic 16px data used by the acceptance suite."""
    raw = {
        "name": "desk",
        "seed": seed,
        "data": {"image_size": [16, 16], "class_count": 2, "per_class": 200, "test_per_class": 200, "seed": seed},
        "model": {"classifier": "smallcnn", "generator_width": 16},
        "pretrain": {"epochs": 30, "batch_size": 32},
        "gan": {"epochs": 50, "batch_size": 32, "use_generator_adversarial_term": False},
        "emn": {"batch_size": 64, "max_rounds": 30},
        "victim": {"epochs": 30, "batch_size": 32, "backbones": ["smallcnn"]},
        "denoiser": {"width": 16, "depth": 4, "epochs": 30, "batch_size": 32},
        "budget": {"epsilon": 16 / 255},
        "patch": {"patch_size": 4},
    }
    return from_dict(raw)

