"""YAML run configuration: one frozen dataclass per section, validated on load."""

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .baselines import BASELINE_KINDS
from .core.functional import KL_CONVENTIONS
from .data import OOD_KINDS
from .errors import ConfigError
from .models import ZOO
from .unlearning import AuxMode
from .utils import canonical_json, sha256_bytes
from .watermark import FIXED_CLASS_TAGS, SchemeTag

ATTACK_MODES = ("basic", "improved")


def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {message}")


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synth"
    num_classes: int = 10
    shape: list = field(default_factory=lambda: [1, 12, 12])
    stds: float = 0.35
    separation: float = 0.6
    train_size: int = 4000
    test_size: int = 1000
    aux_size: int = 1000
    transfer_size: int = 2000
    data_dir: Optional[str] = None

    def validate(self):
        _require(self.source in ("synth", "mnist"), "dataset.source", f"'{self.source}' is not synth|mnist")
        _require(self.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        _require(len(self.shape) == 3 and all(int(s) >= 1 for s in self.shape), "dataset.shape", "must be [C, H, W]")
        for key in ("train_size", "test_size", "aux_size", "transfer_size"):
            _require(getattr(self, key) >= 1, f"dataset.{key}", "must be >= 1")


@dataclass(frozen=True)
class ArchSection:
    name: str = "small_convnet"
    options: dict = field(default_factory=dict)

    def validate(self):
        _require(self.name in ZOO, "arch.name", f"unknown architecture, choose from {sorted(ZOO)}")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.05
    optimizer: str = "sgd"

    def validate(self):
        _require(self.epochs >= 0, "train.epochs", "must be >= 0")
        _require(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        _require(self.lr > 0, "train.lr", "must be positive")
        _require(self.optimizer in ("sgd", "adam"), "train.optimizer", "must be sgd|adam")


@dataclass(frozen=True)
class SchemeSection:
    tag: str = "content"
    target_class: Optional[int] = None
    size: int = 100
    noise_sigma: float = 0.3
    ood_kind: str = "gratings"

    def validate(self):
        tags = [t.value for t in SchemeTag]
        _require(self.tag in tags, "scheme.tag", f"'{self.tag}' not in {tags}")
        _require(self.size >= 1, "scheme.size", "must be >= 1")
        _require(self.ood_kind in OOD_KINDS, "scheme.ood_kind", f"choose from {sorted(OOD_KINDS)}")
        _require(self.noise_sigma >= 0, "scheme.noise_sigma", "must be >= 0")


@dataclass(frozen=True)
class EmbedSection:
    epochs: int = 5
    batch_size: int = 64
    wm_batch_size: Optional[int] = None
    lr: float = 0.05
    optimizer: str = "sgd"

    def validate(self):
        _require(self.epochs >= 0, "embed.epochs", "must be >= 0")
        _require(self.batch_size >= 1, "embed.batch_size", "must be >= 1")
        _require(self.wm_batch_size is None or self.wm_batch_size >= 1, "embed.wm_batch_size", "must be >= 1")
        _require(self.lr > 0, "embed.lr", "must be positive")
        _require(self.optimizer in ("sgd", "adam"), "embed.optimizer", "must be sgd|adam")


@dataclass(frozen=True)
class InversionSection:
    samples_per_class: int = 250
    alpha_l2: float = 0.01
    alpha_tv: float = 0.03
    alpha_bn: float = 0.1
    steps: int = 2000
    lr: float = 0.1
    save_png: bool = False

    def validate(self):
        _require(self.samples_per_class >= 2, "inversion.samples_per_class", "must be >= 2")
        _require(self.steps >= 0, "inversion.steps", "must be >= 0")
        _require(self.lr > 0, "inversion.lr", "must be positive")
        for key in ("alpha_l2", "alpha_tv", "alpha_bn"):
            _require(getattr(self, key) >= 0, f"inversion.{key}", "must be >= 0")


@dataclass(frozen=True)
class NoiseSection:
    input_sigma: float = 1.0
    param_sigma: float = 0.03
    trials: int = 100

    def validate(self):
        _require(self.input_sigma >= 0, "noise.input_sigma", "must be >= 0")
        _require(self.param_sigma >= 0, "noise.param_sigma", "must be >= 0")
        _require(self.trials >= 1, "noise.trials", "must be >= 1")


@dataclass(frozen=True)
class DetectionSection:
    threshold: float = 0.4

    def validate(self):
        _require(0.0 <= self.threshold < 1.0, "detection.threshold", "must lie in [0, 1)")


@dataclass(frozen=True)
class SplitSection:
    layer: Optional[int] = None
    beta: float = 0.95
    gamma: float = 0.5

    def validate(self):
        _require(0.0 < self.beta < 1.0, "split.beta", "must lie in (0, 1)")
        _require(0.0 < self.gamma < 1.0, "split.gamma", "must lie in (0, 1)")


@dataclass(frozen=True)
class UnlearnSection:
    epochs: int = 10
    batch_size: int = 128
    lr: Optional[float] = None
    alpha_kl: float = 15.0
    kl_convention: str = "target_pred"
    update_bn: bool = True

    def validate(self):
        _require(self.epochs >= 0, "unlearn.epochs", "must be >= 0")
        _require(self.batch_size >= 1, "unlearn.batch_size", "must be >= 1")
        _require(self.lr is None or self.lr > 0, "unlearn.lr", "must be positive")
        _require(self.alpha_kl >= 0, "unlearn.alpha_kl", "must be >= 0")
        _require(self.kl_convention in KL_CONVENTIONS, "unlearn.kl_convention", f"choose from {KL_CONVENTIONS}")


@dataclass(frozen=True)
class AttackSection:
    mode: str = "improved"
    settings: list = field(default_factory=lambda: ["in-distribution"])
    skip_split: bool = False

    def validate(self):
        _require(self.mode in ATTACK_MODES, "attack.mode", f"choose from {ATTACK_MODES}")
        modes = [m.value for m in AuxMode]
        _require(len(self.settings) >= 1, "attack.settings", "needs at least one setting")
        for s in self.settings:
            _require(s in modes, "attack.settings", f"'{s}' not in {modes}")


@dataclass(frozen=True)
class BaselinesSection:
    kinds: list = field(default_factory=list)
    prune_ratio: float = 0.8
    neuron_ratio: float = 0.2
    lr: float = 0.05
    lr_decay: float = 0.9
    finetune_lr: float = 0.01
    l2: float = 0.01
    epochs: int = 10
    batch_size: int = 128

    def validate(self):
        for k in self.kinds:
            _require(k in BASELINE_KINDS, "baselines.kinds", f"'{k}' not in {BASELINE_KINDS}")
        for key in ("prune_ratio", "neuron_ratio"):
            _require(0.0 <= getattr(self, key) <= 1.0, f"baselines.{key}", "must lie in [0, 1]")
        _require(self.l2 >= 0, "baselines.l2", "must be >= 0")
        _require(self.lr > 0 and self.finetune_lr > 0, "baselines.lr", "must be positive")


@dataclass(frozen=True)
class ThresholdSection:
    null_models: int = 20

    def validate(self):
        _require(self.null_models >= 2, "threshold.null_models", "must be >= 2")


SECTIONS = {
    "dataset": DatasetSection,
    "arch": ArchSection,
    "train": TrainSection,
    "scheme": SchemeSection,
    "embed": EmbedSection,
    "inversion": InversionSection,
    "noise": NoiseSection,
    "detection": DetectionSection,
    "split": SplitSection,
    "unlearn": UnlearnSection,
    "attack": AttackSection,
    "baselines": BaselinesSection,
    "threshold": ThresholdSection,
}


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    dataset: DatasetSection = DatasetSection()
    arch: ArchSection = ArchSection()
    train: TrainSection = TrainSection()
    scheme: SchemeSection = SchemeSection()
    embed: EmbedSection = EmbedSection()
    inversion: InversionSection = InversionSection()
    noise: NoiseSection = NoiseSection()
    detection: DetectionSection = DetectionSection()
    split: SplitSection = SplitSection()
    unlearn: UnlearnSection = UnlearnSection()
    attack: AttackSection = AttackSection()
    baselines: BaselinesSection = BaselinesSection()
    threshold: ThresholdSection = ThresholdSection()
    seeds: list = field(default_factory=lambda: [0])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode("utf-8"))

    def with_overrides(self, scheme: Optional[str] = None, setting: Optional[str] = None, seeds: Optional[list] = None) -> "RunConfig":
        """Copy with CLI overrides applied and re-validated."""
        data = self.to_dict()
        if scheme is not None:
            data["scheme"]["tag"] = scheme
            if SchemeTag(scheme) not in FIXED_CLASS_TAGS:
                data["scheme"]["target_class"] = None
        if setting is not None:
            data["attack"]["settings"] = [setting]
        if seeds is not None:
            data["seeds"] = list(seeds)
        return parse_run_config(data)


def _check_type(value: Any, expected: Any, where: str) -> Any:
    origin = typing.get_origin(expected)
    if origin is typing.Union:
        args = [a for a in typing.get_args(expected) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], where)
    if expected is bool:
        _require(isinstance(value, bool), where, f"expected a boolean, got {value!r}")
        return value
    if expected is int:
        _require(isinstance(value, int) and not isinstance(value, bool), where, f"expected an integer, got {value!r}")
        return value
    if expected is float:
        _require(isinstance(value, (int, float)) and not isinstance(value, bool), where, f"expected a number, got {value!r}")
        return float(value)
    if expected is str:
        _require(isinstance(value, str), where, f"expected a string, got {value!r}")
        return value
    if expected is list:
        _require(isinstance(value, list), where, f"expected a list, got {value!r}")
        return value
    if expected is dict:
        _require(isinstance(value, dict), where, f"expected a mapping, got {value!r}")
        return value
    return value


def _parse_section(name: str, cls, data: Any):
    if data is None:
        data = {}
    _require(isinstance(data, dict), name, "section must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    _require(not unknown, f"{name}.{unknown[0] if unknown else ''}", "unknown key")
    values = {key: _check_type(value, hints[key], f"{name}.{key}") for key, value in data.items()}
    section = cls(**values)
    section.validate()
    return section


def parse_run_config(data: dict, name: Optional[str] = None) -> RunConfig:
    """Validate a parsed YAML mapping into a RunConfig; errors name ``section.key``."""
    _require(isinstance(data, dict), "config", "top level must be a mapping")
    allowed = set(SECTIONS) | {"name", "seeds"}
    unknown = sorted(set(data) - allowed)
    _require(not unknown, unknown[0] if unknown else "", "unknown section")
    sections = {key: _parse_section(key, cls, data.get(key)) for key, cls in SECTIONS.items()}
    seeds = data.get("seeds", [0])
    _require(isinstance(seeds, list) and len(seeds) >= 1, "seeds", "must be a nonempty list")
    for s in seeds:
        _require(isinstance(s, int) and not isinstance(s, bool) and s >= 0, "seeds", f"'{s}' is not a nonnegative integer")
    run_name = data.get("name", name or "run")
    _require(isinstance(run_name, str) and run_name != "", "name", "must be a nonempty string")
    scheme = sections["scheme"]
    if scheme.target_class is not None:
        _require(SchemeTag(scheme.tag) in FIXED_CLASS_TAGS, "scheme.target_class", f"'{scheme.tag}' has no fixed target")
        _require(0 <= scheme.target_class < sections["dataset"].num_classes, "scheme.target_class", "outside 0..C-1")
    attack = sections["attack"]
    if attack.mode == "basic":
        _require(AuxMode.DATA_FREE.value not in attack.settings, "attack.settings", "basic unlearning has no data-free setting")
    if sections["dataset"].source == "mnist":
        _require(sections["dataset"].shape == [1, 28, 28], "dataset.shape", "MNIST images are [1, 28, 28]")
    return RunConfig(name=run_name, seeds=list(seeds), **sections)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    default_name = os.path.splitext(os.path.basename(path))[0]
    return parse_run_config(data, name=default_name)
