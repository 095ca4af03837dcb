"""Watermark sets for the supported schemes and watermark-aware training."""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import read_container, write_container
from .data import Dataset, ood_images
from .errors import DatasetError, LabelError
from .models import ArchSpec, Model, build_model
from .training import FitConfig, LossTerm, accuracy, fit, iterate_minibatches
from .utils import derive_seed

logger = logging.getLogger(__name__)


class SchemeTag(str, enum.Enum):
    CONTENT = "content"
    NOISE = "noise"
    UNRELATED = "unrelated"
    ABSTRACT_OOD = "abstract_ood"
    MISLABELED = "mislabeled"


FIXED_CLASS_TAGS = (SchemeTag.CONTENT, SchemeTag.NOISE, SchemeTag.UNRELATED)

# 5x7 block letter "W"
GLYPH = np.array(
    [
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 1, 0, 1],
        [1, 0, 1, 0, 1],
        [1, 1, 0, 1, 1],
        [1, 0, 0, 0, 1],
    ],
    dtype=bool,
)


@dataclass(frozen=True)
class WatermarkScheme:
    tag: SchemeTag
    target_class: Optional[int] = None
    noise_sigma: float = 0.3
    ood_kind: str = "gratings"

    def __post_init__(self):
        object.__setattr__(self, "tag", SchemeTag(self.tag))
        if self.is_fixed and self.target_class is None:
            raise ValueError(f"scheme '{self.tag.value}' needs a fixed target class")
        if not self.is_fixed and self.target_class is not None:
            raise ValueError(f"scheme '{self.tag.value}' draws per-sample targets; no target class allowed")

    @property
    def is_fixed(self) -> bool:
        return self.tag in FIXED_CLASS_TAGS

    @property
    def target_rule(self) -> str:
        if self.is_fixed:
            return "fixed"
        return "random" if self.tag == SchemeTag.ABSTRACT_OOD else "random-wrong"

    def to_dict(self) -> dict:
        return {
            "tag": self.tag.value,
            "target_class": self.target_class,
            "noise_sigma": self.noise_sigma,
            "ood_kind": self.ood_kind,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WatermarkScheme":
        return cls(**data)


@dataclass
class WatermarkSet:
    samples: np.ndarray
    targets: np.ndarray
    scheme: WatermarkScheme
    source_indices: Optional[np.ndarray] = None
    true_labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    @property
    def fixed_target(self) -> Optional[int]:
        return self.scheme.target_class


def glyph_scale(shape: tuple) -> int:
    return max(1, min(shape[1] // 14, shape[2] // 10))


def pattern_mask(scheme: WatermarkScheme, shape: tuple) -> np.ndarray:
    """Boolean [H, W] region carrying the trigger (Content: glyph pixels; others: everything)."""
    _, h, w = shape
    if scheme.tag != SchemeTag.CONTENT:
        return np.ones((h, w), dtype=bool)
    s = glyph_scale(shape)
    glyph = np.kron(GLYPH, np.ones((s, s), dtype=bool))
    gh, gw = min(glyph.shape[0], h), min(glyph.shape[1], w)
    mask = np.zeros((h, w), dtype=bool)
    top, left = max(0, h - gh - 1), max(0, w - gw - 1)
    mask[top:top + gh, left:left + gw] = glyph[:gh, :gw]
    return mask


def _noise_pattern(shape: tuple, sigma: float, seed: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, "noise-pattern")).normal(0.0, sigma, size=shape)


def _pick_sources(clean: Dataset, exclude: Optional[int], size: int, rng) -> np.ndarray:
    pool = np.flatnonzero(clean.labels != exclude) if exclude is not None else np.arange(len(clean))
    if size > pool.size:
        raise DatasetError(f"watermark size {size} exceeds the {pool.size} available source samples")
    return np.sort(rng.choice(pool, size=size, replace=False))


def make_watermark_set(scheme: WatermarkScheme, clean: Dataset, size: int, seed: int) -> WatermarkSet:
    """Craft ``size`` watermark samples and their target labels, deterministically per seed."""
    if size < 1:
        raise DatasetError("watermark set needs at least one sample")
    C = clean.num_classes
    if scheme.is_fixed and not 0 <= scheme.target_class < C:
        raise LabelError(f"target class {scheme.target_class} outside 0..{C - 1}")
    rng = np.random.default_rng(derive_seed(seed, "watermark", scheme.tag.value))
    shape = clean.shape
    source, true_labels = None, None

    if scheme.tag in (SchemeTag.CONTENT, SchemeTag.NOISE):
        source = _pick_sources(clean, scheme.target_class, size, rng)
        samples = np.array(clean.images[source])
        true_labels = clean.labels[source].copy()
        if scheme.tag == SchemeTag.CONTENT:
            samples[:, :, pattern_mask(scheme, shape)] = 1.0
        else:
            samples = np.clip(samples + _noise_pattern(shape, scheme.noise_sigma, seed), 0.0, 1.0)
        targets = np.full(size, scheme.target_class, dtype=np.int64)
    elif scheme.tag == SchemeTag.UNRELATED:
        samples = ood_images(scheme.ood_kind, size, shape, derive_seed(seed, "unrelated"))
        targets = np.full(size, scheme.target_class, dtype=np.int64)
    elif scheme.tag == SchemeTag.ABSTRACT_OOD:
        samples = ood_images("shapes", size, shape, derive_seed(seed, "abstract"))
        targets = rng.integers(0, C, size=size)
        while size >= 2 and C > 1 and np.all(targets == targets[0]):
            targets = rng.integers(0, C, size=size)
    else:
        source = _pick_sources(clean, None, size, rng)
        samples = np.array(clean.images[source])
        true_labels = clean.labels[source].copy()
        targets = (true_labels + rng.integers(1, C, size=size)) % C
        while size >= 2 and np.all(targets == targets[0]):
            targets = (true_labels + rng.integers(1, C, size=size)) % C

    return WatermarkSet(samples, targets.astype(np.int64), scheme, source, true_labels)


def watermark_accuracy(model: Model, wm: WatermarkSet) -> float:
    """Eval-mode fraction of watermark samples classified as their target label."""
    return float(np.mean(model.predict(wm.samples) == wm.targets))


def save_watermark_set(wm: WatermarkSet, path: str) -> None:
    arrays = {"samples": wm.samples, "targets": wm.targets}
    if wm.source_indices is not None:
        arrays["source_indices"] = wm.source_indices
    if wm.true_labels is not None:
        arrays["true_labels"] = wm.true_labels
    write_container(path, "watermark_set", {"scheme": wm.scheme.to_dict()}, arrays)


def load_watermark_set(path: str) -> WatermarkSet:
    meta, arrays = read_container(path, "watermark_set")

    def as_int(key):
        return arrays[key].astype(np.int64) if key in arrays else None

    return WatermarkSet(
        arrays["samples"],
        as_int("targets"),
        WatermarkScheme.from_dict(meta["scheme"]),
        as_int("source_indices"),
        as_int("true_labels"),
    )


# -- embedding ---------------------------------------------------------------------


@dataclass
class EmbedConfig:
    epochs: int = 5
    batch_size: int = 64
    wm_batch_size: Optional[int] = None
    lr: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.wm_batch_size is None:
            self.wm_batch_size = -(-self.batch_size // 8)
        if self.wm_batch_size < 1:
            raise ValueError("watermark batch size must be >= 1")


@dataclass
class EmbedResult:
    model: Model
    history: list
    wm_counts: list = field(default_factory=list)
    clean_accuracy: float = 0.0
    watermark_accuracy: float = 0.0


def _embed_schedule(batch_size: int, wm_batch: int):
    def schedule(sizes, rng):
        n_clean, n_wm = sizes
        steps = []
        wm_order = rng.permutation(n_wm)
        cursor = 0
        for normal in iterate_minibatches(n_clean, batch_size, rng):
            picks = []
            for _ in range(wm_batch):
                if cursor == n_wm:
                    wm_order, cursor = rng.permutation(n_wm), 0
                picks.append(wm_order[cursor])
                cursor += 1
            steps.append([normal, np.array(picks, dtype=np.int64)])
        return steps

    return schedule


def embed(
    arch: ArchSpec, clean: Dataset, wm: WatermarkSet, cfg: EmbedConfig, seed: Optional[int] = None
) -> EmbedResult:
    """Train a fresh model where every batch concatenates normal data with a watermark minibatch."""
    if len(wm) == 0:
        raise DatasetError("cannot embed an empty watermark set")
    clean.require_nonempty("clean training set")
    if tuple(wm.samples.shape[1:]) != tuple(arch.input_shape) or clean.shape != tuple(arch.input_shape):
        raise DatasetError(f"data shapes {clean.shape} / {wm.samples.shape[1:]} do not match {arch.input_shape}")
    seed = cfg.seed if seed is None else seed
    model = build_model(arch, derive_seed(seed, "init"))
    terms = [
        LossTerm("normal", clean.images, labels=clean.labels),
        LossTerm("watermark", wm.samples, labels=wm.targets),
    ]
    fit_cfg = FitConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer, seed=seed)
    result = fit(model, terms, fit_cfg, schedule=_embed_schedule(cfg.batch_size, cfg.wm_batch_size))
    model = result.model
    model.metadata.update({"seed": seed, "epochs": cfg.epochs, "scheme": wm.scheme.tag.value})
    out = EmbedResult(
        model=model,
        history=[entry["loss"] for entry in result.history],
        wm_counts=[step["watermark"] for step in result.batch_log],
        clean_accuracy=accuracy(model, clean),
        watermark_accuracy=watermark_accuracy(model, wm),
    )
    logger.info(
        "embedded %s watermark: train acc %.4f, watermark acc %.4f",
        wm.scheme.tag.value, out.clean_accuracy, out.watermark_accuracy,
    )
    return out
