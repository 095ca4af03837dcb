"""Watermark unlearning objectives and the auxiliary-data settings they run under.

Every objective finetunes a copy of the watermarked model through
``training.fit``; the true watermark set is never read here.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import DatasetError, LabelError, UnsupportedSettingError
from .inversion import RecoveredBatch
from .models import Model
from .training import FitConfig, LossTerm, fit
from .utils import derive_seed

logger = logging.getLogger(__name__)

Monitor = Callable[[int, Model], dict]


class AuxMode(str, enum.Enum):
    IN_DISTRIBUTION = "in-distribution"
    TRANSFER = "transfer"
    DATA_FREE = "data-free"


@dataclass(frozen=True)
class AuxiliaryData:
    """Labeled samples available to the attacker; none in the data-free setting."""

    mode: AuxMode
    images: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", AuxMode(self.mode))
        if self.mode == AuxMode.DATA_FREE:
            if self.images is not None or self.labels is not None:
                raise DatasetError("data-free auxiliary data carries no samples")
            return
        if self.images is None or self.labels is None or len(self.images) == 0:
            raise DatasetError(f"{self.mode.value} auxiliary data needs labeled samples")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} auxiliary images but {len(self.labels)} labels")

    @classmethod
    def in_distribution(cls, dataset: Dataset) -> "AuxiliaryData":
        return cls(AuxMode.IN_DISTRIBUTION, dataset.images, dataset.labels)

    @classmethod
    def data_free(cls) -> "AuxiliaryData":
        return cls(AuxMode.DATA_FREE)

    @property
    def is_data_free(self) -> bool:
        return self.mode == AuxMode.DATA_FREE

    def __len__(self) -> int:
        return 0 if self.images is None else int(len(self.images))

    def terms(self) -> list[LossTerm]:
        if self.is_data_free:
            return []
        return [LossTerm("aux", self.images, labels=self.labels)]


def pseudo_label(model: Model, samples: np.ndarray) -> AuxiliaryData:
    """Label unlabeled transfer samples with the frozen model's argmax predictions."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise DatasetError("cannot pseudo-label an empty sample set")
    return AuxiliaryData(AuxMode.TRANSFER, samples, model.predict(samples))


@dataclass
class UnlearnConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: Optional[float] = None
    alpha_kl: float = 15.0
    kl_convention: str = "target_pred"
    update_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr is not None and self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.alpha_kl < 0:
            raise ValueError(f"alpha_kl must be nonnegative, got {self.alpha_kl}")

    def resolved_lr(self, data_free: bool) -> float:
        if self.lr is not None:
            return self.lr
        return 0.003 if data_free else 0.01


def _fit_config(cfg: UnlearnConfig, data_free: bool) -> FitConfig:
    return FitConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.resolved_lr(data_free),
        optimizer="sgd",
        seed=cfg.seed,
        update_bn=cfg.update_bn,
        kl_convention=cfg.kl_convention,
    )


def _run(model: Model, terms: list[LossTerm], cfg: UnlearnConfig, data_free: bool, monitor: Optional[Monitor], what: str) -> Model:
    fit_cfg = _fit_config(cfg, data_free)
    logger.info(
        "%s: terms %s, lr %.4g, KL convention %s, update_bn=%s",
        what, {t.name: len(t) for t in terms}, fit_cfg.lr, cfg.kl_convention, cfg.update_bn,
    )
    result = fit(model, terms, fit_cfg, monitor=monitor)
    return result.model


def unlearn_basic(
    model: Model,
    recovered: Sequence[RecoveredBatch],
    aux: AuxiliaryData,
    cfg: UnlearnConfig = UnlearnConfig(),
    monitor: Optional[Monitor] = None,
) -> Model:
    """CE on auxiliary data plus alpha_kl * KL(recovered prediction, uniform) over every class batch."""
    if aux.is_data_free:
        raise UnsupportedSettingError("basic unlearning requires auxiliary data")
    C = model.num_classes
    terms = aux.terms()
    for batch in recovered:
        uniform = np.full((len(batch), C), 1.0 / C)
        terms.append(LossTerm(f"kl/{batch.cls}", batch.samples, soft=uniform, weight=cfg.alpha_kl))
    return _run(model, terms, cfg, False, monitor, "basic unlearning")


def random_wrong_labels(n: int, num_classes: int, exclude: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform labels over 0..C-1 without ``exclude``."""
    if num_classes < 2:
        raise LabelError("random wrong labels need at least two classes")
    r = rng.integers(0, num_classes - 1, size=n)
    return r + (r >= exclude)


def unlearn_fixed(
    model: Model,
    proxy_wmk: np.ndarray,
    proxy_nor: np.ndarray,
    s0: int,
    aux: Optional[AuxiliaryData] = None,
    cfg: UnlearnConfig = UnlearnConfig(),
    monitor: Optional[Monitor] = None,
) -> Model:
    """Keep proxy normal data on ``s0`` and push proxy watermark data to fixed random wrong labels.

    The auxiliary term is optional; without it the run is data-free.
    """
    C = model.num_classes
    if not 0 <= s0 < C:
        raise LabelError(f"target class {s0} outside 0..{C - 1}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "rand-labels", s0))
    proxy_wmk = np.asarray(proxy_wmk, dtype=np.float64)
    proxy_nor = np.asarray(proxy_nor, dtype=np.float64)
    if len(proxy_wmk) == 0:
        raise DatasetError(f"class {s0}: no proxy watermark samples to unlearn")
    rand = random_wrong_labels(len(proxy_wmk), C, s0, rng)
    data_free = aux is None or aux.is_data_free
    terms = [] if aux is None else aux.terms()
    terms.append(LossTerm("proxy_normal", proxy_nor, labels=np.full(len(proxy_nor), s0)))
    terms.append(LossTerm("proxy_watermark", proxy_wmk, labels=rand))
    return _run(model, terms, cfg, data_free, monitor, f"fixed-class unlearning (s0={s0})")


def skip_split(
    model: Model,
    batch: RecoveredBatch,
    aux: Optional[AuxiliaryData] = None,
    cfg: UnlearnConfig = UnlearnConfig(),
    monitor: Optional[Monitor] = None,
) -> Model:
    """Fixed-class unlearning with the whole recovered target batch treated as proxy watermark data."""
    return unlearn_fixed(model, batch.samples, batch.samples[:0], batch.cls, aux, cfg, monitor)


def nonfixed_targets(num_classes: int, least: int, second: int) -> np.ndarray:
    """Per-class unlearning target: the least-likely class, or the runner-up for that class itself."""
    targets = np.full(num_classes, least, dtype=np.int64)
    targets[least] = second
    return targets


def unlearn_nonfixed(
    model: Model,
    proxy_wmk: dict[int, np.ndarray],
    least: int,
    second: int,
    aux: AuxiliaryData,
    cfg: UnlearnConfig = UnlearnConfig(),
    monitor: Optional[Monitor] = None,
) -> Model:
    """CE on auxiliary data plus CE of every class's proxy watermark data to the least-likely label.

    ``proxy_wmk`` maps class -> proxy watermark images; proxy normal data is
    not an input.
    """
    if aux is None or aux.is_data_free:
        raise UnsupportedSettingError("non-fixed unlearning requires auxiliary data")
    C = model.num_classes
    if least == second or not (0 <= least < C and 0 <= second < C):
        raise LabelError(f"least-likely pair ({least}, {second}) is not two distinct classes")
    targets = nonfixed_targets(C, least, second)
    terms = aux.terms()
    for c in sorted(proxy_wmk):
        images = np.asarray(proxy_wmk[c], dtype=np.float64)
        terms.append(LossTerm(f"proxy_watermark/{c}", images, labels=np.full(len(images), targets[c])))
    return _run(model, terms, cfg, False, monitor, f"non-fixed unlearning (least={least}, second={second})")


def plain_finetune(
    model: Model, aux: AuxiliaryData, cfg: UnlearnConfig = UnlearnConfig(), monitor: Optional[Monitor] = None
) -> Model:
    """Cross-entropy finetuning on auxiliary data alone, with the unlearning schedule."""
    if aux.is_data_free:
        raise UnsupportedSettingError("plain finetuning requires auxiliary data")
    return _run(model, aux.terms(), cfg, False, monitor, "plain finetuning")
