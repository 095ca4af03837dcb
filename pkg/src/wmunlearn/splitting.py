"""Neuron-level splitting of recovered batches into proxy normal and proxy watermark data."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError
from .inversion import RecoveredBatch
from .models import Model

logger = logging.getLogger(__name__)

EPS = 1e-8


def importance_scores(activations: np.ndarray) -> np.ndarray:
    """Per-neuron mean over population std (plus EPS) of activations [M, D]."""
    act = np.asarray(activations, dtype=np.float64)
    if act.ndim != 2 or act.shape[0] < 2:
        raise DatasetError(f"importance scores need [M>=2, D] activations, got {act.shape}")
    return act.mean(axis=0) / (act.std(axis=0) + EPS)


def salient_count(dim: int, beta: float) -> int:
    # (1 - 0.95) * 100 evaluates to 5.000000000000004
    return int(min(dim, max(1, math.ceil((1.0 - beta) * dim - 1e-9))))


def select_salient(scores: np.ndarray, beta: float) -> np.ndarray:
    """Indices of the top ceil((1-beta)*D) scores; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise DatasetError("select_salient needs a nonempty score vector")
    order = np.argsort(-scores, kind="stable")
    return order[:salient_count(scores.size, beta)]


def contributions(activations: np.ndarray, salient: Sequence[int]) -> np.ndarray:
    salient = np.asarray(salient, dtype=np.int64)
    if salient.size == 0:
        raise DatasetError("contributions need a nonempty salient set")
    return np.asarray(activations, dtype=np.float64)[:, salient].sum(axis=1)


@dataclass(frozen=True)
class SplitConfig:
    layer: Optional[int] = None
    beta: float = 0.95
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


@dataclass
class SplitResult:
    cls: int
    proxy_nor: np.ndarray
    proxy_wmk: np.ndarray
    contributions: np.ndarray
    salient: np.ndarray

    def to_dict(self) -> dict:
        return {
            "cls": self.cls,
            "proxy_nor": self.proxy_nor.tolist(),
            "proxy_wmk": self.proxy_wmk.tolist(),
            "contributions": self.contributions.tolist(),
            "salient": self.salient.tolist(),
        }


def tap_activations(model: Model, samples: np.ndarray, layer: Optional[int] = None) -> np.ndarray:
    """Flattened eval-mode activations at ``layer`` (default: the input of the final dense layer)."""
    layer = model.tap_index() if layer is None else layer
    act = model.activations(np.asarray(samples), layer)
    return act.reshape(act.shape[0], -1)


def split_batch(model: Model, batch: RecoveredBatch, cfg: SplitConfig = SplitConfig()) -> SplitResult:
    """Split one recovered batch: the ceil(gamma*M) highest-contribution samples are proxy normal."""
    m = len(batch)
    if cfg.gamma * m < 1 - 1e-9:
        raise DatasetError(f"class {batch.cls}: gamma={cfg.gamma} selects no proxy normal sample from M={m}")
    # proxy_wmk may be empty; callers that unlearn it check
    n_nor = min(m, math.ceil(cfg.gamma * m - 1e-9))
    act = tap_activations(model, batch.samples, cfg.layer)
    salient = select_salient(importance_scores(act), cfg.beta)
    contrib = contributions(act, salient)
    order = np.argsort(-contrib, kind="stable")
    result = SplitResult(
        cls=batch.cls,
        proxy_nor=np.sort(order[:n_nor]),
        proxy_wmk=np.sort(order[n_nor:]),
        contributions=contrib,
        salient=salient,
    )
    logger.debug("class %d split: %d proxy normal / %d proxy watermark", batch.cls, n_nor, m - n_nor)
    return result


def split_all(model: Model, batches: Sequence[RecoveredBatch], cfg: SplitConfig = SplitConfig()) -> dict[int, SplitResult]:
    return {b.cls: split_batch(model, b, cfg) for b in batches}


def salient_overlap(model: Model, batches: dict, cfg: SplitConfig = SplitConfig()) -> dict:
    """Jaccard overlap between the salient sets of named batches, ``{name: images}``."""
    sets = {
        name: set(select_salient(importance_scores(tap_activations(model, images, cfg.layer)), cfg.beta).tolist())
        for name, images in batches.items()
    }
    names = list(sets)
    return {
        a: {b: len(sets[a] & sets[b]) / len(sets[a] | sets[b]) for b in names}
        for a in names
    }
