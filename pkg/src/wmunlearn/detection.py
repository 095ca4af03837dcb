"""Target-class detection from perturbation accuracy (SmoothAcc) of recovered batches."""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError
from .inversion import RecoveredBatch
from .models import Model
from .utils import derive_seed

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 63) - 1


@dataclass(frozen=True)
class NoiseConfig:
    input_sigma: float = 1.0
    param_sigma: float = 0.03
    trials: int = 100

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.input_sigma < 0 or self.param_sigma < 0:
            raise ValueError("noise levels must be nonnegative")


def smooth_acc(model: Model, batch: np.ndarray, label: int, noise: NoiseConfig, seed: int, chunk: int = 64) -> float:
    """Monte Carlo accuracy of ``batch`` labeled ``label`` under input and parameter noise.

    Each (sample, trial) pair draws its own input noise and its own perturbed
    copy of the dense/conv weights and biases from a generator keyed on
    (seed, sample index, trial index), so the estimate does not depend on
    chunking. BN statistics are never perturbed and the model is not mutated.
    """
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise DatasetError("smooth_acc needs a nonempty batch")
    if noise.input_sigma == 0 and noise.param_sigma == 0:
        return float(np.mean(model.predict(x) == label))

    params = model.parameters()
    names = model.perturbable_names() if noise.param_sigma > 0 else []
    key = int(seed) & _SEED_MASK
    hits = 0
    for t in range(noise.trials):
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            xs = np.array(x[start:stop])
            sample_params = {name: np.empty((stop - start,) + params[name].shape) for name in names}
            for j, i in enumerate(range(start, stop)):
                rng = np.random.default_rng([key, i, t])
                if noise.input_sigma > 0:
                    xs[j] += noise.input_sigma * rng.standard_normal(xs[j].shape)
                for name in names:
                    sample_params[name][j] = params[name] + noise.param_sigma * rng.standard_normal(params[name].shape)
            pred = model.infer(xs, sample_params).argmax(axis=1)
            hits += int(np.sum(pred == label))
    return hits / (n * noise.trials)


@dataclass
class DetectionVerdict:
    values: list
    order: list
    gap: float
    is_fixed: bool
    target: Optional[int]
    least_likely: int
    second_least_likely: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionVerdict":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def verdict_from_values(values: Sequence[float], threshold: float) -> DetectionVerdict:
    """Sort classes by descending SmoothAcc (ties to the lower class) and apply ``gap > threshold``."""
    values = [float(v) for v in values]
    order = sorted(range(len(values)), key=lambda c: (-values[c], c))
    gap = values[order[0]] - values[order[1]] if len(order) > 1 else 0.0
    is_fixed = gap > threshold
    return DetectionVerdict(
        values=values,
        order=order,
        gap=gap,
        is_fixed=is_fixed,
        target=order[0] if is_fixed else None,
        least_likely=order[-1],
        second_least_likely=order[-2] if len(order) > 1 else order[-1],
        threshold=threshold,
    )


def detect_target_class(
    model: Model,
    recovered: Sequence[RecoveredBatch],
    threshold: float = 0.4,
    noise: NoiseConfig = NoiseConfig(),
    seed: int = 0,
) -> DetectionVerdict:
    """SmoothAcc of every recovered batch under its own label, then the gap rule."""
    by_class = {b.cls: b for b in recovered}
    missing = set(range(model.num_classes)) - set(by_class)
    if missing or len(recovered) != model.num_classes:
        raise DatasetError(
            f"need exactly one recovered batch per class 0..{model.num_classes - 1}; missing {sorted(missing)}"
        )
    values = [
        smooth_acc(model, by_class[c].samples, c, noise, derive_seed(seed, "smooth", c))
        for c in range(model.num_classes)
    ]
    verdict = verdict_from_values(values, threshold)
    logger.info(
        "SmoothAcc %s; gap %.4f vs T=%.2f -> %s",
        np.round(values, 4).tolist(), verdict.gap, threshold,
        f"fixed({verdict.target})" if verdict.is_fixed else "non-fixed",
    )
    return verdict


def smoothness_profile(model: Model, batches: dict, noise: NoiseConfig, seed: int) -> dict:
    """SmoothAcc on labeled real batches, ``{name: (images, label)}``; diagnostic only."""
    return {
        name: smooth_acc(model, images, label, noise, derive_seed(seed, "profile", name))
        for name, (images, label) in batches.items()
    }


def true_target_gap(verdict: DetectionVerdict, target: int) -> float:
    """SmoothAcc of the true target class minus the best competing class."""
    others = [v for c, v in enumerate(verdict.values) if c != target]
    return verdict.values[target] - max(others)
