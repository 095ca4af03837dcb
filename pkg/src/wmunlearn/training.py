"""Minibatch finetuning engine shared by training, embedding, unlearning and baselines."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .config import PROGRESS
from .core.functional import cross_entropy, kl_to_target
from .core.optim import OptimizerState, optimizer_step
from .data import Dataset
from .errors import DatasetError, NonFiniteError, TrainingDivergedError
from .models import Model
from .utils import derive_seed

logger = logging.getLogger(__name__)

Schedule = Callable[[Sequence[int], np.random.Generator], list]


@dataclass
class LossTerm:
    """One weighted objective term: hard labels (cross entropy) or soft targets (KL)."""

    name: str
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    soft: Optional[np.ndarray] = None
    weight: float = 1.0

    def __post_init__(self):
        if (self.labels is None) == (self.soft is None):
            raise ValueError(f"term '{self.name}' needs exactly one of labels / soft targets")
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        else:
            self.soft = np.asarray(self.soft, dtype=np.float64)

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class FitConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    optimizer: str = "sgd"
    seed: int = 0
    update_bn: bool = True
    kl_convention: str = "target_pred"
    lr_decay: float = 1.0


@dataclass
class FitResult:
    model: Model
    history: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    batch_log: list = field(default_factory=list)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample is merged into its predecessor."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def stratified_schedule(sizes: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Split every term into the same number of steps so each step draws from all terms proportionally."""
    total = int(sum(sizes))
    steps = max(1, -(-total // batch_size))
    pieces = [np.array_split(rng.permutation(size), steps) for size in sizes]
    schedule = [[pieces[t][s] for t in range(len(sizes))] for s in range(steps)]
    merged: list[list[np.ndarray]] = []
    for step in schedule:
        if merged and sum(len(p) for p in step) < 2:
            merged[-1] = [np.concatenate([a, b]) for a, b in zip(merged[-1], step)]
        else:
            merged.append(step)
    return merged


def _step_loss(model: Model, terms: list[LossTerm], picks: list[np.ndarray], cfg: FitConfig, penalty):
    x = np.concatenate([t.images[idx] for t, idx in zip(terms, picks)])
    n = x.shape[0]
    out = model.forward(x, mode="train" if cfg.update_bn else "eval")
    total, parts, start = None, {}, 0
    for term, idx in zip(terms, picks):
        stop = start + len(idx)
        if len(idx):
            logits = out.logits[start:stop]
            if term.labels is not None:
                per_sample = cross_entropy(logits, term.labels[idx], reduction="none")
            else:
                per_sample = kl_to_target(logits, term.soft[idx], cfg.kl_convention)
            part = per_sample.sum() * (term.weight / n)
            parts[term.name] = float(part.data)
            total = part if total is None else total + part
        start = stop
    if penalty is not None:
        reg = penalty(out.params)
        parts["penalty"] = float(reg.data)
        total = total + reg
    return total, parts, out.params


def fit(
    model: Model,
    terms: Sequence[LossTerm],
    cfg: FitConfig,
    schedule: Optional[Schedule] = None,
    penalty: Optional[Callable[[dict], object]] = None,
    monitor: Optional[Callable[[int, Model], dict]] = None,
) -> FitResult:
    """Minimize ``sum_t weight_t * mean-over-batch(loss_t)`` over a copy of ``model``.

    Terms with zero weight or no samples are dropped before scheduling. On a
    non-finite loss or gradient the run aborts with TrainingDivergedError
    carrying the model as it stood at the start of the failing epoch.
    """
    model = model.copy()
    result = FitResult(model)
    if cfg.epochs <= 0:
        return result
    active = [t for t in terms if len(t) and t.weight != 0]
    if not active:
        raise DatasetError("no training samples in any active loss term")
    rng = np.random.default_rng(derive_seed(cfg.seed, "fit"))
    schedule = schedule or (lambda sizes, r: stratified_schedule(sizes, cfg.batch_size, r))
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    sizes = [len(t) for t in active]
    logger.debug("fit: terms %s, sizes %s, update_bn=%s", [t.name for t in active], sizes, cfg.update_bn)

    for epoch in tqdm(range(cfg.epochs), desc="epochs", disable=not PROGRESS):
        opt.lr = cfg.lr * cfg.lr_decay ** epoch
        last_good = model.copy()
        sums: dict[str, float] = {}
        steps = schedule(sizes, rng)
        for step_no, picks in enumerate(steps):
            loss, parts, params = _step_loss(model, active, picks, cfg, penalty)
            diagnostics = {"epoch": epoch, "step": step_no, "lr": opt.lr, **parts}
            if not np.isfinite(loss.data).all():
                raise TrainingDivergedError("non-finite loss", diagnostics, model=last_good)
            loss.backward()
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}
            try:
                optimizer_step(opt, model.parameters(), grads)
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc), diagnostics, model=last_good) from exc
            result.batch_log.append({t.name: len(p) for t, p in zip(active, picks)})
            sums["loss"] = sums.get("loss", 0.0) + float(loss.data)
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        entry = {"epoch": epoch, **{k: v / len(steps) for k, v in sums.items()}}
        result.history.append(entry)
        logger.debug("epoch %d: %s", epoch, entry)
        if monitor is not None:
            result.trajectory.append({"epoch": epoch, **monitor(epoch, model)})
    return result


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0


@dataclass
class TrainResult:
    model: Model
    history: list


def train(model: Model, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Plain cross-entropy training; ``history`` holds the mean loss of each epoch."""
    if cfg.epochs > 0:
        dataset.require_nonempty("training set")
    term = LossTerm("ce", dataset.images, labels=dataset.labels)
    fit_cfg = FitConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, optimizer=cfg.optimizer, seed=cfg.seed)
    result = fit(model, [term], fit_cfg)
    history = [entry["loss"] for entry in result.history]
    if history:
        logger.info("trained %s for %d epochs, final loss %.4f", model.arch.name, cfg.epochs, history[-1])
    return TrainResult(result.model, history)


def accuracy(model: Model, dataset: Dataset) -> float:
    """Fraction of argmax-correct predictions in eval mode (ties go to the lowest index)."""
    dataset.require_nonempty()
    return float(np.mean(model.predict(dataset.images) == dataset.labels))
