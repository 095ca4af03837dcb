"""Baseline removal attacks: magnitude pruning, fine-pruning, finetuning and L2-regularized finetuning."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DatasetError, TrainingDivergedError
from .models import Model
from .training import FitConfig, fit
from .unlearning import AuxiliaryData, Monitor

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("prune", "fine_prune", "finetune", "regularization")


@dataclass
class BaselineConfig:
    kind: str = "finetune"
    prune_ratio: float = 0.8
    neuron_ratio: float = 0.2
    lr: float = 0.05
    lr_decay: float = 0.9
    finetune_lr: float = 0.01
    l2: float = 0.01
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline '{self.kind}', choose from {BASELINE_KINDS}")
        for name in ("prune_ratio", "neuron_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def prune_magnitude(model: Model, ratio: float) -> Model:
    """Zero the floor(ratio * P) dense/conv weights of smallest magnitude, ranked globally."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1], got {ratio}")
    model = model.copy()
    params = model.parameters()
    names = model.weight_names()
    flat = np.concatenate([np.abs(params[n]).ravel() for n in names])
    k = int(math.floor(ratio * flat.size))
    if k == 0:
        return model
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[np.argsort(flat, kind="stable")[:k]] = True
    start = 0
    for name in names:
        size = params[name].size
        params[name][chosen[start:start + size].reshape(params[name].shape)] = 0.0
        start += size
    logger.info("magnitude pruning: zeroed %d of %d weights", k, flat.size)
    return model


def _require_aux(aux: AuxiliaryData, what: str) -> None:
    if aux is None or aux.is_data_free or len(aux) == 0:
        raise DatasetError(f"{what} needs nonempty auxiliary data")


def _finetune(model: Model, aux: AuxiliaryData, cfg: BaselineConfig, lr: float, lr_decay: float, penalty=None, monitor=None) -> Model:
    fit_cfg = FitConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=lr, optimizer="sgd", seed=cfg.seed, lr_decay=lr_decay
    )
    try:
        return fit(model, aux.terms(), fit_cfg, penalty=penalty, monitor=monitor).model
    except TrainingDivergedError as exc:
        logger.warning("finetuning diverged (%s); keeping the last good model", exc)
        return exc.model


def prune_masks(model: Model, images: np.ndarray, ratio: float) -> dict[int, np.ndarray]:
    """Masks that drop the least active units of the penultimate layer and the last conv block."""
    layers = [model.tap_index()]
    conv = model.last_conv_activation()
    if conv is not None and conv not in layers:
        layers.append(conv)
    masks = {}
    for layer in layers:
        act = model.activations(images, layer)
        mean = act.mean(axis=tuple(i for i in range(act.ndim) if i != 1))
        k = int(math.floor(ratio * mean.size))
        mask = np.ones(mean.size)
        mask[np.argsort(mean, kind="stable")[:k]] = 0.0
        masks[layer] = mask
    return masks


def fine_prune(model: Model, aux: AuxiliaryData, ratio: float, cfg: BaselineConfig = BaselineConfig(), monitor: Optional[Monitor] = None) -> Model:
    """Mask rarely activated neurons (mean activation on aux), then finetune on aux."""
    _require_aux(aux, "fine-pruning")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"neuron ratio must lie in [0, 1], got {ratio}")
    model = model.copy()
    if ratio > 0:
        for layer, mask in prune_masks(model, aux.images, ratio).items():
            model.masks[layer] = mask * model.masks.get(layer, 1.0)
            logger.info("fine-pruning: masked %d of %d units at layer %d", int((mask == 0).sum()), mask.size, layer)
    return _finetune(model, aux, cfg, cfg.finetune_lr, 1.0, monitor=monitor)


def finetune_attack(model: Model, aux: AuxiliaryData, cfg: BaselineConfig = BaselineConfig(), monitor: Optional[Monitor] = None) -> Model:
    """Finetune on aux with lr ``cfg.lr`` decayed by ``cfg.lr_decay`` every epoch."""
    _require_aux(aux, "finetuning")
    return _finetune(model, aux, cfg, cfg.lr, cfg.lr_decay, monitor=monitor)


def parameter_norm(model: Model) -> float:
    params = model.parameters()
    return float(np.sqrt(sum(np.sum(params[n] ** 2) for n in model.perturbable_names())))


def regularization_attack(
    model: Model, aux: AuxiliaryData, l2: float, cfg: BaselineConfig = BaselineConfig(), monitor: Optional[Monitor] = None
) -> Model:
    """Finetuning with ``l2 * ||theta||^2`` over dense/conv weights and biases.

    The per-epoch parameter norm is stored in ``metadata["norm_trace"]`` of the
    returned model.
    """
    if l2 < 0:
        raise ValueError(f"L2 coefficient must be nonnegative, got {l2}")
    _require_aux(aux, "regularization finetuning")
    names = model.perturbable_names()

    def penalty(params):
        total = None
        for name in names:
            term = (params[name] * params[name]).sum()
            total = term if total is None else total + term
        return total * l2

    trace = [parameter_norm(model)]

    def record(epoch, current):
        trace.append(parameter_norm(current))
        row = monitor(epoch, current) if monitor is not None else {}
        return {**row, "param_norm": trace[-1]}

    out = _finetune(model, aux, cfg, cfg.lr, cfg.lr_decay, penalty=penalty if l2 > 0 else None, monitor=record)
    out.metadata["norm_trace"] = trace
    return out


def run_baseline(model: Model, aux: AuxiliaryData, cfg: BaselineConfig, monitor: Optional[Monitor] = None) -> Model:
    if cfg.kind == "prune":
        return prune_magnitude(model, cfg.prune_ratio)
    elif cfg.kind == "fine_prune":
        return fine_prune(model, aux, cfg.neuron_ratio, cfg, monitor)
    elif cfg.kind == "finetune":
        return finetune_attack(model, aux, cfg, monitor)
    elif cfg.kind == "regularization":
        return regularization_attack(model, aux, cfg.l2, cfg, monitor)
    else:
        raise ValueError(f"Unknown baseline: {cfg.kind}")
