"""Class-wise model inversion: reconstruct per-class sample batches from a frozen classifier.

For each class c a batch of unconstrained pre-images z is optimized with Adam
so that x = (tanh(z) + 1) / 2 is classified as c, under l2, total-variation
and batch-norm statistic priors.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from tqdm import tqdm

from .checkpoint import read_container, write_container
from .config import PROGRESS
from .core.functional import cross_entropy
from .core.optim import OptimizerState, optimizer_step
from .core.tensor import Tensor, as_tensor
from .errors import LabelError, ModelMutatedError, NonFiniteError
from .models import Model
from .utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    samples_per_class: int = 250
    alpha_l2: float = 0.01
    alpha_tv: float = 0.03
    alpha_bn: float = 0.1
    steps: int = 2000
    lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2 (batch statistics need variance)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if min(self.alpha_l2, self.alpha_tv, self.alpha_bn) < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


@dataclass
class RecoveredBatch:
    cls: int
    samples: np.ndarray
    pre_images: np.ndarray
    losses: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    initial_ce: float = float("nan")
    hit_rate: float = float("nan")

    def __len__(self) -> int:
        return int(self.samples.shape[0])


def squash(z: np.ndarray) -> np.ndarray:
    return (np.tanh(z) + 1.0) * 0.5


def l2_regularizer(batch: Union[Tensor, np.ndarray]) -> Tensor:
    """Sum of squared pixel values over the batch."""
    batch = as_tensor(batch)
    return (batch * batch).sum()


def tv_regularizer(batch: Union[Tensor, np.ndarray]) -> Tensor:
    """Squared differences over unordered 4-neighbour pixel pairs, each pair counted once."""
    batch = as_tensor(batch)
    if batch.ndim != 4 or batch.shape[2] < 2 or batch.shape[3] < 2:
        raise ValueError(f"total variation needs [N, C, H>=2, W>=2], got {batch.shape}")
    dv = batch[:, :, 1:, :] - batch[:, :, :-1, :]
    dh = batch[:, :, :, 1:] - batch[:, :, :, :-1]
    return (dv * dv).sum() + (dh * dh).sum()


def guided_bn_layers(model: Model) -> int:
    """Number of BN layers guiding inversion: all but the last two."""
    return max(0, len(model.bn_layers()) - 2)


def bn_regularizer(model: Model, observed: Sequence) -> Tensor:
    """Squared distance between observed batch statistics and the stored running statistics.

    ``observed`` lists (mean, var) per BN layer in network order. Only the first
    L-2 layers contribute; the term is exactly zero with two or fewer BN layers.
    """
    guided = guided_bn_layers(model)
    total = Tensor(0.0)
    for (mean, var), layer in zip(list(observed)[:guided], model.bn_layers()[:guided]):
        dm = as_tensor(mean) - layer.state.running_mean
        dv = as_tensor(var) - layer.state.running_var
        total = total + (dm * dm).sum() + (dv * dv).sum()
    return total


def _objective(model: Model, z: Tensor, c: int, cfg: InversionConfig):
    x = (z.tanh() + 1.0) * 0.5
    out = model.forward(x, mode="invert", requires_grad=False)
    ce = cross_entropy(out.logits, np.full(x.shape[0], c), reduction="sum")
    l2 = l2_regularizer(x)
    tv = tv_regularizer(x)
    bn = bn_regularizer(model, out.bn_stats)
    total = ce + cfg.alpha_l2 * l2 + cfg.alpha_tv * tv + cfg.alpha_bn * bn
    terms = {"ce": float(ce.data), "l2": float(l2.data), "tv": float(tv.data), "bn": float(bn.data), "total": float(total.data)}
    hits = float(np.mean(out.logits.data.argmax(axis=1) == c))
    return total, terms, hits


def invert_class(model: Model, c: int, cfg: InversionConfig) -> RecoveredBatch:
    """Recover a batch of ``samples_per_class`` inputs the model assigns to class ``c``.

    Returns the lowest-objective iterate among those whose classification loss
    does not exceed the initial one; the model is never modified.
    """
    if not 0 <= c < model.num_classes:
        raise LabelError(f"class {c} outside 0..{model.num_classes - 1}")
    before = model.fingerprint()
    rng = np.random.default_rng(derive_seed(cfg.seed, "invert", c))
    z = rng.standard_normal((cfg.samples_per_class,) + tuple(model.input_shape))
    opt = OptimizerState(kind="adam", lr=cfg.lr)

    best_z, best_terms, best_hits, initial_ce = None, None, 0.0, None
    trace: list[float] = []
    for step in tqdm(range(cfg.steps + 1), desc=f"invert c={c}", disable=not PROGRESS):
        zt = Tensor(z, requires_grad=True)
        total, terms, hits = _objective(model, zt, c, cfg)
        if not np.isfinite(terms["total"]):
            raise NonFiniteError(f"inversion objective for class {c} is non-finite at step {step}")
        if initial_ce is None:
            initial_ce = terms["ce"]
        if terms["ce"] <= initial_ce and (best_terms is None or terms["total"] < best_terms["total"]):
            best_z, best_terms, best_hits = z.copy(), terms, hits
        trace.append(best_terms["total"])
        if step == cfg.steps:
            break
        total.backward()
        optimizer_step(opt, {"z": z}, {"z": zt.grad})

    if model.fingerprint() != before:
        raise ModelMutatedError(f"model parameters changed while inverting class {c}")
    if best_hits < 0.9:
        logger.warning("class %d: only %.1f%% of recovered samples are classified as %d", c, 100 * best_hits, c)
    logger.info("inverted class %d: objective %.4f -> %.4f, hit rate %.3f", c, trace[0], trace[-1], best_hits)
    return RecoveredBatch(c, squash(best_z), best_z, best_terms, trace, initial_ce, best_hits)


def recover_all(model: Model, cfg: InversionConfig, workers: int = 1) -> list[RecoveredBatch]:
    """One recovered batch per class, classes 0..C-1; per-class seeds make the order irrelevant."""
    classes = range(model.num_classes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: invert_class(model, c, cfg), classes))
    return [invert_class(model, c, cfg) for c in classes]


def save_recovered(batches: Sequence[RecoveredBatch], path: str) -> None:
    arrays, meta = {}, {"classes": []}
    for b in batches:
        arrays[f"{b.cls}/pre_images"] = b.pre_images
        meta["classes"].append(
            {"cls": b.cls, "losses": b.losses, "trace": b.trace, "initial_ce": b.initial_ce, "hit_rate": b.hit_rate}
        )
    write_container(path, "recovered", meta, arrays)


def load_recovered(path: str) -> list[RecoveredBatch]:
    meta, arrays = read_container(path, "recovered")
    out = []
    for entry in meta["classes"]:
        z = arrays[f"{entry['cls']}/pre_images"]
        out.append(
            RecoveredBatch(
                entry["cls"], squash(z), z, entry["losses"], entry["trace"], entry["initial_ce"], entry["hit_rate"]
            )
        )
    return out


def save_png_grid(samples: np.ndarray, path: str, ncols: int = 10, scale: int = 2) -> None:
    """Tile samples [N, C, H, W] into one PNG (grayscale for C=1, RGB for C=3)."""
    n, c, h, w = samples.shape
    ncols = max(1, min(ncols, n))
    nrows = -(-n // ncols)
    grid = np.zeros((c, nrows * (h + 1), ncols * (w + 1)))
    for i in range(n):
        r, k = divmod(i, ncols)
        grid[:, r * (h + 1):r * (h + 1) + h, k * (w + 1):k * (w + 1) + w] = samples[i]
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255).astype(np.uint8)
    image = Image.fromarray(pixels[0]) if c == 1 else Image.fromarray(np.ascontiguousarray(pixels[:3].transpose(1, 2, 0)))
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    image.save(path)
