"""Layer and loss primitives built on Tensor.

Every differentiable op here has a numeric twin (suffix ``_numeric``) used by
the graph-free inference path, which also accepts per-sample weights.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DistributionError, LabelError, ShapeError
from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
KL_CONVENTIONS = ("target_pred", "pred_target")


# -- convolution -------------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation. x: [N, Cin, H, W], weight: [Cout, Cin, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"input {xd.shape} does not match kernel {wd.shape}", node="conv2d")
    n, _, h, w = xd.shape
    kh, kw = wd.shape[2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}", node="conv2d")
    win = _windows(xd, kh, kw, padding)
    out = np.einsum("nchwij,ocij->nohw", win, wd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    ho, wo = out.shape[2:]

    def backward(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros((n, xd.shape[1], h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, wd[:, :, i, j], optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def conv2d_numeric(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], padding: int = 0) -> np.ndarray:
    """Graph-free conv2d; ``weight`` may carry a leading per-sample axis [N, Cout, Cin, kh, kw]."""
    kh, kw = weight.shape[-2:]
    win = _windows(x, kh, kw, padding)
    if weight.ndim == 5:
        out = np.einsum("nchwij,nocij->nohw", win, weight, optimize=True)
    else:
        out = np.einsum("nchwij,ocij->nohw", win, weight, optimize=True)
    if bias is not None:
        out += bias[:, :, None, None] if bias.ndim == 2 else bias[None, :, None, None]
    return out


# -- pooling -----------------------------------------------------------------


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    x = x[:, :, : ho * 2, : wo * 2]
    return x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"cannot pool input of shape {x.shape}", node="max_pool2d")
    shape = x.shape
    blocks = _pool_blocks(x.data)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        n, c, ho, wo = g.shape
        scatter = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(scatter, idx, g[..., None], axis=-1)
        full = np.zeros(shape)
        full[:, :, : ho * 2, : wo * 2] = (
            scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        )
        return (full,)

    return Tensor._result(out, (x,), backward, "max_pool2d")


def max_pool2d_numeric(x: np.ndarray) -> np.ndarray:
    return _pool_blocks(x).max(axis=-1)


# -- batch normalization -----------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = field(default=BN_EPS)

    def __post_init__(self):
        channels = {a.shape for a in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(channels) != 1:
            raise ShapeError(f"channel counts disagree: {sorted(channels)}", node="batch_norm")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if np.any(self.running_var <= 0):
            raise ValueError("running_var must be strictly positive")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_layout(ndim: int, channels: int):
    if ndim == 2:
        return (0,), (1, channels)
    if ndim == 4:
        return (0, 2, 3), (1, channels, 1, 1)
    raise ShapeError(f"batch norm expects 2-D or 4-D input, got {ndim}-D", node="batch_norm")


def batch_norm_apply(
    x: Tensor,
    state: BatchNormState,
    mode: str,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Normalize ``x`` and return it with the observed batch statistics (mean, biased var).

    Train mode normalizes by the batch and moves the running statistics by
    ``momentum``; eval mode normalizes by the running statistics. The observed
    statistics are differentiable in both modes.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"input channels {x.shape[1:2]} != state channels {state.channels}", node="batch_norm")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode '{mode}'")
    axes, bshape = _bn_layout(x.ndim, state.channels)
    if mode == "train" and x.shape[0] < 2:
        raise ShapeError("batch of size 1 in train mode: batch variance undefined", node="batch_norm")
    gamma = Tensor(state.gamma) if gamma is None else gamma
    beta = Tensor(state.beta) if beta is None else beta

    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    if mode == "train":
        xhat = centered * (var + state.eps) ** -0.5
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean.data.reshape(-1)
        state.running_var = (1.0 - m) * state.running_var + m * var.data.reshape(-1)
    else:
        inv = (state.running_var + state.eps) ** -0.5
        xhat = (x - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (mean.reshape(-1), var.reshape(-1))


def batch_norm_numeric(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    _, bshape = _bn_layout(x.ndim, state.channels)
    inv = (state.running_var + state.eps) ** -0.5
    return (x - state.running_mean.reshape(bshape)) * inv.reshape(bshape) * state.gamma.reshape(
        bshape
    ) + state.beta.reshape(bshape)


# -- softmax family and losses ----------------------------------------------


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def softmax_numeric(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits", node="cross_entropy")
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        raise LabelError(f"label {int(labels[bad][0])} outside 0..{num_classes - 1}")
    return labels


def cross_entropy(logits: Union[Tensor, np.ndarray], labels, reduction: str = "mean") -> Tensor:
    """-log softmax(logits)[label]; ``reduction`` is one of mean, sum, none."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    nll = -log_softmax(logits)[np.arange(n), labels]
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ValueError(f"unknown reduction '{reduction}'")


def _check_distribution(v: np.ndarray, what: str) -> None:
    if np.any(v < 0):
        raise DistributionError(f"{what} has negative mass")
    if np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-6):
        raise DistributionError(f"{what} does not sum to 1 within 1e-6")


def kl_divergence(pred, target, convention: str = "target_pred") -> Union[float, np.ndarray]:
    """KL divergence between probability vectors (rows when 2-D).

    ``target_pred`` computes D(target || pred), ``pred_target`` computes D(pred || target).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.shape} vs {target.shape}", node="kl_divergence")
    _check_distribution(pred, "pred")
    _check_distribution(target, "target")
    if convention == "target_pred":
        a, b = target, pred
    elif convention == "pred_target":
        a, b = pred, target
    else:
        raise ValueError(f"unknown KL convention '{convention}'")
    if np.any((b == 0) & (a > 0)):
        raise DistributionError("zero reference mass where the other distribution has positive mass")
    pos = a > 0
    terms = np.where(pos, a * np.log(np.where(pos, a, 1.0) / np.where(pos, b, 1.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_to_target(logits: Tensor, target: np.ndarray, convention: str = "target_pred") -> Tensor:
    """Per-row KL between softmax(logits) and fixed target distributions, differentiable in logits."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} vs logits {logits.shape}", node="kl_to_target")
    logp = log_softmax(logits)
    if convention == "target_pred":
        pos = target > 0
        entropy_term = np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0).sum(axis=1)
        return Tensor(entropy_term) - (logp * target).sum(axis=1)
    if convention == "pred_target":
        if np.any(target <= 0):
            raise DistributionError("reverse KL needs a target with full support")
        return (logp.exp() * (logp - np.log(target))).sum(axis=1)
    raise ValueError(f"unknown KL convention '{convention}'")
