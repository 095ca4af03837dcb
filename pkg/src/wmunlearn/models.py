"""Architectures, layers and the desk-scale model zoo."""

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core.functional import (
    BatchNormState,
    batch_norm_apply,
    batch_norm_numeric,
    conv2d,
    conv2d_numeric,
    max_pool2d,
    max_pool2d_numeric,
)
from .core.tensor import Tensor
from .errors import ArchError, ShapeError
from .utils import canonical_json

LAYER_KINDS = ("dense", "conv", "bn", "relu", "tanh", "maxpool", "flatten")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: int = 0
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"unknown layer kind '{self.kind}'")

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense({self.units})"
        if self.kind == "conv":
            return f"conv({self.units}, k={self.kernel}, p={self.padding})"
        return self.kind


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        return cls(
            name=data["name"],
            input_shape=tuple(int(v) for v in data["input_shape"]),
            layers=tuple(LayerSpec(**layer) for layer in data["layers"]),
            num_classes=int(data["num_classes"]),
        )

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


# -- layers --------------------------------------------------------------------


@dataclass
class ForwardContext:
    mode: str
    params: dict
    masks: dict
    bn_stats: list = field(default_factory=list)
    activations: dict = field(default_factory=dict)


class Layer:
    kind = ""

    def __init__(self, index: int, spec: LayerSpec, in_shape: tuple, out_shape: tuple):
        self.index = index
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = out_shape

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def pname(self, key: str) -> str:
        return f"{self.index}.{key}"

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def infer(self, x: np.ndarray, sample_params: dict) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, index, spec, in_shape, out_shape, rng: np.random.Generator):
        super().__init__(index, spec, in_shape, out_shape)
        fan_in = in_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = rng.uniform(-bound, bound, size=(fan_in, spec.units))
        self.bias = rng.uniform(-bound, bound, size=spec.units)

    def params(self):
        return {self.pname("weight"): self.weight, self.pname("bias"): self.bias}

    def forward(self, x, ctx):
        return x @ ctx.params[self.pname("weight")] + ctx.params[self.pname("bias")]

    def infer(self, x, sample_params):
        w = sample_params.get(self.pname("weight"), self.weight)
        b = sample_params.get(self.pname("bias"), self.bias)
        out = np.einsum("ni,nio->no", x, w) if w.ndim == 3 else x @ w
        return out + b


class Conv(Layer):
    kind = "conv"

    def __init__(self, index, spec, in_shape, out_shape, rng: np.random.Generator):
        super().__init__(index, spec, in_shape, out_shape)
        fan_in = in_shape[0] * spec.kernel * spec.kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = rng.uniform(-bound, bound, size=(spec.units, in_shape[0], spec.kernel, spec.kernel))
        self.bias = rng.uniform(-bound, bound, size=spec.units)

    def params(self):
        return {self.pname("weight"): self.weight, self.pname("bias"): self.bias}

    def forward(self, x, ctx):
        return conv2d(x, ctx.params[self.pname("weight")], ctx.params[self.pname("bias")], self.spec.padding)

    def infer(self, x, sample_params):
        w = sample_params.get(self.pname("weight"), self.weight)
        b = sample_params.get(self.pname("bias"), self.bias)
        return conv2d_numeric(x, w, b, self.spec.padding)


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, index, spec, in_shape, out_shape, momentum: float = 0.1):
        super().__init__(index, spec, in_shape, out_shape)
        self.state = BatchNormState.fresh(in_shape[0], momentum)

    def params(self):
        return {self.pname("gamma"): self.state.gamma, self.pname("beta"): self.state.beta}

    def forward(self, x, ctx):
        mode = "train" if ctx.mode == "train" else "eval"
        y, stats = batch_norm_apply(
            x, self.state, mode, ctx.params[self.pname("gamma")], ctx.params[self.pname("beta")]
        )
        ctx.bn_stats.append(stats)
        return y

    def infer(self, x, sample_params):
        return batch_norm_numeric(x, self.state)


class Activation(Layer):
    def __init__(self, index, spec, in_shape, out_shape):
        super().__init__(index, spec, in_shape, out_shape)
        self.kind = spec.kind

    def forward(self, x, ctx):
        return x.relu() if self.kind == "relu" else x.tanh()

    def infer(self, x, sample_params):
        return np.maximum(x, 0.0) if self.kind == "relu" else np.tanh(x)


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, x, ctx):
        return max_pool2d(x)

    def infer(self, x, sample_params):
        return max_pool2d_numeric(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1)

    def infer(self, x, sample_params):
        return x.reshape(x.shape[0], -1)


# -- model -----------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor
    params: dict
    bn_stats: list
    activations: dict


class Model:
    """An ordered layer stack with named parameters, BN running statistics and neuron masks."""

    def __init__(self, arch: ArchSpec, layers: list, metadata: Optional[dict] = None):
        self.arch = arch
        self.layers = layers
        self.masks: dict[int, np.ndarray] = {}
        self.metadata = dict(metadata or {})

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_shape(self) -> tuple:
        return self.arch.input_shape

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are live references."""
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def weight_names(self) -> list[str]:
        """Dense/conv weight matrices (the prunable set)."""
        return [l.pname("weight") for l in self.layers if l.kind in ("dense", "conv")]

    def perturbable_names(self) -> list[str]:
        """Dense/conv weights and biases; BN parameters and statistics excluded."""
        return [n for l in self.layers if l.kind in ("dense", "conv") for n in l.params()]

    def bn_layers(self) -> list[BatchNorm]:
        return [l for l in self.layers if l.kind == "bn"]

    def tap_index(self) -> int:
        """Index of the layer whose output feeds the final dense layer."""
        return len(self.layers) - 2

    def last_conv_activation(self) -> Optional[int]:
        idx = None
        for layer in self.layers:
            if layer.kind in ACTIVATIONS and len(layer.out_shape) == 3:
                idx = layer.index
        return idx

    def _masked(self, index: int, x):
        mask = self.masks.get(index)
        if mask is None:
            return x
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x * mask.reshape(shape)

    def forward(self, x, mode: str = "eval", requires_grad: bool = True) -> ForwardResult:
        """Differentiable forward pass.

        mode: ``train`` (BN batch statistics, running stats updated), ``eval``
        (BN running statistics) or ``invert`` (eval semantics; the observed batch
        statistics are still recorded for the BN prior).
        """
        if mode not in ("train", "eval", "invert"):
            raise ValueError(f"unknown forward mode '{mode}'")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"expected input {self.input_shape}, got {x.shape[1:]}", node="input")
        params = {name: Tensor(arr, requires_grad=requires_grad, name=name) for name, arr in self.parameters().items()}
        ctx = ForwardContext(mode=mode, params=params, masks=self.masks)
        for layer in self.layers:
            x = self._masked(layer.index, layer.forward(x, ctx))
            ctx.activations[layer.index] = x
        return ForwardResult(x, params, ctx.bn_stats, ctx.activations)

    def infer(self, x: np.ndarray, sample_params: Optional[dict] = None, upto: Optional[int] = None) -> np.ndarray:
        """Graph-free eval-mode forward.

        ``sample_params`` maps parameter names to arrays with a leading per-sample
        axis; those replace the shared parameter for each sample. ``upto`` stops
        after that layer index and returns its (masked) output.
        """
        sample_params = sample_params or {}
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = self._masked(layer.index, layer.infer(x, sample_params))
            if upto is not None and layer.index == upto:
                return x
        return x

    def logits(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        chunks = [self.infer(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.num_classes))

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Argmax labels; ties resolve to the lowest class index."""
        return self.logits(x, batch_size).argmax(axis=1)

    def activations(self, x: np.ndarray, layer: int, batch_size: int = 512) -> np.ndarray:
        chunks = [self.infer(x[i:i + batch_size], upto=layer) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # -- state (checkpoint payload) ------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": v for k, v in self.parameters().items()}
        for layer in self.bn_layers():
            arrays[f"bn/{layer.index}/running_mean"] = layer.state.running_mean
            arrays[f"bn/{layer.index}/running_var"] = layer.state.running_var
        for index, mask in self.masks.items():
            arrays[f"mask/{index}"] = mask
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bn = {layer.index: layer for layer in self.bn_layers()}
        self.masks = {}
        for key, value in arrays.items():
            kind, _, rest = key.partition("/")
            if kind == "param":
                if params[rest].shape != value.shape:
                    raise ShapeError(f"{rest}: stored {value.shape} vs model {params[rest].shape}", node="load")
                params[rest][...] = value
            elif kind == "bn":
                index, stat = rest.split("/")
                setattr(bn[int(index)].state, stat, np.array(value, dtype=np.float64))
            elif kind == "mask":
                self.masks[int(rest)] = np.array(value, dtype=np.float64)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for key, value in sorted(self.state_arrays().items()):
            digest.update(key.encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return digest.hexdigest()


# -- construction ----------------------------------------------------------------


def _pair(index: int, arch: ArchSpec) -> str:
    prev = "input" if index == 0 else f"layer {index - 1} ({arch.layers[index - 1].describe()})"
    return f"{prev} -> layer {index} ({arch.layers[index].describe()})"


def build_model(arch: ArchSpec, seed: int, bn_momentum: float = 0.1) -> Model:
    """Instantiate ``arch`` with fan-in-scaled uniform init and fresh BN statistics (0, 1)."""
    rng = np.random.default_rng(seed)
    shape = tuple(arch.input_shape)
    layers: list[Layer] = []
    for i, spec in enumerate(arch.layers):
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ArchError(f"{_pair(i, arch)}: dense needs a flat input, got {shape}")
            if spec.units < 1:
                raise ArchError(f"{_pair(i, arch)}: dense needs units >= 1")
            out = (spec.units,)
            layers.append(Dense(i, spec, shape, out, rng))
        elif spec.kind == "conv":
            if len(shape) != 3:
                raise ArchError(f"{_pair(i, arch)}: conv needs a [C, H, W] input, got {shape}")
            h = shape[1] + 2 * spec.padding - spec.kernel + 1
            w = shape[2] + 2 * spec.padding - spec.kernel + 1
            if spec.kernel < 1 or spec.units < 1 or h < 1 or w < 1:
                raise ArchError(f"{_pair(i, arch)}: kernel {spec.kernel} does not fit input {shape}")
            out = (spec.units, h, w)
            layers.append(Conv(i, spec, shape, out, rng))
        elif spec.kind == "bn":
            if len(shape) not in (1, 3):
                raise ArchError(f"{_pair(i, arch)}: batch norm needs a 1-D or 3-D input, got {shape}")
            out = shape
            layers.append(BatchNorm(i, spec, shape, out, bn_momentum))
        elif spec.kind == "maxpool":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ArchError(f"{_pair(i, arch)}: cannot pool input {shape}")
            out = (shape[0], shape[1] // 2, shape[2] // 2)
            layers.append(MaxPool(i, spec, shape, out))
        elif spec.kind == "flatten":
            out = (int(np.prod(shape)),)
            layers.append(Flatten(i, spec, shape, out))
        else:
            out = shape
            layers.append(Activation(i, spec, shape, out))
        shape = out
    if not layers or layers[-1].kind != "dense" or shape != (arch.num_classes,):
        raise ArchError(f"final layer must be dense with {arch.num_classes} outputs, got {shape}")
    return Model(arch, layers)


# -- zoo ---------------------------------------------------------------------------


def _conv(units, kernel, padding=0):
    return LayerSpec("conv", units=units, kernel=kernel, padding=padding)


def _dense(units):
    return LayerSpec("dense", units=units)


RELU, BN, POOL, FLAT = LayerSpec("relu"), LayerSpec("bn"), LayerSpec("maxpool"), LayerSpec("flatten")


def lenet_analog(input_shape=(1, 28, 28), num_classes: int = 10) -> ArchSpec:
    """LeNet-5 style conv net without batch norm (no BN prior available)."""
    layers = (
        _conv(6, 5, 2), RELU, POOL,
        _conv(16, 5), RELU, POOL,
        FLAT, _dense(120), RELU, _dense(84), RELU, _dense(num_classes),
    )
    return ArchSpec("lenet_analog", tuple(input_shape), layers, num_classes)


def small_convnet(input_shape=(1, 28, 28), num_classes: int = 10, width: int = 8, hidden: int = 64) -> ArchSpec:
    """Two conv blocks and one hidden dense layer, each followed by BN (3 BN layers)."""
    layers = (
        _conv(width, 3, 1), BN, RELU, POOL,
        _conv(2 * width, 3, 1), BN, RELU, POOL,
        FLAT, _dense(hidden), BN, RELU, _dense(num_classes),
    )
    return ArchSpec("small_convnet", tuple(input_shape), layers, num_classes)


def mlp_bn(input_shape=(1, 28, 28), num_classes: int = 10, hidden=(128, 64)) -> ArchSpec:
    layers = [FLAT]
    for units in hidden:
        layers += [_dense(units), BN, RELU]
    layers.append(_dense(num_classes))
    return ArchSpec("mlp_bn", tuple(input_shape), tuple(layers), num_classes)


def mlp(input_shape=(1, 28, 28), num_classes: int = 10, hidden=(32,)) -> ArchSpec:
    layers = [FLAT]
    for units in hidden:
        layers += [_dense(units), RELU]
    layers.append(_dense(num_classes))
    return ArchSpec("mlp", tuple(input_shape), tuple(layers), num_classes)


def linear(input_shape=(1, 28, 28), num_classes: int = 10) -> ArchSpec:
    return ArchSpec("linear", tuple(input_shape), (FLAT, _dense(num_classes)), num_classes)


ZOO = {
    "lenet_analog": lenet_analog,
    "small_convnet": small_convnet,
    "mlp_bn": mlp_bn,
    "mlp": mlp,
    "linear": linear,
}


def arch_by_name(name: str, input_shape, num_classes: int, **options) -> ArchSpec:
    if name not in ZOO:
        raise ArchError(f"unknown architecture '{name}', choose from {sorted(ZOO)}")
    return ZOO[name](tuple(input_shape), num_classes, **options)
