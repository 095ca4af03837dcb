"""SGD and Adam updates over named parameter arrays."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.step < 0:
            raise ValueError("step counter must be nonnegative")


def optimizer_step(
    state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Apply one update in place and return (params, state).

    Gradients are all checked before any parameter moves, so a non-finite
    gradient leaves every parameter untouched.
    """
    if set(params) != set(grads):
        raise ValueError(f"params and grads are not aligned: {sorted(set(params) ^ set(grads))}")
    for name in params:
        if grads[name].shape != params[name].shape:
            raise ValueError(f"gradient shape {grads[name].shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'", name=name)

    state.step += 1
    if state.kind == "sgd":
        for name, p in params.items():
            p -= state.lr * grads[name]
        return params, state

    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
