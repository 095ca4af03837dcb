"""Central finite-difference oracle for Graph gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, evaluate, gradients


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(graph: Graph, inputs: dict[str, np.ndarray], h: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients against (f(x+h) - f(x-h)) / 2h for every entry."""
    evaluate(graph, inputs)
    analytic = gradients(graph)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def loss_at() -> float:
        return float(evaluate(graph, inputs)[graph.loss])

    worst_err, worst_name, checked = 0.0, "", 0
    for name, grad in analytic.items():
        target = graph.parameters[name] if name in graph.parameters else inputs[name]
        numeric = np.zeros_like(target)
        flat, nflat = target.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        err = relative_error(grad, numeric)
        checked += err.size
        if err.size and err.max() > worst_err:
            worst_err, worst_name = float(err.max()), f"{name}[{int(err.argmax())}]"
    return GradCheckResult(worst_err, worst_name, checked)
