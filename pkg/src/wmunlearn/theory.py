"""Smoothness discrepancy on Gaussian mixtures: closed forms and Monte Carlo checks.

Canonical problem: d-dimensional classes centered at +1 and -1 (all
coordinates), isotropic stds sigma_pos and sigma_neg, prior alpha on the
positive class, and the linear classifier sign(w1 * (sum(x) + eta)).
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .errors import RegimeError

logger = logging.getLogger(__name__)


def normal_cdf(z):
    return norm.cdf(z)


@dataclass(frozen=True)
class MixtureSpec:
    d: int
    sigma_pos: float
    sigma_neg: float
    alpha: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.sigma_pos <= 0 or self.sigma_neg <= 0:
            raise ValueError("stds must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class WatermarkSpec:
    """Positive class plus a watermark component of relative weight p; coordinates share one mean."""

    d: int
    mu_pos: float
    mu_neg: float
    mu_wm: float
    sigma: float
    sigma_wm: float
    p: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.sigma <= 0 or self.sigma_wm <= 0:
            raise ValueError("stds must be positive")
        if self.p <= 0:
            raise ValueError(f"watermark ratio p must be positive, got {self.p}")


def _log_ratio(spec: MixtureSpec) -> float:
    return math.log(spec.alpha * spec.sigma_neg / ((1.0 - spec.alpha) * spec.sigma_pos))


def optimal_eta(sigma_pos: float, sigma_neg: float, alpha: float, d: int) -> float:
    """Risk-minimizing offset eta* = b*/w1* of the canonical mixture.

    Uses the rationalized root d(a-b) + 2abK over (a+b) + 2 s+ s- sqrt(.),
    which avoids cancellation when the variances are close.
    """
    spec = MixtureSpec(d, sigma_pos, sigma_neg, alpha)
    a, b = sigma_pos ** 2, sigma_neg ** 2
    if math.isclose(a, b, rel_tol=1e-12):
        return 0.5 * a * math.log(alpha / (1.0 - alpha))
    K = _log_ratio(spec)
    arg = 1.0 - K * (a - b) / (2.0 * d)
    if arg < 0:
        raise RegimeError(
            f"no stationary point: 1 - K(s+^2 - s-^2)/(2d) = {arg:.6g} < 0 (K={K:.4g}, d={d})"
        )
    return (d * (a - b) + 2.0 * a * b * K) / ((a + b) + 2.0 * sigma_pos * sigma_neg * math.sqrt(arg))


def risk(eta: float, spec: MixtureSpec) -> float:
    rd = math.sqrt(spec.d)
    return float(
        spec.alpha * norm.cdf(-(eta + spec.d) / (rd * spec.sigma_pos))
        + (1.0 - spec.alpha) * norm.cdf((eta - spec.d) / (rd * spec.sigma_neg))
    )


def stationarity_residual(eta: float, spec: MixtureSpec) -> float:
    """dR/deta divided by the density-peak scale phi(0)(alpha/(sqrt(d)s+) + (1-alpha)/(sqrt(d)s-))."""
    rd = math.sqrt(spec.d)
    sp, sn = rd * spec.sigma_pos, rd * spec.sigma_neg
    grad = -spec.alpha * norm.pdf((eta + spec.d) / sp) / sp + (1.0 - spec.alpha) * norm.pdf((eta - spec.d) / sn) / sn
    scale = norm.pdf(0.0) * (spec.alpha / sp + (1.0 - spec.alpha) / sn)
    return float(grad / scale)


def input_smoothness_closed(eta: float, sigma_class: float, sigma_input: float, d: int, sign: int) -> float:
    """Accuracy of class ``sign`` under isotropic input noise sigma_input."""
    if sign not in (1, -1):
        raise ValueError("class sign must be +1 or -1")
    return float(norm.cdf((sign * eta + d) / math.sqrt(d * (sigma_class ** 2 + sigma_input ** 2))))


def param_smoothness_closed(w1: float, eta: float, sigma_param: float, d: int, sign: int) -> float:
    """Accuracy at the class center under Gaussian noise on all d weights and the bias."""
    if w1 <= 0:
        raise ValueError(f"w1 must be positive, got {w1}")
    if sign not in (1, -1):
        raise ValueError("class sign must be +1 or -1")
    margin = w1 * (d + sign * eta)
    if sigma_param == 0:
        return 1.0 if margin > 0 else (0.5 if margin == 0 else 0.0)
    return float(norm.cdf(margin / (math.sqrt(d + 1) * sigma_param)))


def mixture_params(mu_pos: float, mu_wm: float, sigma: float, sigma_wm: float, p: float) -> tuple[float, float]:
    """Mean and variance of the positive class pooled with watermark data (weights 0.5 and p)."""
    if p <= 0:
        raise ValueError(f"p must be positive, got {p}")
    w = 0.5 + p
    mu = (0.5 * mu_pos + p * mu_wm) / w
    var = (0.5 * sigma ** 2 + p * sigma_wm ** 2) / w + (0.5 * p / w ** 2) * (mu_wm - mu_pos) ** 2
    return mu, var


def theorem_conditions(spec: WatermarkSpec) -> tuple[bool, bool]:
    w = 0.5 + spec.p
    shift = (spec.mu_wm - spec.mu_pos) ** 2
    cond1 = (spec.p / w) * (spec.sigma_wm ** 2 - spec.sigma ** 2) + (0.5 * spec.p / w ** 2) * shift > 0
    ratio = 0.5 / w + (spec.p / w) * (spec.sigma_wm ** 2 / spec.sigma ** 2) + (0.5 * spec.p / w ** 2) * (shift / spec.sigma ** 2)
    cond2 = spec.p > 0.5 * math.sqrt(ratio) - 0.5
    return bool(cond1), bool(cond2)


def canonical_reduction(spec: WatermarkSpec) -> MixtureSpec:
    """Translate, scale (and flip if needed) so the pooled positive and negative means sit at +1 and -1."""
    mu_mix, var_mix = mixture_params(spec.mu_pos, spec.mu_wm, spec.sigma, spec.sigma_wm, spec.p)
    gap = mu_mix - spec.mu_neg
    if gap == 0:
        raise RegimeError("degenerate reduction: pooled positive mean equals the negative mean")
    scale = 2.0 / abs(gap)
    alpha = (0.5 + spec.p) / (1.0 + spec.p)
    return MixtureSpec(spec.d, scale * math.sqrt(var_mix), scale * spec.sigma, alpha)


# -- Monte Carlo ------------------------------------------------------------------------


def _antithetic(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    half = rng.standard_normal((-(-n // 2), dim))
    return np.concatenate([half, -half])[:n]


def mc_input_smoothness(spec: MixtureSpec, eta: float, sigma_input: float, sign: int, draws: int, seed: int, chunk: int = 50_000) -> float:
    rng = np.random.default_rng(seed)
    sigma = spec.sigma_pos if sign == 1 else spec.sigma_neg
    hits, done = 0, 0
    while done < draws:
        n = min(chunk, draws - done)
        x = sign + sigma * _antithetic(rng, n, spec.d) + sigma_input * _antithetic(rng, n, spec.d)
        hits += int(np.sum(sign * (x.sum(axis=1) + eta) > 0))
        done += n
    return hits / draws


def mc_param_smoothness(spec: MixtureSpec, w1: float, eta: float, sigma_param: float, sign: int, draws: int, seed: int, chunk: int = 50_000) -> float:
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < draws:
        n = min(chunk, draws - done)
        noise = sigma_param * _antithetic(rng, n, spec.d + 1)
        weights = w1 + noise[:, :-1]
        bias = w1 * eta + noise[:, -1]
        score = sign * weights.sum(axis=1) + bias
        hits += int(np.sum(sign * score > 0))
        done += n
    return hits / draws


def binomial_stderr(p_hat: float, n: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)


@dataclass
class TheoryReport:
    spec: dict
    canonical: dict
    sigma_input: float
    sigma_param: float
    w1: float
    eta: float
    residual: float
    s_input_pos: float
    s_input_neg: float
    s_param_pos: float
    s_param_neg: float
    mc_input_pos: Optional[float]
    mc_input_neg: Optional[float]
    mc_param_pos: Optional[float]
    mc_param_neg: Optional[float]
    draws: int
    cond1: bool
    cond2: bool

    @property
    def claimed(self) -> bool:
        return self.cond1 and self.cond2

    @property
    def input_holds(self) -> bool:
        return self.s_input_pos > self.s_input_neg

    @property
    def param_holds(self) -> bool:
        return self.s_param_pos > self.s_param_neg

    def mc_consistent(self, k: float = 3.0) -> bool:
        """Every Monte Carlo estimate within k binomial standard errors of its closed form."""
        if self.draws == 0:
            return True
        pairs = [
            (self.s_input_pos, self.mc_input_pos), (self.s_input_neg, self.mc_input_neg),
            (self.s_param_pos, self.mc_param_pos), (self.s_param_neg, self.mc_param_neg),
        ]
        # one-draw slack for closed forms of exactly 0 or 1
        return all(abs(c - m) <= k * binomial_stderr(c, self.draws) + 1.0 / self.draws for c, m in pairs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(claimed=self.claimed, input_holds=self.input_holds, param_holds=self.param_holds)
        return out


def verify_discrepancy(
    spec: WatermarkSpec, sigma_input: float, sigma_param: float, draws: int = 200_000, seed: int = 0, w1: float = 1.0
) -> TheoryReport:
    """Reduce ``spec`` to canonical form, evaluate both smoothness pairs in closed form and by sampling.

    Noise levels are given in canonical coordinates. The inequalities are
    only claimed when both conditions hold.
    """
    canon = canonical_reduction(spec)
    eta = optimal_eta(canon.sigma_pos, canon.sigma_neg, canon.alpha, canon.d)
    cond1, cond2 = theorem_conditions(spec)
    mc = [None] * 4
    if draws > 0:
        mc = [
            mc_input_smoothness(canon, eta, sigma_input, 1, draws, seed),
            mc_input_smoothness(canon, eta, sigma_input, -1, draws, seed + 1),
            mc_param_smoothness(canon, w1, eta, sigma_param, 1, draws, seed + 2),
            mc_param_smoothness(canon, w1, eta, sigma_param, -1, draws, seed + 3),
        ]
    report = TheoryReport(
        spec=asdict(spec),
        canonical=asdict(canon),
        sigma_input=sigma_input,
        sigma_param=sigma_param,
        w1=w1,
        eta=eta,
        residual=stationarity_residual(eta, canon),
        s_input_pos=input_smoothness_closed(eta, canon.sigma_pos, sigma_input, canon.d, 1),
        s_input_neg=input_smoothness_closed(eta, canon.sigma_neg, sigma_input, canon.d, -1),
        s_param_pos=param_smoothness_closed(w1, eta, sigma_param, canon.d, 1),
        s_param_neg=param_smoothness_closed(w1, eta, sigma_param, canon.d, -1),
        mc_input_pos=mc[0],
        mc_input_neg=mc[1],
        mc_param_pos=mc[2],
        mc_param_neg=mc[3],
        draws=draws,
        cond1=cond1,
        cond2=cond2,
    )
    if report.claimed and not (report.input_holds and report.param_holds):
        logger.warning("smoothness inequality violated inside the condition region: %s", report.to_dict())
    return report


def input_gap_profile(spec: MixtureSpec, sigma_grid: Sequence[float]) -> list[tuple[float, float]]:
    """(sigma_input, S_I,+1 - S_I,-1) at the optimal offset for every grid value."""
    eta = optimal_eta(spec.sigma_pos, spec.sigma_neg, spec.alpha, spec.d)
    return [
        (
            float(s),
            input_smoothness_closed(eta, spec.sigma_pos, s, spec.d, 1)
            - input_smoothness_closed(eta, spec.sigma_neg, s, spec.d, -1),
        )
        for s in sigma_grid
    ]


def random_mixture_spec(rng: np.random.Generator) -> MixtureSpec:
    """A canonical spec inside the regime where eta* exists."""
    while True:
        spec = MixtureSpec(
            int(rng.integers(1, 51)), float(rng.uniform(0.3, 3.0)), float(rng.uniform(0.3, 3.0)), float(rng.uniform(0.05, 0.95))
        )
        a, b = spec.sigma_pos ** 2, spec.sigma_neg ** 2
        if 1.0 - _log_ratio(spec) * (a - b) / (2.0 * spec.d) >= 0:
            return spec


def random_watermark_spec(rng: np.random.Generator) -> WatermarkSpec:
    mu_pos = float(rng.uniform(0.5, 2.0))
    sigma = float(rng.uniform(0.5, 2.0))
    return WatermarkSpec(
        d=int(rng.integers(1, 21)),
        mu_pos=mu_pos,
        mu_neg=-float(rng.uniform(0.5, 2.0)),
        mu_wm=mu_pos + float(rng.uniform(-1.0, 1.0)),
        sigma=sigma,
        sigma_wm=sigma * float(rng.uniform(0.5, 3.0)),
        p=float(rng.uniform(0.05, 1.5)),
    )


def _reducible(spec: WatermarkSpec) -> bool:
    try:
        canon = canonical_reduction(spec)
        optimal_eta(canon.sigma_pos, canon.sigma_neg, canon.alpha, canon.d)
    except RegimeError:
        return False
    return True


def random_valid_spec(rng: np.random.Generator) -> WatermarkSpec:
    """A random watermark spec satisfying both conditions whose reduction has an optimum."""
    while True:
        spec = random_watermark_spec(rng)
        if all(theorem_conditions(spec)) and _reducible(spec):
            return spec


def sweep_conditions(n: int, seed: int, sigma_input: float = 0.5, sigma_param: float = 0.5) -> list[dict]:
    """Closed-form condition/inequality rows for ``n`` random watermark specs."""
    rng = np.random.default_rng(seed)
    rows = []
    while len(rows) < n:
        spec = random_watermark_spec(rng)
        if not _reducible(spec):
            continue
        report = verify_discrepancy(spec, sigma_input, sigma_param, draws=0)
        rows.append({
            **asdict(spec),
            "cond1": report.cond1,
            "cond2": report.cond2,
            "claimed": report.claimed,
            "eta": report.eta,
            "input_gap": report.s_input_pos - report.s_input_neg,
            "param_gap": report.s_param_pos - report.s_param_neg,
            "input_holds": report.input_holds,
            "param_holds": report.param_holds,
        })
    return rows
