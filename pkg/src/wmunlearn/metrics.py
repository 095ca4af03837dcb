"""Decision threshold, rescaled watermark accuracy, the success criterion and attack reports."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .models import Model
from .training import accuracy
from .utils import to_jsonable
from .watermark import WatermarkSet, watermark_accuracy

logger = logging.getLogger(__name__)

THRESHOLD_RULE = "max+1std, floor 1/C, cap 0.999"
INTEGRITY_LIMIT = 0.9


@dataclass
class ThresholdEstimate:
    theta: float
    null_accuracies: list
    rule: str = THRESHOLD_RULE
    raw: float = 0.0
    integrity_ok: bool = True
    fidelity_reference: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def threshold_from_accuracies(null_accuracies: Sequence[float], num_classes: int) -> ThresholdEstimate:
    """theta = max + sample std of the null watermark accuracies, floored at 1/C and capped at 0.999."""
    accs = np.asarray(null_accuracies, dtype=np.float64)
    if accs.size < 2:
        raise ValueError(f"threshold estimation needs at least 2 null models, got {accs.size}")
    raw = float(accs.max() + accs.std(ddof=1))
    theta = min(max(raw, 1.0 / num_classes), 0.999)
    estimate = ThresholdEstimate(theta=theta, null_accuracies=accs.tolist(), raw=raw, integrity_ok=raw < INTEGRITY_LIMIT)
    logger.info("threshold (%s): raw %.4f -> theta %.4f over %d null models", THRESHOLD_RULE, raw, theta, accs.size)
    if not estimate.integrity_ok:
        logger.warning("null models reach %.3f watermark accuracy; the watermark does not separate from clean models", raw)
    return estimate


def estimate_threshold(
    wm: WatermarkSet,
    null_factory: Callable[[int], Model],
    n: int = 20,
    seeds: Optional[Sequence[int]] = None,
    num_classes: Optional[int] = None,
    reference: Optional[Dataset] = None,
) -> ThresholdEstimate:
    """Train ``n`` clean models with ``null_factory(seed)`` and derive theta from their watermark accuracy.

    With ``reference`` the mean clean accuracy of the null models is recorded
    as the fidelity reference.
    """
    seeds = list(range(n)) if seeds is None else list(seeds)
    if len(seeds) < 2:
        raise ValueError(f"threshold estimation needs at least 2 null models, got {len(seeds)}")
    accs, clean = [], []
    for seed in seeds:
        null = null_factory(seed)
        accs.append(watermark_accuracy(null, wm))
        if reference is not None:
            clean.append(accuracy(null, reference))
    C = num_classes if num_classes is not None else int(max(wm.targets.max() + 1, 2))
    estimate = threshold_from_accuracies(accs, C)
    if clean:
        estimate.fidelity_reference = float(np.mean(clean))
    return estimate


def rescaled_accuracy(x: float, theta: float, theta_prime: float = 0.5) -> float:
    """Linear map sending theta to theta_prime and 1 to 1, clipped at 0."""
    if theta >= 1.0:
        raise ValueError(f"theta must be < 1, got {theta}")
    if not 0.0 <= theta:
        raise ValueError(f"theta must be >= 0, got {theta}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {x}")
    return max(0.0, (1.0 - theta_prime) / (1.0 - theta) * x + (theta_prime - theta) / (1.0 - theta))


@dataclass
class AttackReport:
    scheme: str
    attack: str
    setting: str
    seed: int
    clean_before: float
    clean_after: float
    wm_before: float
    wm_after: float
    theta: float
    rescaled_before: float = 0.0
    rescaled_after: float = 0.0
    success: bool = False
    verdict: Optional[dict] = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return to_jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "AttackReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def attack_success(report: AttackReport) -> bool:
    """Rescaled watermark accuracy strictly below 0.5 while keeping 90% of the clean accuracy."""
    return report.rescaled_after < 0.5 and report.clean_after >= 0.9 * report.clean_before


def make_report(
    scheme: str, attack: str, setting: str, seed: int,
    clean_before: float, clean_after: float, wm_before: float, wm_after: float, theta: float,
    **extra,
) -> AttackReport:
    report = AttackReport(
        scheme, attack, setting, seed, clean_before, clean_after, wm_before, wm_after, theta,
        rescaled_before=rescaled_accuracy(wm_before, theta),
        rescaled_after=rescaled_accuracy(wm_after, theta),
        **extra,
    )
    report.success = attack_success(report)
    return report


def format_pair(clean: float, rescaled: float) -> str:
    """``clean / rescaled`` in percent with one decimal."""
    return f"{100 * clean:.1f} / {100 * rescaled:.1f}"


REPORT_COLUMNS = (
    "scheme", "attack", "setting", "seed", "clean_before", "clean_after",
    "wm_before", "wm_after", "theta", "rescaled_after", "success",
)


def write_report_csv(reports: Sequence[AttackReport], path: str) -> None:
    with open(path, "x", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(REPORT_COLUMNS) + ["result"])
        writer.writeheader()
        for r in reports:
            row = {k: getattr(r, k) for k in REPORT_COLUMNS}
            row["result"] = format_pair(r.clean_after, r.rescaled_after)
            writer.writerow(row)


def write_report_markdown(reports: Sequence[AttackReport], path: str) -> None:
    lines = [
        "| scheme | attack | setting | seed | before | after | success |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        lines.append(
            f"| {r.scheme} | {r.attack} | {r.setting} | {r.seed} | "
            f"{format_pair(r.clean_before, r.rescaled_before)} | {format_pair(r.clean_after, r.rescaled_after)} | "
            f"{'yes' if r.success else 'no'} |"
        )
    with open(path, "x") as f:
        f.write("\n".join(lines) + "\n")


def write_report_json(reports: Sequence[AttackReport], path: str, extra: Optional[dict] = None) -> None:
    payload = {**(extra or {}), "reports": [r.to_dict() for r in reports]}
    with open(path, "x") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def read_report_json(path: str) -> tuple[dict, list[AttackReport]]:
    with open(path) as f:
        payload = json.load(f)
    reports = [AttackReport.from_dict(r) for r in payload.pop("reports", [])]
    return payload, reports
