"""End-to-end attack runs: embed, recover, detect, split, unlearn, baselines, report.

Each run owns one append-only directory under the run root. Stages are
recorded in ``stages.jsonl`` as they finish; ``manifest.json`` is written
once when the run ends, successfully or not.
"""

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import metadata
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import BaselineConfig, run_baseline
from .checkpoint import save_checkpoint
from .config import RUN_ROOT, WORKERS
from .data import Dataset, SynthSpec, load_mnist, shifted_copy, split_indices, synth_dataset
from .detection import NoiseConfig, detect_target_class, true_target_gap
from .errors import StageError, TrainingDivergedError
from .inversion import InversionConfig, recover_all, save_png_grid, save_recovered
from .metrics import (
    AttackReport,
    estimate_threshold,
    make_report,
    read_report_json,
    write_report_csv,
    write_report_json,
    write_report_markdown,
)
from .models import ArchSpec, Model, arch_by_name, build_model
from .runconfig import RunConfig
from .splitting import SplitConfig, contributions, split_all, tap_activations
from .training import TrainConfig, accuracy, train
from .unlearning import (
    AuxiliaryData,
    AuxMode,
    UnlearnConfig,
    pseudo_label,
    skip_split,
    unlearn_basic,
    unlearn_fixed,
    unlearn_nonfixed,
)
from .utils import derive_seed, sha256_file, to_jsonable
from .watermark import (
    FIXED_CLASS_TAGS,
    EmbedConfig,
    SchemeTag,
    WatermarkScheme,
    embed,
    make_watermark_set,
    save_watermark_set,
    watermark_accuracy,
)

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "scipy", "PyYAML", "tqdm", "Pillow", "httpx", "mcp")


def package_versions() -> dict:
    versions = {"wmunlearn": __version__}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


class RunDirectory:
    """Append-only run directory ``<root>/<name>-<hash8>-s<seed>[-k]``."""

    def __init__(self, path: str):
        self.path = path
        self.stages: list[dict] = []
        self.timings: dict[str, float] = {}

    @classmethod
    def create(cls, root: str, name: str, config_hash: str, seed: int) -> "RunDirectory":
        os.makedirs(root, exist_ok=True)
        base = os.path.join(root, f"{name}-{config_hash[:8]}-s{seed}")
        path, k = base, 1
        while True:
            try:
                os.makedirs(path)
                break
            except FileExistsError:
                path, k = f"{base}-{k}", k + 1
        return cls(path)

    def file(self, name: str) -> str:
        path = os.path.join(self.path, name)
        if os.path.exists(path):
            raise FileExistsError(f"{path} already exists; run directories are append-only")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def write_json(self, name: str, payload) -> str:
        path = self.file(name)
        with open(path, "x") as f:
            json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        return path

    def write_csv(self, name: str, rows: Sequence[dict]) -> str:
        path = self.file(name)
        columns = list(rows[0]) if rows else ["epoch"]
        with open(path, "x", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
        return path

    def record(self, entry: dict) -> None:
        self.stages.append(entry)
        with open(os.path.join(self.path, "stages.jsonl"), "a") as f:
            f.write(json.dumps(to_jsonable(entry), sort_keys=True) + "\n")

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        logger.info("[%s] stage %s", os.path.basename(self.path), name)
        try:
            yield
        except Exception as exc:
            with open(self.file("FAILED"), "x") as f:
                f.write(f"stage: {name}\n\n{traceback.format_exc()}")
            self.record({"stage": name, "status": "failed", "seconds": time.perf_counter() - start, "error": str(exc)})
            raise StageError(name, exc) from exc
        self.record({"stage": name, "status": "ok", "seconds": time.perf_counter() - start})

    def artifacts(self) -> dict:
        out = {}
        for dirpath, _, files in os.walk(self.path):
            for fname in sorted(files):
                if fname in ("manifest.json", "stages.jsonl"):
                    continue
                full = os.path.join(dirpath, fname)
                out[os.path.relpath(full, self.path)] = sha256_file(full)
        return dict(sorted(out.items()))

    def write_manifest(self, cfg: RunConfig, seed: int, status: str) -> None:
        self.write_json(
            "manifest.json",
            {
                "name": cfg.name,
                "config": cfg.to_dict(),
                "config_hash": cfg.hash(),
                "seed": seed,
                "status": status,
                "versions": package_versions(),
                "stages": self.stages,
                "timings": self.timings,
                "artifacts": self.artifacts(),
            },
        )


# -- stage helpers ------------------------------------------------------------------


@dataclass
class Datasets:
    train: Dataset
    test: Dataset
    aux: Dataset
    transfer: np.ndarray


def build_datasets(cfg: RunConfig, seed: int) -> Datasets:
    """Owner training/test data, the attacker's labeled aux set and shifted unlabeled transfer images."""
    ds = cfg.dataset
    if ds.source == "synth":
        spec = SynthSpec(num_classes=ds.num_classes, shape=tuple(ds.shape), stds=ds.stds, separation=ds.separation)
        train_set = synth_dataset(spec, ds.train_size, derive_seed(seed, "data", "train"))
        test_set = synth_dataset(spec, ds.test_size, derive_seed(seed, "data", "test"))
        aux_set = synth_dataset(spec, ds.aux_size, derive_seed(seed, "data", "aux"))
        pool = synth_dataset(spec, ds.transfer_size, derive_seed(seed, "data", "transfer")).images
    else:
        kwargs = {"dest": ds.data_dir} if ds.data_dir else {}
        full = load_mnist("train", **kwargs)
        test_full = load_mnist("test", download=False, **kwargs)
        train_idx, aux_idx, transfer_idx = split_indices(
            len(full), [ds.train_size, ds.aux_size, ds.transfer_size], derive_seed(seed, "data", "split")
        )
        train_set, aux_set = full.subset(train_idx), full.subset(aux_idx)
        test_set = test_full.subset(np.arange(min(ds.test_size, len(test_full))))
        pool = full.images[transfer_idx]
    transfer = shifted_copy(pool, derive_seed(seed, "data", "shift"))
    return Datasets(train_set, test_set, aux_set, transfer)


def build_scheme(cfg: RunConfig, seed: int) -> WatermarkScheme:
    tag = SchemeTag(cfg.scheme.tag)
    target = cfg.scheme.target_class
    fixed = tag in FIXED_CLASS_TAGS
    if fixed and target is None:
        target = int(np.random.default_rng(derive_seed(seed, "target")).integers(cfg.dataset.num_classes))
    return WatermarkScheme(tag, target if fixed else None, cfg.scheme.noise_sigma, cfg.scheme.ood_kind)


def build_arch(cfg: RunConfig) -> ArchSpec:
    return arch_by_name(cfg.arch.name, cfg.dataset.shape, cfg.dataset.num_classes, **cfg.arch.options)


def null_model_factory(arch: ArchSpec, data: Dataset, cfg: RunConfig, seed: int):
    train_cfg = cfg.train

    def factory(index: int) -> Model:
        model = build_model(arch, derive_seed(seed, "null", index))
        tc = TrainConfig(
            epochs=train_cfg.epochs, batch_size=train_cfg.batch_size, lr=train_cfg.lr,
            optimizer=train_cfg.optimizer, seed=derive_seed(seed, "null-train", index),
        )
        return train(model, data, tc).model

    return factory


def make_monitor(test: Dataset, wm):
    def monitor(epoch: int, model: Model) -> dict:
        return {"clean_accuracy": accuracy(model, test), "watermark_accuracy": watermark_accuracy(model, wm)}

    return monitor


def auxiliary_for(setting: str, data: Datasets, model: Model) -> AuxiliaryData:
    mode = AuxMode(setting)
    if mode == AuxMode.IN_DISTRIBUTION:
        return AuxiliaryData.in_distribution(data.aux)
    if mode == AuxMode.TRANSFER:
        return pseudo_label(model, data.transfer)
    return AuxiliaryData.data_free()


# -- the run ------------------------------------------------------------------------


def _execute(run: RunDirectory, cfg: RunConfig, seed: int) -> list[AttackReport]:
    state: dict = {}

    with run.stage("data"):
        data = build_datasets(cfg, seed)
        scheme = build_scheme(cfg, seed)
        wm = make_watermark_set(scheme, data.train, cfg.scheme.size, derive_seed(seed, "watermark"))
        save_watermark_set(wm, run.file("watermark.bin"))
        arch = build_arch(cfg)

    with run.stage("embed"):
        ec = cfg.embed
        result = embed(
            arch, data.train, wm,
            EmbedConfig(ec.epochs, ec.batch_size, ec.wm_batch_size, ec.lr, ec.optimizer, derive_seed(seed, "embed")),
        )
        model = result.model
        save_checkpoint(model, run.file("watermarked.ckpt"))
        clean_before = accuracy(model, data.test)
        wm_before = watermark_accuracy(model, wm)
        run.write_json("embed.json", {
            "train_accuracy": result.clean_accuracy, "test_accuracy": clean_before,
            "watermark_accuracy": wm_before, "history": result.history, "scheme": scheme.to_dict(),
            "watermark_steps": int(sum(1 for n in result.wm_counts if n)),
        })

    with run.stage("threshold"):
        threshold = estimate_threshold(
            wm, null_model_factory(arch, data.train, cfg, seed), n=cfg.threshold.null_models,
            num_classes=cfg.dataset.num_classes, reference=data.test,
        )
        run.write_json("threshold.json", threshold.to_dict())

    with run.stage("recover"):
        ic = cfg.inversion
        recovered = recover_all(
            model,
            InversionConfig(ic.samples_per_class, ic.alpha_l2, ic.alpha_tv, ic.alpha_bn, ic.steps, ic.lr, derive_seed(seed, "invert")),
        )
        save_recovered(recovered, run.file("recovered.bin"))
        if ic.save_png:
            for batch in recovered:
                save_png_grid(batch.samples, run.file(os.path.join("recovered", f"class_{batch.cls}.png")))

    with run.stage("detect"):
        nc = cfg.noise
        verdict = detect_target_class(
            model, recovered, cfg.detection.threshold, NoiseConfig(nc.input_sigma, nc.param_sigma, nc.trials),
            derive_seed(seed, "detect"),
        )
        payload = verdict.to_dict()
        if scheme.is_fixed:
            payload["true_target"] = scheme.target_class
            payload["true_target_gap"] = true_target_gap(verdict, scheme.target_class)
        payload["least_pair_gap"] = verdict.values[verdict.least_likely] - verdict.values[verdict.second_least_likely]
        run.write_json("verdict.json", payload)

    with run.stage("split"):
        sc = cfg.split
        splits = split_all(model, recovered, SplitConfig(sc.layer, sc.beta, sc.gamma))
        payload = {"classes": [splits[c].to_dict() for c in sorted(splits)]}
        if scheme.is_fixed and wm.source_indices is not None:
            # normal-data dominance check on the true target's salient neurons (reporting only)
            s = splits[scheme.target_class]
            normal = data.train.images[data.train.of_class(scheme.target_class)]
            payload["contribution_check"] = {
                "normal_mean": float(contributions(tap_activations(model, normal, sc.layer), s.salient).mean()),
                "watermark_mean": float(contributions(tap_activations(model, wm.samples, sc.layer), s.salient).mean()),
            }
        run.write_json("split.json", payload)

    reports: list[AttackReport] = []
    uc = cfg.unlearn
    ucfg = UnlearnConfig(uc.epochs, uc.batch_size, uc.lr, uc.alpha_kl, uc.kl_convention, uc.update_bn, derive_seed(seed, "unlearn"))
    monitor = make_monitor(data.test, wm)

    def finish(label: str, setting: str, attacked: Model, trajectory: list, started: float) -> None:
        save_checkpoint(attacked, run.file(f"{label}-{setting}.ckpt"))
        run.write_csv(f"trajectory_{label}-{setting}.csv", trajectory)
        reports.append(make_report(
            scheme.tag.value, label, setting, seed,
            clean_before, accuracy(attacked, data.test), wm_before, watermark_accuracy(attacked, wm), threshold.theta,
            verdict=verdict.to_dict(), provenance={"config_hash": cfg.hash()},
        ))
        run.timings[f"{label}-{setting}"] = time.perf_counter() - started

    def recording(trajectory: list):
        def record(epoch, current):
            row = {"epoch": epoch, **monitor(epoch, current)}
            trajectory.append(row)
            return row

        return record

    auxes: dict[str, AuxiliaryData] = {}

    def aux_for(setting: str) -> AuxiliaryData:
        # one object per setting, shared by the attack and every baseline
        if setting not in auxes:
            auxes[setting] = auxiliary_for(setting, data, model)
        return auxes[setting]

    with run.stage("unlearn"):
        mode = cfg.attack.mode
        label = f"{mode}-skip-split" if cfg.attack.skip_split and mode == "improved" else mode
        for setting in cfg.attack.settings:
            aux = aux_for(setting)
            trajectory: list = []
            started = time.perf_counter()
            try:
                if mode == "basic":
                    attacked = unlearn_basic(model, recovered, aux, ucfg, recording(trajectory))
                elif verdict.is_fixed:
                    s0 = verdict.target
                    opt_aux = None if aux.is_data_free else aux
                    if cfg.attack.skip_split:
                        attacked = skip_split(model, recovered[s0], opt_aux, ucfg, recording(trajectory))
                    else:
                        batch = recovered[s0]
                        attacked = unlearn_fixed(
                            model, batch.samples[splits[s0].proxy_wmk], batch.samples[splits[s0].proxy_nor],
                            s0, opt_aux, ucfg, recording(trajectory),
                        )
                elif aux.is_data_free:
                    logger.warning("non-fixed verdict: no data-free unlearning path, skipping setting %s", setting)
                    continue
                else:
                    proxy = {b.cls: b.samples[splits[b.cls].proxy_wmk] for b in recovered}
                    attacked = unlearn_nonfixed(
                        model, proxy, verdict.least_likely, verdict.second_least_likely, aux, ucfg, recording(trajectory)
                    )
            except TrainingDivergedError as exc:
                if exc.model is not None:
                    save_checkpoint(exc.model, run.file(f"{label}-{setting}.last-good.ckpt"))
                raise
            finish(label, setting, attacked, trajectory, started)

    if cfg.baselines.kinds:
        with run.stage("baselines"):
            bc = cfg.baselines
            for kind in bc.kinds:
                settings = ["data-free"] if kind == "prune" else [s for s in cfg.attack.settings if s != "data-free"]
                for setting in settings:
                    aux = aux_for(setting)
                    trajectory: list = []
                    started = time.perf_counter()
                    bcfg = BaselineConfig(
                        kind, bc.prune_ratio, bc.neuron_ratio, bc.lr, bc.lr_decay, bc.finetune_lr, bc.l2,
                        bc.epochs, bc.batch_size, derive_seed(seed, "baseline", kind),
                    )
                    attacked = run_baseline(model, aux, bcfg, recording(trajectory))
                    finish(kind, setting, attacked, trajectory, started)

    with run.stage("report"):
        extra = {"config_hash": cfg.hash(), "seed": seed, "threshold": threshold.to_dict()}
        write_report_json(reports, run.file("report.json"), extra)
        write_report_csv(reports, run.file("report.csv"))
        write_report_markdown(reports, run.file("report.md"))
    return reports


def run_pipeline(cfg: RunConfig, seed: int, root: str = RUN_ROOT) -> tuple[str, list[AttackReport]]:
    """Execute one seed of ``cfg`` in a fresh run directory; returns its path and the reports.

    A failing stage leaves the partial directory with a ``FAILED`` marker and
    raises StageError carrying ``run_dir``.
    """
    run = RunDirectory.create(root, cfg.name, cfg.hash(), seed)
    logger.info("run directory %s", run.path)
    status = "failed"
    try:
        reports = _execute(run, cfg, seed)
        status = "ok"
        return run.path, reports
    except StageError as exc:
        exc.run_dir = run.path
        raise
    finally:
        run.write_manifest(cfg, seed, status)


def _run_seed(args) -> dict:
    cfg, seed, root = args
    try:
        path, reports = run_pipeline(cfg, seed, root)
        return {"seed": seed, "run_dir": path, "ok": True, "successes": sum(r.success for r in reports)}
    except StageError as exc:
        return {"seed": seed, "run_dir": getattr(exc, "run_dir", None), "ok": False, "error": str(exc)}


def run_many(cfg: RunConfig, root: str = RUN_ROOT, workers: int = WORKERS) -> list[dict]:
    """One run per configured seed; seeds fan out over a process pool when ``workers > 1``."""
    jobs = [(cfg, seed, root) for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_seed, jobs))
    return [_run_seed(job) for job in jobs]


def aggregate_reports(run_dirs: Sequence[str], out_dir: Optional[str] = None) -> list[AttackReport]:
    """Collect ``report.json`` of several runs; with ``out_dir`` write the combined tables there."""
    reports: list[AttackReport] = []
    for path in run_dirs:
        _, rows = read_report_json(os.path.join(path, "report.json"))
        reports.extend(rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report_csv(reports, os.path.join(out_dir, "report.csv"))
        write_report_markdown(reports, os.path.join(out_dir, "report.md"))
    return reports
