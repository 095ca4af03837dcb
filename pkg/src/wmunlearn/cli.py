"""Command-line interface.

Every subcommand prints one JSON document on stdout; logs go to stderr.
Exit codes: 0 success, 1 configuration error, 2 stage or runtime failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .baselines import BASELINE_KINDS, BaselineConfig, run_baseline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RUN_ROOT, WORKERS
from .detection import DetectionVerdict, NoiseConfig, detect_target_class
from .errors import ConfigError, StageError, WmUnlearnError
from .inversion import InversionConfig, load_recovered, recover_all, save_png_grid, save_recovered
from .models import build_model
from .pipeline import aggregate_reports, auxiliary_for, build_arch, build_datasets, build_scheme, run_many, run_pipeline
from .runconfig import RunConfig, load_run_config
from .splitting import SplitConfig, split_all
from .theory import WatermarkSpec, sweep_conditions, verify_discrepancy
from .training import TrainConfig, accuracy, train
from .unlearning import AuxMode, UnlearnConfig, skip_split, unlearn_basic, unlearn_fixed, unlearn_nonfixed
from .utils import derive_seed, setup_logging, to_jsonable
from .watermark import EmbedConfig, embed, load_watermark_set, make_watermark_set, save_watermark_set, watermark_accuracy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2


def _emit(payload) -> None:
    json.dump(to_jsonable(payload), sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _fresh(path: str) -> str:
    if os.path.exists(path):
        raise ConfigError(f"output {path} already exists")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    return cfg.with_overrides(scheme=getattr(args, "scheme", None), setting=getattr(args, "setting", None))


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _noise(args, cfg: Optional[RunConfig]) -> NoiseConfig:
    base = cfg.noise if cfg is not None else NoiseConfig()
    return NoiseConfig(
        base.input_sigma if args.input_sigma is None else args.input_sigma,
        base.param_sigma if args.param_sigma is None else args.param_sigma,
        base.trials if args.trials is None else args.trials,
    )


def _split_cfg(cfg: RunConfig) -> SplitConfig:
    return SplitConfig(cfg.split.layer, cfg.split.beta, cfg.split.gamma)


def _unlearn_cfg(cfg: RunConfig, seed: int) -> UnlearnConfig:
    uc = cfg.unlearn
    return UnlearnConfig(uc.epochs, uc.batch_size, uc.lr, uc.alpha_kl, uc.kl_convention, uc.update_bn, derive_seed(seed, "unlearn"))


# -- subcommands --------------------------------------------------------------------


def cmd_train(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    data = build_datasets(cfg, seed)
    tc = cfg.train
    model = build_model(build_arch(cfg), derive_seed(seed, "init"))
    result = train(model, data.train, TrainConfig(tc.epochs, tc.batch_size, tc.lr, tc.optimizer, derive_seed(seed, "train")))
    save_checkpoint(result.model, _fresh(args.out), {"seed": seed})
    return {"checkpoint": args.out, "history": result.history, "test_accuracy": accuracy(result.model, data.test)}


def cmd_embed(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    data = build_datasets(cfg, seed)
    scheme = build_scheme(cfg, seed)
    wm = make_watermark_set(scheme, data.train, cfg.scheme.size, derive_seed(seed, "watermark"))
    ec = cfg.embed
    result = embed(
        build_arch(cfg), data.train, wm,
        EmbedConfig(ec.epochs, ec.batch_size, ec.wm_batch_size, ec.lr, ec.optimizer, derive_seed(seed, "embed")),
    )
    save_checkpoint(result.model, _fresh(args.out))
    wm_path = args.watermark_out or os.path.splitext(args.out)[0] + ".wm.bin"
    save_watermark_set(wm, _fresh(wm_path))
    return {
        "checkpoint": args.out,
        "watermark": wm_path,
        "scheme": scheme.to_dict(),
        "test_accuracy": accuracy(result.model, data.test),
        "watermark_accuracy": watermark_accuracy(result.model, wm),
    }


def cmd_recover(args) -> dict:
    model = load_checkpoint(args.model)
    ic = InversionConfig()
    if args.config:
        c = load_run_config(args.config).inversion
        ic = InversionConfig(c.samples_per_class, c.alpha_l2, c.alpha_tv, c.alpha_bn, c.steps, c.lr)
    ic = InversionConfig(
        args.samples or ic.samples_per_class, ic.alpha_l2, ic.alpha_tv, ic.alpha_bn,
        ic.steps if args.steps is None else args.steps, ic.lr, args.seed,
    )
    batches = recover_all(model, ic, workers=args.workers)
    save_recovered(batches, _fresh(args.out))
    if args.png_dir:
        for batch in batches:
            save_png_grid(batch.samples, _fresh(os.path.join(args.png_dir, f"class_{batch.cls}.png")))
    return {
        "recovered": args.out,
        "classes": [{"cls": b.cls, "hit_rate": b.hit_rate, "losses": b.losses} for b in batches],
    }


def cmd_detect(args) -> dict:
    model = load_checkpoint(args.model)
    cfg = load_run_config(args.config) if args.config else None
    threshold = args.threshold
    if threshold is None:
        threshold = cfg.detection.threshold if cfg is not None else 0.4
    verdict = detect_target_class(model, load_recovered(args.recovered), threshold, _noise(args, cfg), args.seed)
    if args.out:
        with open(_fresh(args.out), "x") as f:
            json.dump(verdict.to_dict(), f, indent=2, sort_keys=True)
    return verdict.to_dict()


def cmd_split(args) -> dict:
    model = load_checkpoint(args.model)
    batches = load_recovered(args.recovered)
    if args.cls is not None:
        batches = [b for b in batches if b.cls == args.cls]
        if not batches:
            raise ConfigError(f"--class {args.cls}: no recovered batch for that class")
    splits = split_all(model, batches, SplitConfig(args.layer, args.beta, args.gamma))
    return {"classes": [splits[c].to_dict() for c in sorted(splits)]}


def cmd_unlearn(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    model = load_checkpoint(args.model)
    batches = load_recovered(args.recovered)
    data = build_datasets(cfg, seed)
    setting = args.setting or cfg.attack.settings[0]
    aux = auxiliary_for(setting, data, model)
    ucfg = _unlearn_cfg(cfg, seed)
    if cfg.attack.mode == "basic":
        attacked, path = unlearn_basic(model, batches, aux, ucfg), "basic"
    else:
        if args.verdict is None:
            raise ConfigError("unlearn: improved mode needs --verdict")
        with open(args.verdict) as f:
            verdict = DetectionVerdict.from_dict(json.load(f))
        by_class = {b.cls: b for b in batches}
        splits = split_all(model, batches, _split_cfg(cfg))
        opt_aux = None if aux.is_data_free else aux
        if verdict.is_fixed and cfg.attack.skip_split:
            attacked, path = skip_split(model, by_class[verdict.target], opt_aux, ucfg), "skip-split"
        elif verdict.is_fixed:
            s0 = verdict.target
            batch = by_class[s0]
            attacked = unlearn_fixed(
                model, batch.samples[splits[s0].proxy_wmk], batch.samples[splits[s0].proxy_nor], s0, opt_aux, ucfg
            )
            path = "fixed"
        else:
            proxy = {c: by_class[c].samples[splits[c].proxy_wmk] for c in splits}
            attacked = unlearn_nonfixed(model, proxy, verdict.least_likely, verdict.second_least_likely, aux, ucfg)
            path = "nonfixed"
    save_checkpoint(attacked, _fresh(args.out), {"attack": path, "setting": setting})
    out = {"checkpoint": args.out, "path": path, "setting": setting, "test_accuracy": accuracy(attacked, data.test)}
    if args.watermark:
        out["watermark_accuracy"] = watermark_accuracy(attacked, load_watermark_set(args.watermark))
    return out


def cmd_baseline(args) -> dict:
    cfg = _config(args)
    seed = _seed(args, cfg)
    model = load_checkpoint(args.model)
    data = build_datasets(cfg, seed)
    setting = args.setting or ("data-free" if args.kind == "prune" else "in-distribution")
    aux = auxiliary_for(setting, data, model)
    bc = cfg.baselines
    bcfg = BaselineConfig(
        args.kind, bc.prune_ratio, bc.neuron_ratio, bc.lr, bc.lr_decay, bc.finetune_lr, bc.l2,
        bc.epochs, bc.batch_size, derive_seed(seed, "baseline", args.kind),
    )
    attacked = run_baseline(model, aux, bcfg)
    save_checkpoint(attacked, _fresh(args.out), {"attack": args.kind, "setting": setting})
    out = {"checkpoint": args.out, "kind": args.kind, "setting": setting, "test_accuracy": accuracy(attacked, data.test)}
    if args.watermark:
        out["watermark_accuracy"] = watermark_accuracy(attacked, load_watermark_set(args.watermark))
    return out


def cmd_attack(args) -> dict:
    cfg = _config(args)
    if args.seed is not None:
        path, reports = run_pipeline(cfg, args.seed, args.root)
        return {"run_dir": path, "reports": [r.to_dict() for r in reports]}
    runs = run_many(cfg, args.root, args.workers)
    failed = [r for r in runs if not r["ok"]]
    if failed:
        raise StageError("attack", RuntimeError(f"{len(failed)} of {len(runs)} seeds failed: {failed}"))
    return {"runs": runs}


def cmd_theory(args) -> dict:
    if args.sweep:
        rows = sweep_conditions(args.sweep, args.seed, args.sigma_input, args.sigma_param)
        if args.out:
            with open(_fresh(args.out), "x", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)
        claimed = [r for r in rows if r["claimed"]]
        return {
            "specs": len(rows),
            "claimed": len(claimed),
            "claimed_and_held": sum(1 for r in claimed if r["input_holds"] and r["param_holds"]),
            "csv": args.out,
        }
    missing = [k for k in ("d", "mu_pos", "mu_neg", "mu_wm", "sigma", "sigma_wm", "p") if getattr(args, k) is None]
    if missing:
        raise ConfigError(f"theory: missing --{', --'.join(m.replace('_', '-') for m in missing)} (or use --sweep)")
    spec = WatermarkSpec(args.d, args.mu_pos, args.mu_neg, args.mu_wm, args.sigma, args.sigma_wm, args.p)
    report = verify_discrepancy(spec, args.sigma_input, args.sigma_param, draws=args.draws, seed=args.seed, w1=args.w1)
    return {**report.to_dict(), "mc_consistent": report.mc_consistent()}


def cmd_report(args) -> dict:
    reports = aggregate_reports(args.run_dirs, args.out)
    return {"reports": [r.to_dict() for r in reports], "successes": sum(r.success for r in reports), "out": args.out}


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmunlearn", description="Watermark embedding, recovery and unlearning.")
    parser.add_argument("--log-level", default=None, help="override WMUNLEARN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="seed (default: first configured seed)")

    p = sub.add_parser("train", help="train a clean model")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="build a watermark set and train a watermarked model")
    with_config(p)
    p.add_argument("--scheme", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--watermark-out", default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("recover", help="invert a model into one batch per class")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None, help="take inversion settings from a run config")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--png-dir", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("detect", help="SmoothAcc verdict over recovered batches")
    p.add_argument("--model", required=True)
    p.add_argument("--recovered", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--input-sigma", type=float, default=None)
    p.add_argument("--param-sigma", type=float, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("split", help="split recovered batches into proxy normal / proxy watermark")
    p.add_argument("--model", required=True)
    p.add_argument("--recovered", required=True)
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--beta", type=float, default=0.95)
    p.add_argument("--gamma", type=float, default=0.5)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("unlearn", help="unlearn the watermark from a model")
    with_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--recovered", required=True)
    p.add_argument("--verdict", default=None, help="verdict JSON (improved mode)")
    p.add_argument("--setting", default=None, choices=[m.value for m in AuxMode])
    p.add_argument("--watermark", default=None, help="watermark set to score the result against")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("baseline", help="run a baseline removal attack")
    with_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--kind", required=True, choices=BASELINE_KINDS)
    p.add_argument("--setting", default=None, choices=[m.value for m in AuxMode])
    p.add_argument("--watermark", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("attack", help="full pipeline run(s) with reports")
    with_config(p)
    p.add_argument("--scheme", default=None)
    p.add_argument("--setting", default=None, choices=[m.value for m in AuxMode])
    p.add_argument("--root", default=RUN_ROOT)
    p.add_argument("--workers", type=int, default=WORKERS)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("theory", help="smoothness discrepancy on Gaussian mixtures")
    for name, kind in (("d", int), ("mu-pos", float), ("mu-neg", float), ("mu-wm", float),
                       ("sigma", float), ("sigma-wm", float), ("p", float)):
        p.add_argument(f"--{name}", type=kind, default=None)
    p.add_argument("--sigma-input", type=float, default=0.5)
    p.add_argument("--sigma-param", type=float, default=0.5)
    p.add_argument("--w1", type=float, default=1.0)
    p.add_argument("--draws", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", type=int, default=0, help="sample N random specs instead")
    p.add_argument("--out", default=None, help="sweep CSV")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("report", help="aggregate report.json of run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        payload = args.func(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        logger.error("%s (run directory: %s)", exc, getattr(exc, "run_dir", None))
        return EXIT_FAILURE
    except (WmUnlearnError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE
    _emit(payload)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
