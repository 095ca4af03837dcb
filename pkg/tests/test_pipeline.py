import json
import os

import pytest

from wmunlearn import pipeline
from wmunlearn.errors import StageError
from wmunlearn.pipeline import RunDirectory, aggregate_reports, build_scheme, run_many, run_pipeline
from wmunlearn.runconfig import parse_run_config

TINY = {
    "name": "tiny",
    "dataset": {"num_classes": 4, "shape": [1, 6, 6], "train_size": 160, "test_size": 80, "aux_size": 60, "transfer_size": 60},
    "arch": {"name": "small_convnet", "options": {"width": 2, "hidden": 8}},
    "train": {"epochs": 1, "batch_size": 32},
    "scheme": {"tag": "content", "target_class": 1, "size": 10},
    "embed": {"epochs": 3, "batch_size": 32},
    "inversion": {"samples_per_class": 4, "steps": 5, "save_png": True},
    "noise": {"trials": 2},
    "threshold": {"null_models": 2},
    "unlearn": {"epochs": 1, "batch_size": 32},
    "attack": {"settings": ["in-distribution", "transfer", "data-free"]},
    "baselines": {"kinds": ["prune", "finetune"], "epochs": 1, "batch_size": 32},
    "seeds": [0, 1],
}


@pytest.fixture
def tiny_cfg():
    return parse_run_config(TINY)


def _read(path):
    with open(path) as f:
        return json.load(f)


class TestRunDirectory:
    def test_directories_are_never_reused(self, tmp_path):
        a = RunDirectory.create(str(tmp_path), "run", "0123456789abcdef", 3)
        b = RunDirectory.create(str(tmp_path), "run", "0123456789abcdef", 3)
        assert os.path.basename(a.path) == "run-01234567-s3"
        assert os.path.basename(b.path) == "run-01234567-s3-1"

    def test_files_are_append_only(self, tmp_path):
        run = RunDirectory.create(str(tmp_path), "run", "abcdefgh", 0)
        run.write_json("a.json", {"x": 1})
        with pytest.raises(FileExistsError):
            run.write_json("a.json", {"x": 2})
        assert _read(os.path.join(run.path, "a.json")) == {"x": 1}

    def test_failed_stage_leaves_marker(self, tmp_path):
        run = RunDirectory.create(str(tmp_path), "run", "abcdefgh", 0)
        with run.stage("load"):
            pass
        with pytest.raises(StageError) as err:
            with run.stage("train"):
                raise RuntimeError("boom")
        assert err.value.stage == "train"
        assert isinstance(err.value.cause, RuntimeError)
        with open(os.path.join(run.path, "FAILED")) as f:
            assert f.readline().strip() == "stage: train"
        with open(os.path.join(run.path, "stages.jsonl")) as f:
            statuses = [json.loads(line)["status"] for line in f]
        assert statuses == ["ok", "failed"]


def test_scheme_target_drawn_per_seed_when_unset():
    cfg = parse_run_config({**TINY, "scheme": {"tag": "noise"}})
    assert build_scheme(cfg, 4) == build_scheme(cfg, 4)
    assert 0 <= build_scheme(cfg, 4).target_class < 4
    assert build_scheme(parse_run_config({**TINY, "scheme": {"tag": "mislabeled"}}), 0).target_class is None


def test_stage_failure_keeps_partial_run(tmp_path, tiny_cfg, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("no gradient")

    monkeypatch.setattr(pipeline, "embed", broken)
    with pytest.raises(StageError) as err:
        run_pipeline(tiny_cfg, 0, root=str(tmp_path))
    run_dir = err.value.run_dir
    assert err.value.stage == "embed"
    assert os.path.exists(os.path.join(run_dir, "FAILED"))
    assert os.path.exists(os.path.join(run_dir, "watermark.bin"))
    manifest = _read(os.path.join(run_dir, "manifest.json"))
    assert manifest["status"] == "failed"
    assert [s["stage"] for s in manifest["stages"]] == ["data", "embed"]

    results = run_many(tiny_cfg, root=str(tmp_path), workers=1)
    assert [r["ok"] for r in results] == [False, False]


@pytest.mark.slow
def test_end_to_end_run(tmp_path, tiny_cfg):
    run_dir, reports = run_pipeline(tiny_cfg, 0, root=str(tmp_path))
    for name in ("watermark.bin", "watermarked.ckpt", "threshold.json", "recovered.bin", "verdict.json",
                 "split.json", "report.json", "report.csv", "report.md", "recovered/class_0.png"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    assert not os.path.exists(os.path.join(run_dir, "FAILED"))

    manifest = _read(os.path.join(run_dir, "manifest.json"))
    assert manifest["status"] == "ok"
    assert manifest["config_hash"] == tiny_cfg.hash()
    assert "report.json" in manifest["artifacts"]
    assert manifest["versions"]["wmunlearn"]

    verdict = _read(os.path.join(run_dir, "verdict.json"))
    assert verdict["true_target"] == 1 and len(verdict["values"]) == 4

    attacks = {(r.attack, r.setting) for r in reports}
    assert ("prune", "data-free") in attacks
    assert {("finetune", "in-distribution"), ("finetune", "transfer")} <= attacks
    assert ("improved", "in-distribution") in attacks
    for r in reports:
        assert 0.0 <= r.rescaled_after <= 1.0
        assert r.success == (r.rescaled_after < 0.5 and r.clean_after >= 0.9 * r.clean_before)
        assert os.path.exists(os.path.join(run_dir, f"trajectory_{r.attack}-{r.setting}.csv"))

    combined = aggregate_reports([run_dir], out_dir=str(tmp_path / "combined"))
    assert [(r.attack, r.setting, r.success) for r in combined] == [(r.attack, r.setting, r.success) for r in reports]
    assert os.path.exists(tmp_path / "combined" / "report.md")
    assert sorted(manifest["timings"]) == sorted(f"{r.attack}-{r.setting}" for r in reports)

    again, _ = run_pipeline(tiny_cfg, 0, root=str(tmp_path / "again"))
    with open(os.path.join(run_dir, "report.json"), "rb") as a, open(os.path.join(again, "report.json"), "rb") as b:
        assert a.read() == b.read()


@pytest.mark.slow
def test_attacks_and_baselines_share_auxiliary_data(tmp_path, tiny_cfg, monkeypatch):
    seen = {"attack": [], "baseline": []}

    def spy(fn, key, position):
        def wrapped(*args, **kwargs):
            seen[key].append(args[position])
            return fn(*args, **kwargs)

        return wrapped

    monkeypatch.setattr(pipeline, "unlearn_fixed", spy(pipeline.unlearn_fixed, "attack", 4))
    monkeypatch.setattr(pipeline, "unlearn_nonfixed", spy(pipeline.unlearn_nonfixed, "attack", 4))
    monkeypatch.setattr(pipeline, "run_baseline", spy(pipeline.run_baseline, "baseline", 1))
    run_pipeline(tiny_cfg, 0, root=str(tmp_path))

    attack = [a for a in seen["attack"] if a is not None and not a.is_data_free]
    baseline = [a for a in seen["baseline"] if not a.is_data_free]
    assert len(attack) == 2 and len(baseline) == 2
    assert all(any(b is a for a in attack) for b in baseline)
