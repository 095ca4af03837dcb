import os

import pytest

from wmunlearn.errors import ConfigError
from wmunlearn.runconfig import RunConfig, load_run_config, parse_run_config


def test_empty_mapping_gives_defaults():
    cfg = parse_run_config({})
    assert cfg == RunConfig()
    assert cfg.unlearn.alpha_kl == 15.0
    assert cfg.split.beta == 0.95 and cfg.split.gamma == 0.5
    assert cfg.detection.threshold == 0.4
    assert cfg.seeds == [0]


@pytest.mark.parametrize(
    "data,where",
    [
        ({"colour": 1}, "colour"),
        ({"train": {"epoch": 3}}, "train.epoch"),
        ({"train": {"epochs": "3"}}, "train.epochs"),
        ({"train": {"epochs": True}}, "train.epochs"),
        ({"inversion": {"save_png": 1}}, "inversion.save_png"),
        ({"split": {"beta": 1.0}}, "split.beta"),
        ({"unlearn": {"kl_convention": "sym"}}, "unlearn.kl_convention"),
        ({"attack": {"settings": ["offline"]}}, "attack.settings"),
        ({"baselines": {"kinds": ["distill"]}}, "baselines.kinds"),
        ({"threshold": {"null_models": 1}}, "threshold.null_models"),
        ({"seeds": []}, "seeds"),
        ({"seeds": [-1]}, "seeds"),
        ({"train": [1, 2]}, "train"),
    ],
)
def test_errors_name_the_offending_key(data, where):
    with pytest.raises(ConfigError) as err:
        parse_run_config(data)
    assert str(err.value).startswith(where)


def test_ints_are_accepted_for_floats():
    cfg = parse_run_config({"unlearn": {"lr": 1}})
    assert cfg.unlearn.lr == 1.0 and isinstance(cfg.unlearn.lr, float)


def test_target_class_rules():
    assert parse_run_config({"scheme": {"tag": "noise", "target_class": 3}}).scheme.target_class == 3
    with pytest.raises(ConfigError):
        parse_run_config({"scheme": {"tag": "mislabeled", "target_class": 1}})
    with pytest.raises(ConfigError):
        parse_run_config({"dataset": {"num_classes": 4}, "scheme": {"target_class": 4}})


def test_basic_mode_has_no_data_free_setting():
    with pytest.raises(ConfigError):
        parse_run_config({"attack": {"mode": "basic", "settings": ["transfer", "data-free"]}})
    assert parse_run_config({"attack": {"mode": "basic", "settings": ["transfer"]}}).attack.mode == "basic"


def test_mnist_needs_mnist_shape():
    with pytest.raises(ConfigError):
        parse_run_config({"dataset": {"source": "mnist"}})
    cfg = parse_run_config({"dataset": {"source": "mnist", "shape": [1, 28, 28]}})
    assert cfg.dataset.source == "mnist"


def test_overrides_revalidate():
    cfg = parse_run_config({"scheme": {"tag": "content", "target_class": 2}})
    moved = cfg.with_overrides(scheme="abstract_ood", setting="transfer", seeds=[5, 6])
    assert moved.scheme.tag == "abstract_ood" and moved.scheme.target_class is None
    assert moved.attack.settings == ["transfer"] and moved.seeds == [5, 6]
    assert cfg.scheme.tag == "content"
    with pytest.raises(ConfigError):
        parse_run_config({"attack": {"mode": "basic"}}).with_overrides(setting="data-free")


def test_hash_is_stable_and_sensitive():
    a = parse_run_config({"train": {"epochs": 3}})
    b = parse_run_config({"train": {"epochs": 3}})
    assert a.hash() == b.hash() and len(a.hash()) == 64
    assert a.hash() != parse_run_config({"train": {"epochs": 4}}).hash()


def test_load_names_run_after_file(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text("train:\n  epochs: 2\nseeds: [0, 1]\n")
    cfg = load_run_config(str(path))
    assert cfg.name == "smoke" and cfg.train.epochs == 2 and cfg.seeds == [0, 1]


def test_load_rejects_bad_yaml_and_missing_files(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.yaml"))


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(root)):
        cfg = load_run_config(os.path.join(root, name))
        assert cfg.seeds
