import numpy as np
import pytest

from wmunlearn.data import SynthSpec, synth_dataset
from wmunlearn.errors import DatasetError, LabelError, UnsupportedSettingError
from wmunlearn.inversion import RecoveredBatch
from wmunlearn.models import mlp
from wmunlearn.training import accuracy
from wmunlearn.unlearning import (
    AuxiliaryData,
    AuxMode,
    UnlearnConfig,
    nonfixed_targets,
    plain_finetune,
    pseudo_label,
    random_wrong_labels,
    skip_split,
    unlearn_basic,
    unlearn_fixed,
    unlearn_nonfixed,
)
from wmunlearn.watermark import EmbedConfig, WatermarkScheme, embed, make_watermark_set, watermark_accuracy

from conftest import NUM_CLASSES, SHAPE

QUICK = UnlearnConfig(epochs=2, batch_size=32, lr=0.05)


@pytest.fixture(scope="module")
def embedded():
    spec = SynthSpec(num_classes=NUM_CLASSES, shape=SHAPE, stds=0.2, separation=0.8, template_resolution=3)
    data = synth_dataset(spec, 160, seed=0)
    wm = make_watermark_set(WatermarkScheme("content", 0), data, 16, seed=0)
    result = embed(mlp(SHAPE, NUM_CLASSES, hidden=(24,)), data, wm, EmbedConfig(epochs=20, batch_size=32, lr=0.1, seed=0))
    return data, wm, result.model


class TestAuxiliaryData:
    def test_data_free_carries_nothing(self, tiny_data):
        aux = AuxiliaryData.data_free()
        assert aux.is_data_free and len(aux) == 0 and aux.terms() == []
        with pytest.raises(DatasetError):
            AuxiliaryData(AuxMode.DATA_FREE, tiny_data.images, tiny_data.labels)

    def test_labeled_modes_need_matching_samples(self, tiny_data):
        with pytest.raises(DatasetError):
            AuxiliaryData("transfer")
        with pytest.raises(DatasetError):
            AuxiliaryData("in-distribution", tiny_data.images, tiny_data.labels[:3])
        aux = AuxiliaryData.in_distribution(tiny_data)
        assert aux.mode is AuxMode.IN_DISTRIBUTION
        assert len(aux) == len(tiny_data)
        assert [t.name for t in aux.terms()] == ["aux"]

    def test_pseudo_label_uses_model_predictions(self, mlp_model, tiny_data):
        aux = pseudo_label(mlp_model, tiny_data.images[:10])
        assert aux.mode is AuxMode.TRANSFER
        np.testing.assert_array_equal(aux.labels, mlp_model.predict(tiny_data.images[:10]))
        with pytest.raises(DatasetError):
            pseudo_label(mlp_model, tiny_data.images[:0])


def test_config_validation_and_default_lr():
    with pytest.raises(ValueError):
        UnlearnConfig(lr=0.0)
    with pytest.raises(ValueError):
        UnlearnConfig(alpha_kl=-1.0)
    assert UnlearnConfig().resolved_lr(data_free=True) == 0.003
    assert UnlearnConfig().resolved_lr(data_free=False) == 0.01
    assert UnlearnConfig(lr=0.2).resolved_lr(data_free=True) == 0.2


def test_random_wrong_labels_skip_the_excluded_class(rng):
    labels = random_wrong_labels(500, 5, 2, rng)
    assert labels.min() >= 0 and labels.max() < 5
    assert 2 not in set(labels.tolist())
    assert set(labels.tolist()) == {0, 1, 3, 4}
    with pytest.raises(LabelError):
        random_wrong_labels(3, 1, 0, rng)


def test_nonfixed_targets():
    targets = nonfixed_targets(10, least=3, second=7)
    assert targets[3] == 7
    assert all(targets[c] == 3 for c in range(10) if c != 3)


class TestObjectives:
    def test_basic_rejects_data_free(self, mlp_model, tiny_data):
        batch = RecoveredBatch(0, tiny_data.images[:4], np.zeros_like(tiny_data.images[:4]))
        with pytest.raises(UnsupportedSettingError):
            unlearn_basic(mlp_model, [batch], AuxiliaryData.data_free(), QUICK)

    def test_basic_flattens_recovered_predictions(self, embedded):
        data, wm, model = embedded
        batches = [RecoveredBatch(c, wm.samples, np.zeros_like(wm.samples)) for c in range(NUM_CLASSES)]
        out = unlearn_basic(model, batches, AuxiliaryData.in_distribution(data), UnlearnConfig(epochs=5, batch_size=32, lr=0.05))
        assert out is not model
        assert watermark_accuracy(out, wm) <= watermark_accuracy(model, wm)

    def test_fixed_rejects_unknown_target(self, mlp_model, tiny_data):
        with pytest.raises(LabelError):
            unlearn_fixed(mlp_model, tiny_data.images[:4], tiny_data.images[4:8], NUM_CLASSES, None, QUICK)

    def test_fixed_needs_proxy_watermark_samples(self, mlp_model, tiny_data):
        with pytest.raises(DatasetError):
            unlearn_fixed(mlp_model, tiny_data.images[:0], tiny_data.images[:8], 0, None, QUICK)

    def test_fixed_unlearning_removes_the_watermark(self, embedded):
        data, wm, model = embedded
        fingerprint = model.fingerprint()
        normal = data.images[data.of_class(0)[:16]]
        aux = AuxiliaryData.in_distribution(data)
        out = unlearn_fixed(model, wm.samples, normal, 0, aux, UnlearnConfig(epochs=10, batch_size=32, lr=0.05))
        assert model.fingerprint() == fingerprint
        assert watermark_accuracy(out, wm) < 0.5
        assert accuracy(out, data) >= 0.8

    def test_data_free_fixed_run_is_deterministic(self, embedded):
        data, wm, model = embedded
        normal = data.images[data.of_class(0)[:8]]
        cfg = UnlearnConfig(epochs=2, batch_size=16, seed=4)
        a = unlearn_fixed(model, wm.samples, normal, 0, None, cfg)
        b = unlearn_fixed(model, wm.samples, normal, 0, AuxiliaryData.data_free(), cfg)
        assert a.fingerprint() == b.fingerprint()

    def test_skip_split_uses_whole_batch(self, embedded):
        data, wm, model = embedded
        batch = RecoveredBatch(0, wm.samples, np.zeros_like(wm.samples))
        cfg = UnlearnConfig(epochs=2, batch_size=16, seed=1)
        via_skip = skip_split(model, batch, None, cfg)
        direct = unlearn_fixed(model, wm.samples, wm.samples[:0], 0, None, cfg)
        assert via_skip.fingerprint() == direct.fingerprint()

    def test_nonfixed_validation(self, mlp_model, tiny_data):
        proxies = {0: tiny_data.images[:4]}
        with pytest.raises(UnsupportedSettingError):
            unlearn_nonfixed(mlp_model, proxies, 0, 1, AuxiliaryData.data_free(), QUICK)
        aux = AuxiliaryData.in_distribution(tiny_data)
        with pytest.raises(LabelError):
            unlearn_nonfixed(mlp_model, proxies, 2, 2, aux, QUICK)
        with pytest.raises(LabelError):
            unlearn_nonfixed(mlp_model, proxies, 0, NUM_CLASSES, aux, QUICK)

    def test_nonfixed_runs_with_monitor(self, mlp_model, tiny_data):
        seen = []

        def monitor(epoch, model):
            seen.append(epoch)
            return {}

        proxies = {c: tiny_data.images[tiny_data.of_class(c)[:3]] for c in range(NUM_CLASSES)}
        out = unlearn_nonfixed(mlp_model, proxies, 1, 2, AuxiliaryData.in_distribution(tiny_data), QUICK, monitor)
        assert seen == [0, 1]
        assert out.num_classes == NUM_CLASSES

    def test_plain_finetune(self, mlp_model, tiny_data):
        with pytest.raises(UnsupportedSettingError):
            plain_finetune(mlp_model, AuxiliaryData.data_free(), QUICK)
        out = plain_finetune(mlp_model, AuxiliaryData.in_distribution(tiny_data), QUICK)
        assert out.fingerprint() != mlp_model.fingerprint()

    @pytest.mark.parametrize("with_batches", [False, True])
    def test_basic_without_kl_is_plain_finetuning(self, mlp_model, tiny_data, with_batches):
        aux = AuxiliaryData.in_distribution(tiny_data)
        cfg = UnlearnConfig(epochs=2, batch_size=32, lr=0.05, alpha_kl=0.0, seed=3)
        batches = [RecoveredBatch(0, tiny_data.images[:6], np.zeros_like(tiny_data.images[:6]))] if with_batches else []
        basic = unlearn_basic(mlp_model, batches, aux, cfg)
        plain = plain_finetune(mlp_model, aux, cfg)
        assert basic.fingerprint() == plain.fingerprint()
