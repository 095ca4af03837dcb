import numpy as np
import pytest

from wmunlearn.errors import DatasetError
from wmunlearn.inversion import RecoveredBatch
from wmunlearn.splitting import (
    SplitConfig,
    contributions,
    importance_scores,
    salient_count,
    salient_overlap,
    select_salient,
    split_all,
    split_batch,
    tap_activations,
)


def _batch(cls, samples):
    return RecoveredBatch(cls, samples, np.zeros_like(samples))


def test_importance_of_constant_neuron_is_huge():
    act = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])
    scores = importance_scores(act)
    assert scores[0] == pytest.approx(2.0 / np.sqrt(2.0 / 3.0))
    assert scores[1] == pytest.approx(2e8)


def test_importance_needs_two_rows():
    with pytest.raises(DatasetError):
        importance_scores(np.ones((1, 3)))


@pytest.mark.parametrize("dim,beta,expected", [(100, 0.95, 5), (84, 0.95, 5), (10, 0.95, 1), (3, 0.5, 2), (4, 0.01, 4)])
def test_salient_count(dim, beta, expected):
    assert salient_count(dim, beta) == expected


def test_select_salient_stable_ties():
    scores = np.array([1.0, 3.0, 3.0, 2.0, 0.0])
    assert select_salient(scores, 0.5).tolist() == [1, 2, 3]


def test_contributions_sum_salient_columns():
    act = np.arange(12.0).reshape(3, 4)
    assert contributions(act, [0, 3]).tolist() == [3.0, 11.0, 19.0]
    with pytest.raises(DatasetError):
        contributions(act, [])


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitConfig(beta=1.0)
    with pytest.raises(ValueError):
        SplitConfig(gamma=0.0)


def test_split_partitions_by_contribution(conv_model, tiny_data):
    batch = _batch(0, tiny_data.images[:9])
    result = split_batch(conv_model, batch, SplitConfig(beta=0.9, gamma=0.5))
    assert len(result.proxy_nor) == 5 and len(result.proxy_wmk) == 4
    assert sorted(np.concatenate([result.proxy_nor, result.proxy_wmk]).tolist()) == list(range(9))
    assert result.contributions[result.proxy_nor].min() >= result.contributions[result.proxy_wmk].max()
    act = tap_activations(conv_model, batch.samples)
    assert act.shape == (9, conv_model.layers[conv_model.tap_index()].out_shape[0])
    np.testing.assert_allclose(result.contributions, contributions(act, result.salient))


@pytest.mark.parametrize("m,gamma,n_nor", [(9, 0.5, 5), (10, 0.95, 10), (2, 0.9, 2), (4, 0.25, 1)])
def test_split_sizes_up_to_an_empty_watermark_side(conv_model, tiny_data, m, gamma, n_nor):
    result = split_batch(conv_model, _batch(0, tiny_data.images[:m]), SplitConfig(beta=0.5, gamma=gamma))
    assert len(result.proxy_nor) == n_nor and len(result.proxy_wmk) == m - n_nor
    assert sorted(np.concatenate([result.proxy_nor, result.proxy_wmk]).tolist()) == list(range(m))


def test_split_needs_one_proxy_normal_sample(conv_model, tiny_data):
    with pytest.raises(DatasetError):
        split_batch(conv_model, _batch(0, tiny_data.images[:1]), SplitConfig(gamma=0.5))
    with pytest.raises(DatasetError):
        split_batch(conv_model, _batch(0, tiny_data.images[:3]), SplitConfig(gamma=0.3))


def test_split_at_explicit_layer(conv_model, tiny_data):
    layer = conv_model.last_conv_activation()
    result = split_batch(conv_model, _batch(1, tiny_data.images[:6]), SplitConfig(layer=layer))
    assert result.salient.max() < int(np.prod(conv_model.layers[layer].out_shape))


def test_split_all_and_serialization(conv_model, tiny_data):
    batches = [_batch(c, tiny_data.images[tiny_data.of_class(c)[:4]]) for c in range(conv_model.num_classes)]
    splits = split_all(conv_model, batches)
    assert sorted(splits) == list(range(conv_model.num_classes))
    payload = splits[2].to_dict()
    assert payload["cls"] == 2 and len(payload["proxy_nor"]) == 2


def test_salient_overlap_is_symmetric_with_unit_diagonal(conv_model, tiny_data):
    overlap = salient_overlap(
        conv_model, {"a": tiny_data.images[:8], "b": tiny_data.images[8:16]}, SplitConfig(beta=0.5)
    )
    assert overlap["a"]["a"] == 1.0 and overlap["b"]["b"] == 1.0
    assert overlap["a"]["b"] == overlap["b"]["a"]
