import gzip
import os
import struct

import httpx
import numpy as np
import pytest

from wmunlearn.data import (
    MNIST_FILES,
    Dataset,
    SynthSpec,
    fetch_mnist,
    load_idx,
    load_mnist,
    ood_images,
    save_idx,
    shifted_copy,
    split_indices,
    synth_dataset,
)
from wmunlearn.errors import DatasetError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError


def _idx_bytes(magic: int, array: np.ndarray) -> bytes:
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.astype(np.uint8).tobytes()


def _write(path, payload: bytes):
    with open(path, "wb") as f:
        f.write(payload)
    return str(path)


class TestDataset:
    def test_rejects_out_of_range_labels(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 1, 2, 2)), [0, 3], 3)

    def test_rejects_pixels_outside_unit_interval(self):
        with pytest.raises(DatasetError):
            Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)

    def test_arrays_are_read_only(self, tiny_data):
        with pytest.raises(ValueError):
            tiny_data.images[0, 0, 0, 0] = 0.5

    def test_subset_and_of_class(self, tiny_data):
        idx = tiny_data.of_class(2)
        sub = tiny_data.subset(idx)
        assert set(sub.labels.tolist()) == {2}
        assert len(sub) == len(idx)


class TestIdx:
    def test_save_then_load_preserves_quantized_pixels(self, tmp_path, tiny_data):
        images, labels = str(tmp_path / "img.idx"), str(tmp_path / "lbl.idx")
        save_idx(tiny_data, images, labels)
        loaded = load_idx(images, labels, num_classes=tiny_data.num_classes)
        np.testing.assert_allclose(loaded.images, tiny_data.images, atol=1e-12)
        assert loaded.labels.tolist() == tiny_data.labels.tolist()

    def test_gzip_files(self, tmp_path):
        pixels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        img = tmp_path / "a.gz"
        with gzip.open(img, "wb") as f:
            f.write(_idx_bytes(0x803, pixels))
        lbl = _write(tmp_path / "b", _idx_bytes(0x801, np.array([0, 1])))
        ds = load_idx(str(img), lbl)
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.images[1, 0, 1, 1] == pytest.approx(7 / 255)

    def test_bad_magic(self, tmp_path):
        img = _write(tmp_path / "a", _idx_bytes(0x801, np.zeros((2, 2, 2))))
        lbl = _write(tmp_path / "b", _idx_bytes(0x801, np.zeros(2)))
        with pytest.raises(IdxMagicError):
            load_idx(img, lbl)

    def test_truncated_payload(self, tmp_path):
        img = _write(tmp_path / "a", _idx_bytes(0x803, np.zeros((2, 2, 2)))[:-3])
        lbl = _write(tmp_path / "b", _idx_bytes(0x801, np.zeros(2)))
        with pytest.raises(IdxTruncatedError) as err:
            load_idx(img, lbl)
        assert err.value.expected - err.value.actual == 3

    def test_count_mismatch(self, tmp_path):
        img = _write(tmp_path / "a", _idx_bytes(0x803, np.zeros((3, 2, 2))))
        lbl = _write(tmp_path / "b", _idx_bytes(0x801, np.zeros(2)))
        with pytest.raises(IdxCountMismatchError):
            load_idx(img, lbl)


class TestMnistDownload:
    def _transport(self, calls):
        payloads = {
            MNIST_FILES["train"][0]: _idx_bytes(0x803, np.full((3, 28, 28), 255)),
            MNIST_FILES["train"][1]: _idx_bytes(0x801, np.array([1, 2, 3])),
            MNIST_FILES["test"][0]: _idx_bytes(0x803, np.zeros((1, 28, 28))),
            MNIST_FILES["test"][1]: _idx_bytes(0x801, np.array([9])),
        }

        def handler(request: httpx.Request) -> httpx.Response:
            name = request.url.path.rsplit("/", 1)[-1]
            calls.append(name)
            if name not in payloads:
                return httpx.Response(404)
            return httpx.Response(200, content=gzip.compress(payloads[name]))

        return httpx.MockTransport(handler)

    def test_downloads_missing_files_once(self, tmp_path):
        calls = []
        client = httpx.Client(transport=self._transport(calls))
        paths = fetch_mnist(str(tmp_path), "https://mirror.test/mnist", client)
        assert sorted(calls) == sorted(n for pair in MNIST_FILES.values() for n in pair)
        assert all(os.path.exists(p) for p in paths.values())
        fetch_mnist(str(tmp_path), "https://mirror.test/mnist", client)
        assert len(calls) == 4

        train = load_mnist("train", dest=str(tmp_path), download=False)
        assert train.shape == (1, 28, 28)
        assert train.labels.tolist() == [1, 2, 3]
        assert train.images.max() == 1.0

    def test_http_error_propagates(self, tmp_path):
        client = httpx.Client(transport=httpx.MockTransport(lambda request: httpx.Response(503)))
        with pytest.raises(httpx.HTTPStatusError):
            fetch_mnist(str(tmp_path), "https://mirror.test/mnist", client)
        assert not any(name.endswith(".gz") for name in os.listdir(tmp_path))

    def test_unknown_split(self, tmp_path):
        with pytest.raises(DatasetError):
            load_mnist("validation", dest=str(tmp_path), download=False)


class TestSynthetic:
    def test_balanced_and_quantized(self, synth_spec):
        ds = synth_dataset(synth_spec, 42, seed=3)
        counts = np.bincount(ds.labels, minlength=synth_spec.num_classes)
        assert counts.max() - counts.min() <= 1
        np.testing.assert_allclose(ds.images * 255, np.rint(ds.images * 255), atol=1e-9)

    def test_deterministic_per_seed(self, synth_spec):
        a = synth_dataset(synth_spec, 20, seed=5)
        b = synth_dataset(synth_spec, 20, seed=5)
        c = synth_dataset(synth_spec, 20, seed=6)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_zero_variance_everywhere_is_degenerate(self):
        with pytest.raises(DatasetError):
            synth_dataset(SynthSpec(num_classes=2, shape=(1, 2, 2), stds=0.0), 10, seed=0)

    def test_fewer_samples_than_classes(self, synth_spec):
        with pytest.raises(DatasetError):
            synth_dataset(synth_spec, 3, seed=0)

    def test_explicit_scalar_centers(self):
        spec = SynthSpec(num_classes=2, shape=(1, 2, 2), stds=(0.0, 0.1), centers=(-1.0, 1.0))
        ds = synth_dataset(spec, 10, seed=0)
        assert np.all(ds.images[ds.labels == 0] == 0.0)

    def test_shifted_copy_stays_in_range(self, tiny_data):
        shifted = shifted_copy(tiny_data.images, seed=0)
        assert shifted.shape == tiny_data.images.shape
        assert shifted.min() >= 0.0 and shifted.max() <= 1.0
        assert not np.array_equal(shifted, tiny_data.images)


class TestOod:
    @pytest.mark.parametrize("kind", ["shapes", "gratings"])
    def test_range_and_determinism(self, kind):
        a = ood_images(kind, 5, (3, 8, 8), seed=1)
        b = ood_images(kind, 5, (3, 8, 8), seed=1)
        assert a.shape == (5, 3, 8, 8)
        assert a.min() >= 0.0 and a.max() <= 1.0
        np.testing.assert_array_equal(a, b)

    def test_unknown_kind(self):
        with pytest.raises(DatasetError):
            ood_images("faces", 1, (1, 4, 4), seed=0)


def test_split_indices_disjoint():
    a, b, c = split_indices(50, [10, 20, 5], seed=0)
    assert len(a) == 10 and len(b) == 20 and len(c) == 5
    assert not (set(a) & set(b)) and not (set(b) & set(c)) and not (set(a) & set(c))


def test_split_indices_oversubscribed():
    with pytest.raises(DatasetError):
        split_indices(10, [6, 6], seed=0)
