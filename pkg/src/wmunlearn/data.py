"""Datasets: IDX files, MNIST download, synthetic mixtures and out-of-distribution images."""

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import httpx
import numpy as np

from .config import DATA_DIR, MNIST_URL
from .errors import DatasetError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError

logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
IMAGE_MAGICS = (0x00000803, 0x00000804)
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


@dataclass(frozen=True)
class Dataset:
    """Images [N, C, H, W] in [0, 1] with integer labels in 0..C-1."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise DatasetError(f"images must be [N, C, H, W], got shape {images.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in 0..{self.num_classes - 1}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError("image values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)

    def of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def require_nonempty(self, what: str = "dataset") -> None:
        if len(self) == 0:
            raise DatasetError(f"{what} is empty")


# -- IDX -----------------------------------------------------------------------


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path: str, raw: bytes, allowed: Sequence[int]) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(path, 4, len(raw))
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype != IDX_UBYTE or magic not in allowed:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x} not in {[f'0x{m:08x}' for m in allowed]}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(path, header, len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(shape))
    if len(raw) != expected:
        raise IdxTruncatedError(path, expected, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def load_idx(image_path: str, label_path: str, num_classes: Optional[int] = None) -> Dataset:
    """Parse a big-endian IDX image/label pair; pixel bytes are scaled to [0, 1]."""
    images = _parse_idx(image_path, _read_bytes(image_path), IMAGE_MAGICS)
    labels = _parse_idx(label_path, _read_bytes(label_path), (LABEL_MAGIC,))
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{image_path} holds {images.shape[0]} images but {label_path} holds {labels.shape[0]} labels"
        )
    if images.ndim == 3:
        images = images[:, None, :, :]
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


def _write_idx(path: str, magic: int, array: np.ndarray) -> None:
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.astype(np.uint8).tobytes())


def save_idx(dataset: Dataset, image_path: str, label_path: str) -> None:
    """Write a Dataset as an IDX pair; pixels are rounded to the nearest k/255."""
    images = np.rint(dataset.images * 255.0)
    if dataset.shape[0] == 1:
        _write_idx(image_path, 0x00000803, images[:, 0])
    else:
        _write_idx(image_path, 0x00000804, images)
    _write_idx(label_path, LABEL_MAGIC, dataset.labels)


def fetch_mnist(dest: str = DATA_DIR, base_url: str = MNIST_URL, client: Optional[httpx.Client] = None) -> dict:
    """Download the four gzip IDX files into ``dest`` unless already present."""
    os.makedirs(dest, exist_ok=True)
    paths = {}
    owned = client is None
    client = client or httpx.Client(timeout=60.0, follow_redirects=True)
    try:
        for split, names in MNIST_FILES.items():
            for name in names:
                path = os.path.join(dest, name)
                paths[name] = path
                if os.path.exists(path):
                    continue
                url = base_url.rstrip("/") + "/" + name
                logger.info("downloading %s", url)
                response = client.get(url)
                response.raise_for_status()
                tmp = path + ".part"
                with open(tmp, "wb") as f:
                    f.write(response.content)
                os.replace(tmp, path)
    finally:
        if owned:
            client.close()
    return paths


def load_mnist(split: str = "train", dest: str = DATA_DIR, download: bool = True) -> Dataset:
    if split not in MNIST_FILES:
        raise DatasetError(f"unknown MNIST split '{split}'")
    image_name, label_name = MNIST_FILES[split]
    if download:
        fetch_mnist(dest)
    return load_idx(os.path.join(dest, image_name), os.path.join(dest, label_name), num_classes=10)


# -- synthetic data ------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Per-class Gaussian image mixtures.

    Class c is drawn as ``0.5 + 0.5 * (center_c + std_c * noise)``, clipped to
    [0, 1] and quantized to k/255. Centers are given in [-1, 1] units; when
    omitted they are smooth random +/-``separation`` templates drawn from
    ``template_seed`` at ``template_resolution`` and upsampled.
    """

    num_classes: int = 10
    shape: tuple = (1, 12, 12)
    stds: Union[float, tuple] = 0.35
    separation: float = 0.6
    template_resolution: int = 4
    template_seed: int = 0
    centers: Optional[tuple] = None

    def class_stds(self) -> np.ndarray:
        stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), (self.num_classes,)).copy()
        if np.any(stds < 0):
            raise DatasetError("class stds must be nonnegative")
        if np.all(stds == 0):
            raise DatasetError("degenerate spec: zero variance across all classes")
        return stds

    def class_centers(self) -> np.ndarray:
        dim = int(np.prod(self.shape))
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=np.float64)
            if centers.ndim == 1:
                centers = centers[:, None] * np.ones((1, dim))
            if centers.shape != (self.num_classes, dim):
                raise DatasetError(f"centers must have shape {(self.num_classes, dim)}, got {centers.shape}")
            return centers
        rng = np.random.default_rng(self.template_seed)
        c, h, w = self.shape
        r = max(1, min(self.template_resolution, h, w))
        coarse = rng.choice([-1.0, 1.0], size=(self.num_classes, c, r, r)) * self.separation
        reps_h, reps_w = -(-h // r), -(-w // r)
        fine = np.kron(coarse, np.ones((1, 1, reps_h, reps_w)))[:, :, :h, :w]
        return fine.reshape(self.num_classes, dim)


def synth_dataset(spec: SynthSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` samples with labels ``arange(n) % C`` in shuffled order (balanced to within one)."""
    if spec.num_classes < 1:
        raise DatasetError("num_classes must be >= 1")
    if n < spec.num_classes:
        raise DatasetError(f"N={n} is smaller than the class count {spec.num_classes}")
    stds = spec.class_stds()
    centers = spec.class_centers()
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    noise = rng.standard_normal((n, centers.shape[1]))
    raw = 0.5 + 0.5 * (centers[labels] + stds[labels, None] * noise)
    images = np.rint(np.clip(raw, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images.reshape((n,) + tuple(spec.shape)), labels, spec.num_classes)


def shifted_copy(images: np.ndarray, seed: int, contrast: float = 0.7, noise: float = 0.08) -> np.ndarray:
    """A distribution-shifted version of ``images`` (reduced contrast plus pixel noise)."""
    rng = np.random.default_rng(seed)
    out = 0.5 + contrast * (images - 0.5) + noise * rng.standard_normal(images.shape)
    return np.rint(np.clip(out, 0.0, 1.0) * 255.0) / 255.0


# -- out-of-distribution images ---------------------------------------------------------


def _shapes(rng: np.random.Generator, n: int, shape: tuple) -> np.ndarray:
    c, h, w = shape
    out = np.empty((n, c, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for i in range(n):
        img = rng.uniform(0.0, 0.35, size=(c, 1, 1)) + 0.25 * rng.standard_normal((c, h, w))
        for _ in range(rng.integers(1, 4)):
            color = rng.uniform(0.3, 1.0, size=(c, 1))
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            size = rng.uniform(0.15, 0.45) * min(h, w)
            if rng.random() < 0.5:
                mask = (np.abs(yy - cy) <= size / 2) & (np.abs(xx - cx) <= size / 2)
            else:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
            img[:, mask] = color
        out[i] = img
    return out


def _gratings(rng: np.random.Generator, n: int, shape: tuple) -> np.ndarray:
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.empty((n, c, h, w))
    for i in range(n):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / 4 + phase)
        out[i] = 0.5 + 0.45 * wave[None] * rng.uniform(0.5, 1.0, size=(c, 1, 1))
    return out


OOD_KINDS = {"shapes": _shapes, "gratings": _gratings}


def ood_images(kind: str, n: int, shape: tuple, seed: int) -> np.ndarray:
    """Seeded out-of-distribution images in [0, 1] quantized to k/255.

    ``shapes`` draws colored noise with random rectangles and discs; ``gratings``
    draws oriented sinusoidal stripes.
    """
    if kind not in OOD_KINDS:
        raise DatasetError(f"unknown OOD kind '{kind}', choose from {sorted(OOD_KINDS)}")
    rng = np.random.default_rng(seed)
    images = OOD_KINDS[kind](rng, n, tuple(shape))
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def split_indices(n: int, sizes: Sequence[int], seed: int) -> list[np.ndarray]:
    """Disjoint random index blocks of the requested sizes."""
    if sum(sizes) > n:
        raise DatasetError(f"requested {sum(sizes)} samples from a pool of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    out, start = [], 0
    for size in sizes:
        out.append(np.sort(perm[start:start + size]))
        start += size
    return out
