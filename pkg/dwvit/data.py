"""
Datasets, normalization, augmentation and batching.

Images are held as one ``uint8`` array of shape ``[N, 3, H, W]`` and only
turned into floats in ``[0, 1]`` when a batch or sample is taken.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union, overload

import numpy as np
from more_itertools import chunked

from dwvit.config import DatasetSpec
from dwvit.errors import ConfigurationError, ContractError, FormatError
from dwvit.tensor import Tensor, make_rng

logger = logging.getLogger(__name__)

CIFAR10_RECORD = 3073
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR10_SUBDIR = "cifar-10-batches-bin"

PATTERN_SIZE = 4
CROP_PADDING = 4

# child streams of a seed
LAYOUT_STREAM = 7
SYNTHETIC_STREAM = 11
AUGMENT_STREAM = 13

Normalization = Tuple[Tuple[float, ...], Tuple[float, ...]]
T = TypeVar("T")


@dataclass(frozen=True)
class Sample:
    image: Tensor  # [3, H, W] in [0, 1]
    label: int


class ImageDataset(Sequence[Sample]):
    def __init__(self, pixels: np.ndarray, labels: np.ndarray, num_classes: int):
        if pixels.dtype != np.uint8 or pixels.ndim != 4:
            raise ContractError(f"pixels must be uint8 [N, C, H, W], got {pixels.dtype} {pixels.shape}")
        if len(pixels) != len(labels):
            raise ContractError(f"{len(pixels)} images but {len(labels)} labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError(f"labels must lie in [0, {num_classes})")
        self.pixels = pixels
        self.labels = labels
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.labels)

    @overload
    def __getitem__(self, index: int) -> Sample: ...

    @overload
    def __getitem__(self, index: slice) -> "ImageDataset": ...

    def __getitem__(self, index: Union[int, slice]):
        if isinstance(index, slice):
            return ImageDataset(self.pixels[index], self.labels[index], self.num_classes)
        image = self.pixels[index].astype(np.float32) / np.float32(255)
        return Sample(Tensor(image), int(self.labels[index]))

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Float32 images in ``[0, 1]``; ``indices`` selects a subset in order."""
        pixels = self.pixels if indices is None else self.pixels[np.asarray(indices)]
        return pixels.astype(np.float32) / np.float32(255)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def subset(self, size: Optional[int]) -> "ImageDataset":
        if size is None:
            return self
        if size > len(self):
            raise ConfigurationError(f"subset_size {size} exceeds the {len(self)} available samples")
        return self[:size]


def _cifar10_dir(root: Optional[Path]) -> Path:
    if root is None:
        raise ConfigurationError("cifar10_binary needs data.root or --data")
    root = Path(root).expanduser()
    if (root / CIFAR10_SUBDIR).is_dir():
        return root / CIFAR10_SUBDIR
    return root


def read_cifar10_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """One binary batch file: records of a label byte and 3072 channel-major pixels."""
    if not path.exists():
        raise ConfigurationError(f"CIFAR-10 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR10_RECORD:
        raise FormatError(
            f"{path}: length {raw.size} is not a multiple of the {CIFAR10_RECORD}-byte record"
        )
    records = raw.reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR10_CLASSES)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}, expected 0-9")
    pixels = np.ascontiguousarray(records[:, 1:]).reshape(-1, *CIFAR10_SHAPE)
    return pixels, labels


def load_cifar10(spec: DatasetSpec) -> ImageDataset:
    directory = _cifar10_dir(spec.root)
    parts = [read_cifar10_file(directory / name) for name in CIFAR10_FILES[spec.split]]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    logger.info(f"loaded {len(labels)} CIFAR-10 {spec.split} samples from {directory}")
    dataset = ImageDataset(pixels, labels, CIFAR10_CLASSES)
    size = spec.subset_size if spec.split == "train" else spec.val_subset_size
    return dataset.subset(size)


@lru_cache(maxsize=16)
def synthetic_layout(
    num_classes: int, image_size: int, pattern_seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-class ``PATTERN_SIZE`` square patterns of 0/255 pixels and distinct
    pattern-aligned ``(row, col)`` locations.
    """
    cells = image_size // PATTERN_SIZE
    if num_classes > cells * cells:
        raise ConfigurationError(
            f"{num_classes} classes do not fit {cells * cells} pattern cells of a {image_size}px image"
        )
    rng = make_rng(pattern_seed, LAYOUT_STREAM)
    cell_ids = rng.choice(cells * cells, size=num_classes, replace=False)
    locations = np.stack([cell_ids // cells, cell_ids % cells], axis=1) * PATTERN_SIZE

    shape = (3, PATTERN_SIZE, PATTERN_SIZE)
    patterns: List[np.ndarray] = []
    seen = set()
    while len(patterns) < num_classes:
        pattern = rng.integers(0, 2, size=shape, dtype=np.uint8) * np.uint8(255)
        key = pattern.tobytes()
        if key not in seen:
            seen.add(key)
            patterns.append(pattern)
    return np.stack(patterns), locations


def synthetic_dataset(
    n: int,
    num_classes: int,
    seed: int,
    image_size: int = 32,
    pattern_seed: int = 0,
    stream: int = 0,
) -> ImageDataset:
    """
    Noise images in ``[64, 192)`` with the pattern of their class stamped at the
    class location. Noise never reaches 0 or 255, so the stamp is decidable.
    Labels cycle through the classes before shuffling, so every class gets
    ``n // num_classes`` samples when ``n`` divides evenly.
    """
    patterns, locations = synthetic_layout(num_classes, image_size, pattern_seed)
    rng = make_rng(seed, SYNTHETIC_STREAM, stream)
    pixels = rng.integers(64, 192, size=(n, 3, image_size, image_size), dtype=np.uint8)
    labels = rng.permutation(np.arange(n) % num_classes)
    for i, label in enumerate(labels):
        row, col = locations[label]
        pixels[i, :, row : row + PATTERN_SIZE, col : col + PATTERN_SIZE] = patterns[label]
    return ImageDataset(pixels, labels, num_classes)


def load_split(spec: DatasetSpec) -> ImageDataset:
    if spec.kind == "cifar10_binary":
        return load_cifar10(spec)
    if spec.split == "train":
        return synthetic_dataset(
            spec.synthetic_train_size, spec.num_classes, spec.seed, spec.image_size, spec.seed, 0
        ).subset(spec.subset_size)
    return synthetic_dataset(
        spec.synthetic_test_size, spec.num_classes, spec.seed, spec.image_size, spec.seed, 1
    ).subset(spec.val_subset_size)


def load_dataset(spec: DatasetSpec) -> Tuple[ImageDataset, ImageDataset]:
    """Train and validation splits for ``spec``."""
    train = load_split(spec.model_copy(update={"split": "train"}))
    test = load_split(spec.model_copy(update={"split": "test"}))
    return train, test


def channel_stats(dataset: ImageDataset) -> Normalization:
    """Per-channel mean and standard deviation of the ``[0, 1]`` pixels."""
    values = np.arange(256, dtype=np.float64) / 255.0
    means, stds = [], []
    for channel in range(dataset.pixels.shape[1]):
        counts = np.bincount(dataset.pixels[:, channel].ravel(), minlength=256)
        weights = counts / counts.sum()
        mean = float(weights @ values)
        means.append(mean)
        stds.append(float(np.sqrt(weights @ (values - mean) ** 2)))
    return tuple(means), tuple(stds)


@lru_cache(maxsize=8)
def _train_split_stats(spec_json: str) -> Normalization:
    spec = DatasetSpec.model_validate_json(spec_json)
    stats = channel_stats(load_split(spec))
    logger.debug(f"normalization for {spec.kind}: mean={stats[0]} std={stats[1]}")
    return stats


def normalization_for(spec: DatasetSpec) -> Normalization:
    """
    Configured mean and std, or the statistics of the full training split,
    computed once per dataset and cached.
    """
    if spec.mean is not None:
        return tuple(spec.mean), tuple(spec.std)
    train_spec = spec.model_copy(
        update={"split": "train", "subset_size": None, "val_subset_size": None}
    )
    return _train_split_stats(train_spec.model_dump_json())


def _channels(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).reshape(-1, 1, 1)


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return ((images - _channels(mean)) / _channels(std)).astype(np.float32)


def denormalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (images * _channels(std) + _channels(mean)).astype(np.float32)


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def flip_crop(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip with probability 0.5, then a random crop of the zero-padded image."""
    batch, _, height, width = images.shape
    flips = rng.random(batch) < 0.5
    offsets = rng.integers(0, 2 * CROP_PADDING + 1, size=(batch, 2))
    pad = CROP_PADDING
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(batch):
        top, left = offsets[i]
        crop = padded[i, :, top : top + height, left : left + width]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out


def batches(
    data: ImageDataset,
    batch_size: int,
    shuffle_seed: int,
    augmentation: str = "none",
    epoch: int = 0,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """
    ``(images [B, 3, H, W], labels [B])`` batches for one epoch.

    The order is a seeded permutation per ``(shuffle_seed, epoch)``; the last
    batch may be short. Augmentation runs on ``[0, 1]`` pixels and
    normalization is applied last.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    if augmentation not in ("none", "flip_crop"):
        raise ConfigurationError(f"Unknown augmentation: {augmentation}")
    order = make_rng(shuffle_seed, epoch).permutation(len(data)) if shuffle else np.arange(len(data))
    augment_rng = make_rng(shuffle_seed, epoch, AUGMENT_STREAM)
    for indices in chunked(order, batch_size):
        images = data.images(indices)
        if augmentation == "flip_crop":
            images = flip_crop(images, augment_rng)
        if mean is not None:
            images = normalize(images, mean, std)
        yield Tensor(images), data.labels[np.asarray(indices)]


def prefetch(iterable: Iterable[T]) -> Iterator[T]:
    """Produce the next item on one background worker while the current one is consumed."""
    iterator = iter(iterable)
    done = object()
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="dwvit-prefetch") as pool:
        future = pool.submit(next, iterator, done)
        while True:
            item = future.result()
            if item is done:
                return
            future = pool.submit(next, iterator, done)
            yield item
