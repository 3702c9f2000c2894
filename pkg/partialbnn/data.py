"""FER2013 ingestion, the synthetic expression dataset and minibatching."""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import TextIO, cast

import numpy as np

from .const import IMAGE_PIXELS, IMAGE_SIZE, MAX_PIXEL_VALUE, NUM_CLASSES
from .exceptions import (
    DataRowInvalid,
    EmptySplit,
    InvalidConfig,
    LabelOutOfRange,
    ShapeMismatch,
)
from .nn_ops import MIN_BN_BATCH, Tensor

_LOGGER = logging.getLogger(__name__)

FER2013_HEADER = ("emotion", "pixels", "Usage")
PREFETCH_DEPTH = 2
QUEUE_POLL = 0.1
FLIP_PROBABILITY = 0.5
FROM_IMAGES_CHUNK = 1024

Batch = tuple[Tensor, Tensor]


class Emotion(IntEnum):
    """FER2013 label index."""

    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    SAD = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def label(self) -> str:
        """Display name."""
        return self.name.capitalize()


CLASS_NAMES = tuple(e.label for e in Emotion)


class Split(StrEnum):
    """FER2013 Usage column."""

    TRAINING = "Training"
    PUBLIC_TEST = "PublicTest"
    PRIVATE_TEST = "PrivateTest"


SPLIT_ORDER = (Split.TRAINING, Split.PUBLIC_TEST, Split.PRIVATE_TEST)


class NormalizationMode(StrEnum):
    """Pixel normalization applied at batching time."""

    UNIT_RANGE = "unit-range"
    STANDARDIZED = "standardized"


@dataclass(frozen=True)
class Normalization:
    """Normalization mode and, when standardized, the training statistics."""

    mode: NormalizationMode = NormalizationMode.UNIT_RANGE
    mean: float = 0.0
    std: float = 1.0

    def apply(self, pixels: Tensor) -> Tensor:
        """Normalize unit-range pixels."""
        if self.mode is NormalizationMode.UNIT_RANGE:
            return pixels
        return ((pixels - self.mean) / self.std).astype(np.float32)


@dataclass(frozen=True)
class LabeledImage:
    """One grayscale image with its label and split."""

    pixels: Tensor
    label: int
    split: Split

    def __post_init__(self) -> None:
        """Validate image."""
        if self.pixels.ndim != 2:  # noqa: PLR2004
            raise ShapeMismatch("pixels rank", 2, self.pixels.ndim)
        if not 0 <= self.label < NUM_CLASSES:
            raise LabelOutOfRange(f"label {self.label} outside [0, {NUM_CLASSES})")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable image collection; pixels are stored in [0, 1]."""

    pixels: Tensor
    labels: Tensor
    splits: Tensor
    class_names: tuple[str, ...] = CLASS_NAMES
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self) -> None:
        """Check array agreement."""
        n = self.pixels.shape[0]
        if self.pixels.ndim != 3:  # noqa: PLR2004
            raise ShapeMismatch("pixels rank", 3, self.pixels.ndim)
        if self.labels.shape != (n,):
            raise ShapeMismatch("labels", (n,), self.labels.shape)
        if self.splits.shape != (n,):
            raise ShapeMismatch("splits", (n,), self.splits.shape)

    @classmethod
    def empty(cls, image_size: int = IMAGE_SIZE) -> Dataset:
        """Dataset without images."""
        return cls(
            pixels=np.zeros((0, image_size, image_size), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            splits=np.zeros(0, dtype=np.int8),
        )

    @classmethod
    def from_images(
        cls,
        images: Iterable[LabeledImage],
        image_size: int = IMAGE_SIZE,
        chunk: int = FROM_IMAGES_CHUNK,
    ) -> Dataset:
        """Collect images into one dataset, filling fixed-size buffers."""
        blocks: list[Tensor] = []
        labels: list[int] = []
        splits: list[int] = []
        block: Tensor | None = None
        filled = 0
        for item in images:
            if block is None or filled == chunk:
                if block is not None:
                    blocks.append(block)
                shape = blocks[0].shape[1:] if blocks else item.pixels.shape
                block = np.empty((chunk, *shape), dtype=np.float32)
                filled = 0
            if item.pixels.shape != block.shape[1:]:
                raise ShapeMismatch("image", block.shape[1:], item.pixels.shape)
            block[filled] = item.pixels
            filled += 1
            labels.append(item.label)
            splits.append(SPLIT_ORDER.index(item.split))
        if block is None:
            return cls.empty(image_size)
        blocks.append(block[:filled])
        return cls(
            pixels=np.concatenate(blocks),
            labels=np.array(labels, dtype=np.int64),
            splits=np.array(splits, dtype=np.int8),
        )

    def __len__(self) -> int:
        """Total image count."""
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledImage]:
        """Yield every image in storage order."""
        for i in range(len(self)):
            yield LabeledImage(
                pixels=self.pixels[i],
                label=int(self.labels[i]),
                split=SPLIT_ORDER[int(self.splits[i])],
            )

    @property
    def image_shape(self) -> tuple[int, int]:
        """Height and width."""
        return int(self.pixels.shape[1]), int(self.pixels.shape[2])

    def indices(self, split: Split) -> Tensor:
        """Storage indices of a split."""
        return np.flatnonzero(self.splits == SPLIT_ORDER.index(split))

    def count(self, split: Split) -> int:
        """Images in a split."""
        return int(np.count_nonzero(self.splits == SPLIT_ORDER.index(split)))

    def counts(self) -> dict[str, int]:
        """Images per split."""
        return {str(split): self.count(split) for split in SPLIT_ORDER}

    def split_arrays(self, split: Split) -> tuple[Tensor, Tensor]:
        """Normalized N x 1 x H x W images and their labels."""
        idx = self.indices(split)
        images = self.normalization.apply(self.pixels[idx])[:, None]
        return np.ascontiguousarray(images, dtype=np.float32), self.labels[idx]

    def standardized(self) -> Dataset:
        """Copy standardized with the training split mean and std."""
        train = self.pixels[self.indices(Split.TRAINING)]
        if train.size == 0:
            raise EmptySplit("standardization needs a non-empty Training split")
        mean = float(train.mean(dtype=np.float64))
        std = float(train.std(dtype=np.float64)) or 1.0
        return replace(
            self,
            normalization=Normalization(NormalizationMode.STANDARDIZED, mean, std),
        )

    def subsample(self, n: int, seed: int) -> Dataset:
        """Seeded random subset of n images, storage order kept."""
        if not 0 < n <= len(self):
            raise InvalidConfig("subsample", f"must be in 1..{len(self)}")
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        return replace(
            self,
            pixels=self.pixels[idx],
            labels=self.labels[idx],
            splits=self.splits[idx],
        )


def _parse_row(row: Sequence[str], line: int) -> LabeledImage:
    if len(row) != len(FER2013_HEADER):
        raise DataRowInvalid(line, f"expected 3 columns, got {len(row)}")
    emotion, pixel_text, usage = row
    try:
        label = int(emotion)
    except ValueError as e:
        raise DataRowInvalid(line, f"non-integer label {emotion!r}") from e
    if not 0 <= label < NUM_CLASSES:
        raise DataRowInvalid(line, f"label {label} outside [0, {NUM_CLASSES})")
    try:
        split = Split(usage.strip())
    except ValueError as e:
        raise DataRowInvalid(line, f"unknown usage {usage!r}") from e
    tokens = pixel_text.split()
    if len(tokens) != IMAGE_PIXELS:
        raise DataRowInvalid(
            line,
            f"expected {IMAGE_PIXELS} pixels, got {len(tokens)}",
        )
    try:
        values = np.array(tokens, dtype=np.int64)
    except ValueError as e:
        raise DataRowInvalid(line, "non-integer pixel") from e
    if values.min() < 0 or values.max() > MAX_PIXEL_VALUE:
        raise DataRowInvalid(line, f"pixel outside [0, {MAX_PIXEL_VALUE}]")
    pixels = values.astype(np.float32) / MAX_PIXEL_VALUE
    pixels = pixels.reshape(IMAGE_SIZE, IMAGE_SIZE)
    return LabeledImage(pixels=pixels, label=label, split=split)


def iter_fer2013(stream: TextIO) -> Iterator[LabeledImage]:
    """Stream images from a FER2013 CSV; errors carry the 1-based file line."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != FER2013_HEADER:
        raise DataRowInvalid(1, f"expected header {','.join(FER2013_HEADER)}")
    for row in reader:
        if not row:
            continue
        yield _parse_row(row, reader.line_num)


def parse_fer2013(source: TextIO | Path | str) -> Dataset:
    """Read a FER2013 CSV file or stream."""
    if isinstance(source, Path | str):
        with Path(source).open(encoding="utf-8", newline="") as stream:
            dataset = Dataset.from_images(iter_fer2013(stream))
    else:
        dataset = Dataset.from_images(iter_fer2013(source))
    _LOGGER.info("[fer2013] Parsed %s images, %s", len(dataset), dataset.counts())
    return dataset


def write_fer2013(dataset: Dataset, stream: TextIO) -> None:
    """Write a dataset in FER2013 CSV layout."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(FER2013_HEADER)
    for image in dataset:
        values = np.rint(image.pixels * MAX_PIXEL_VALUE).astype(np.int64).ravel()
        writer.writerow(
            [image.label, " ".join(str(v) for v in values), str(image.split)],
        )


def synthetic_templates(image_size: int = IMAGE_SIZE) -> Tensor:
    """One template per class: an oriented bar plus an off-center blob."""
    coords = np.linspace(0.0, 1.0, image_size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    templates = np.empty((NUM_CLASSES, image_size, image_size), dtype=np.float32)
    for k in range(NUM_CLASSES):
        angle = math.pi * k / NUM_CLASSES
        dist = np.abs((xx - 0.5) * math.sin(angle) - (yy - 0.5) * math.cos(angle))
        bar = np.exp(-((dist / 0.06) ** 2))
        cx = 0.5 + 0.3 * math.cos(2 * math.pi * k / NUM_CLASSES)
        cy = 0.5 + 0.3 * math.sin(2 * math.pi * k / NUM_CLASSES)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.08**2))
        templates[k] = np.clip(0.15 + 0.5 * bar + 0.6 * blob, 0.0, 1.0)
    return templates


def make_synthetic(
    n_per_class: int,
    noise: float,
    seed: int,
    image_size: int = IMAGE_SIZE,
) -> Dataset:
    """Templates plus Gaussian pixel noise, split 80/10/10 within each class."""
    if n_per_class < 1:
        raise InvalidConfig("per_class", "must be at least 1")
    if noise < 0:
        raise InvalidConfig("noise", "must not be negative")
    rng = np.random.default_rng(seed)
    templates = synthetic_templates(image_size)
    n_test = n_per_class // 10
    codes = np.array(
        [0] * (n_per_class - 2 * n_test) + [1] * n_test + [2] * n_test,
        dtype=np.int8,
    )
    pixels = np.repeat(templates, n_per_class, axis=0)
    if noise > 0:
        pixels = pixels + rng.normal(0.0, noise, size=pixels.shape)
    return Dataset(
        pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32),
        labels=np.repeat(np.arange(NUM_CLASSES, dtype=np.int64), n_per_class),
        splits=np.tile(codes, NUM_CLASSES),
    )


class BatchPrefetcher(threading.Thread):
    """Produce batches on a background thread through a bounded queue."""

    _DONE = object()

    def __init__(self, source: Iterator[Batch], depth: int = PREFETCH_DEPTH) -> None:
        """Initialize prefetcher."""
        threading.Thread.__init__(self, daemon=True)
        self._source = source
        self._queue: queue.Queue[object] = queue.Queue(maxsize=depth)
        self._error: Exception | None = None
        self._is_run = False

    def open(self) -> None:
        """Start producing."""
        if not self._is_run:
            self._is_run = True
            threading.Thread.start(self)

    def close(self) -> None:
        """Stop producing."""
        self._is_run = False

    def _put(self, item: object) -> bool:
        while self._is_run:
            try:
                self._queue.put(item, timeout=QUEUE_POLL)
            except queue.Full:
                continue
            return True
        return False

    def run(self) -> None:
        """Fill the queue until the source is exhausted or the consumer leaves."""
        try:
            for item in self._source:
                if not self._put(item):
                    return
        except Exception as e:  # noqa: BLE001
            self._error = e
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Batch]:
        """Yield batches in source order."""
        self.open()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    break
                yield cast(Batch, item)
        finally:
            self.close()
        self.join()
        if self._error is not None:
            raise self._error


def _iter_batches(
    dataset: Dataset,
    split: Split,
    batch_size: int,
    shuffle_seed: int | Sequence[int] | None,
    augment: bool,
) -> Iterator[Batch]:
    images, labels = dataset.split_arrays(split)
    n = labels.shape[0]
    rng = np.random.default_rng(
        np.random.SeedSequence(0 if shuffle_seed is None else shuffle_seed),
    )
    order = rng.permutation(n) if shuffle_seed is not None else np.arange(n)
    flips = rng.random(n) < FLIP_PROBABILITY if augment else None
    drop_last = split is Split.TRAINING
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        batch = images[idx]
        if flips is not None:
            flip = flips[start : start + batch_size]
            batch[flip] = batch[flip][..., ::-1]
        yield batch, labels[idx]


def batches(
    dataset: Dataset,
    split: Split,
    batch_size: int,
    shuffle_seed: int | Sequence[int] | None = None,
    augment: bool = False,
    prefetch: bool = False,
) -> Iterator[Batch]:
    """Minibatches of a split; Training drops its final partial batch."""
    if dataset.count(split) == 0:
        raise EmptySplit(f"split {split} is empty")
    if batch_size < 1 or (split is Split.TRAINING and batch_size < MIN_BN_BATCH):
        raise InvalidConfig("batch_size", f"too small for split {split}")
    source = _iter_batches(dataset, split, batch_size, shuffle_seed, augment)
    if prefetch:
        return iter(BatchPrefetcher(source))
    return source
