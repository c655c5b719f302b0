"""Column-sequence input pipelines.

Images are read left to right: column ``t`` of every image becomes time step
``t`` and the pixel rows become the channels of that step.

IDX containers are big-endian: two zero bytes, a type code (0x08 for unsigned
bytes), the number of dimensions, one 4-byte size per dimension, then the data.
Images use magic 0x00000803, labels 0x00000801.
"""
import csv
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from psn.errors import ContractError, DimensionError, IdxFormatError
from psn.io import PathLike, atomic_write_bytes, atomic_write_text
from psn.models import DataSpec
from psn.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TOY_SIZE = 16
TOY_CLASSES = 4
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class NormalizationStats(BaseModel):
    mean: float
    std: float


class SequenceMetadata(BaseModel):
    source: str
    num_classes: int = Field(ge=2)
    normalization: Optional[NormalizationStats] = None
    params: Dict[str, Union[int, float, str]] = Field(default_factory=dict)


class SequenceBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: Tensor  # (T, N, C)
    labels: np.ndarray  # (N,) int64
    metadata: SequenceMetadata

    @model_validator(mode="after")
    def _labels_match(self) -> "SequenceBatch":
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (T, N, C), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[1],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.inputs.shape[1]} samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.metadata.num_classes):
            raise ValueError(f"labels must lie in [0, {self.metadata.num_classes})")
        return self

    @property
    def time_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[1]

    @property
    def channels(self) -> int:
        return self.inputs.shape[2]

    def subset(self, index: np.ndarray) -> "SequenceBatch":
        return SequenceBatch(inputs=Tensor(self.inputs.data[:, index]), labels=self.labels[index],
                             metadata=self.metadata)


def normalization_stats(images: np.ndarray) -> NormalizationStats:
    std = float(images.std())
    return NormalizationStats(mean=float(images.mean()), std=std if std > 0 else 1.0)


def columnize(images: Union[Tensor, np.ndarray], labels: np.ndarray, num_classes: int,
              normalize: Union[bool, NormalizationStats] = False, source: str = "images") -> SequenceBatch:
    """``(N, H, W)`` images to a ``(W, N, H)`` sequence batch.

    ``normalize`` may be ``True`` (stats from these images) or stats computed
    elsewhere, typically on the train split.
    """
    array = images.data if isinstance(images, Tensor) else np.asarray(images)
    if array.ndim != 3:
        raise DimensionError(f"images must be (N, H, W), got {array.shape}")
    if array.shape[0] == 0:
        raise ContractError("cannot columnize an empty batch")
    array = array.astype(np.float32)
    stats = None
    if normalize is True:
        stats = normalization_stats(array)
    elif isinstance(normalize, NormalizationStats):
        stats = normalize
    if stats is not None:
        array = (array - stats.mean) / stats.std
    sequence = np.ascontiguousarray(array.transpose(2, 0, 1))
    metadata = SequenceMetadata(source=source, num_classes=num_classes, normalization=stats)
    return SequenceBatch(inputs=Tensor(sequence), labels=np.asarray(labels, dtype=np.int64), metadata=metadata)


def decolumnize(batch: SequenceBatch) -> np.ndarray:
    """Inverse of :func:`columnize` (normalisation is undone when stats are present)."""
    images = batch.inputs.data.transpose(1, 2, 0)
    stats = batch.metadata.normalization
    if stats is not None:
        images = images * stats.std + stats.mean
    return np.ascontiguousarray(images)


# ---------------------------------------------------------------------------
# synthetic temporal task

def _toy_images(num_classes: int, samples_per_class: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    size = TOY_SIZE
    half = size // 2
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng.shuffle(labels)
    images = rng.uniform(0.0, 0.3, size=(labels.size, size, size)).astype(np.float32)
    for index, label in enumerate(labels):
        gap = int(label) + 1
        start = int(rng.integers(0, size - gap))
        # P lights the top half of one column, Q the bottom half of a later one.
        images[index, :half, start] = 1.0
        images[index, half:, start + gap] = 1.0
    return images, labels


def synth_toy_dataset(num_classes: int = TOY_CLASSES, samples_per_class: int = 500, seed: int = 0,
                      test_samples_per_class: Optional[int] = None,
                      normalize: bool = True) -> Tuple[SequenceBatch, SequenceBatch]:
    """Two-pulse 16x16 images; the class is the number of columns between the pulses.

    Each image holds a top-half pulse and a later bottom-half pulse on faint
    noise, at a random start column. Every column looks alike to a memoryless
    reader, so the class can only be recovered by integrating over time.
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if num_classes > TOY_SIZE - 1:
        raise ContractError(f"at most {TOY_SIZE - 1} classes fit a {TOY_SIZE}-column image, got {num_classes}")
    if samples_per_class < 1:
        raise ContractError(f"samples_per_class must be >= 1, got {samples_per_class}")
    test_per_class = test_samples_per_class if test_samples_per_class is not None else max(1, samples_per_class // 4)
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train_images, train_labels = _toy_images(num_classes, samples_per_class, np.random.default_rng(train_seq))
    test_images, test_labels = _toy_images(num_classes, test_per_class, np.random.default_rng(test_seq))

    stats = normalization_stats(train_images) if normalize else None
    params = {"num_classes": num_classes, "samples_per_class": samples_per_class,
              "test_samples_per_class": test_per_class, "seed": seed}
    train = columnize(train_images, train_labels, num_classes, normalize=stats or False, source="toy/train")
    test = columnize(test_images, test_labels, num_classes, normalize=stats or False, source="toy/test")
    train.metadata.params.update(params)
    test.metadata.params.update(params)
    logger.info(f"Synthesised toy dataset: {train.num_samples} train / {test.num_samples} test, {num_classes} classes")
    return train, test


# ---------------------------------------------------------------------------
# IDX containers

def _read_header(raw: bytes, expected_magic: int, expected_dims: int) -> Tuple[List[int], int]:
    if len(raw) < 4:
        raise IdxFormatError("file too short for the magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    header_end = 4 + 4 * expected_dims
    if len(raw) < header_end:
        raise IdxFormatError("truncated dimension sizes", len(raw))
    dims = list(struct.unpack(f">{expected_dims}I", raw[4:header_end]))
    return dims, header_end


def _read_payload(raw: bytes, dims: List[int], offset: int) -> np.ndarray:
    needed = int(np.prod(dims))
    available = len(raw) - offset
    if available < needed:
        raise IdxFormatError(f"truncated data: expected {needed} bytes, found {available}", len(raw))
    if available > needed:
        logger.warning(f"IDX file has {available - needed} trailing bytes after the data")
    return np.frombuffer(raw, dtype=np.uint8, count=needed, offset=offset).reshape(dims)


def load_idx_images(path: PathLike) -> np.ndarray:
    """``(N, H, W)`` uint8 images from an IDX image file."""
    raw = Path(path).read_bytes()
    dims, offset = _read_header(raw, IMAGE_MAGIC, 3)
    return _read_payload(raw, dims, offset).copy()


def load_idx_labels(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims, offset = _read_header(raw, LABEL_MAGIC, 1)
    return _read_payload(raw, dims, offset).astype(np.int64)


def load_csv_labels(path: PathLike) -> np.ndarray:
    """One integer label per row; the first column is used and a non-numeric header row is skipped."""
    labels: List[int] = []
    with open(path, newline="") as handle:
        for row_number, row in enumerate(csv.reader(handle)):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
            except ValueError:
                if row_number == 0:
                    continue
                raise ContractError(f"{path}: row {row_number + 1} is not an integer label: {row[0]!r}")
    return np.asarray(labels, dtype=np.int64)


def write_idx_images(path: PathLike, images: np.ndarray) -> Path:
    images = np.asarray(images)
    if images.ndim != 3:
        raise DimensionError(f"IDX images must be (N, H, W), got {images.shape}")
    header = struct.pack(">I3I", IMAGE_MAGIC, *images.shape)
    return atomic_write_bytes(path, header + images.astype(np.uint8).tobytes())


def write_idx_labels(path: PathLike, labels: np.ndarray) -> Path:
    labels = np.asarray(labels)
    header = struct.pack(">II", LABEL_MAGIC, labels.shape[0])
    return atomic_write_bytes(path, header + labels.astype(np.uint8).tobytes())


def write_csv_labels(path: PathLike, labels: np.ndarray) -> Path:
    return atomic_write_text(path, "label\n" + "".join(f"{int(v)}\n" for v in labels))


def _load_labels(path: Path) -> np.ndarray:
    return load_csv_labels(path) if path.suffix == ".csv" else load_idx_labels(path)


def load_idx_pair(images_path: PathLike, labels_path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    images = load_idx_images(images_path)
    labels = _load_labels(Path(labels_path))
    if labels.shape[0] != images.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    return images, labels


def _find_labels(directory: Path, stem: str) -> Path:
    idx = directory / stem
    csv_path = directory / (stem.split("-")[0] + "-labels.csv")
    if idx.exists():
        return idx
    if csv_path.exists():
        return csv_path
    raise ContractError(f"no labels for split in {directory}: expected {idx.name} or {csv_path.name}")


def _idx_root(directory: PathLike) -> Path:
    root = Path(directory)
    if not root.is_dir():
        raise ContractError(f"IDX data directory {root} does not exist")
    return root


def _classes_from_labels(label_sets: List[np.ndarray]) -> int:
    if any(labels.size == 0 for labels in label_sets):
        raise ContractError("cannot detect the class count from an empty label file")
    return int(max(labels.max() for labels in label_sets)) + 1


def load_idx_dataset(directory: PathLike, num_classes: Optional[int] = None) -> Tuple[SequenceBatch, SequenceBatch]:
    """Train/test sequence batches from an MNIST-style directory, normalised with train statistics.

    Without ``num_classes`` the count is one past the largest label of either split.
    """
    root = _idx_root(directory)
    raw = {}
    for split, (images_name, labels_name) in MNIST_FILES.items():
        raw[split] = load_idx_pair(root / images_name, _find_labels(root, labels_name))
    classes = num_classes or _classes_from_labels([labels for _, labels in raw.values()])
    stats = normalization_stats(raw["train"][0].astype(np.float32))
    train = columnize(raw["train"][0], raw["train"][1], classes, normalize=stats, source=f"idx:{root}/train")
    test = columnize(raw["test"][0], raw["test"][1], classes, normalize=stats, source=f"idx:{root}/test")
    logger.info(f"Loaded IDX dataset from {root}: {train.num_samples} train / {test.num_samples} test, "
                f"{classes} classes")
    return train, test


def resolve_data_spec(spec: DataSpec) -> DataSpec:
    """``spec`` with its class count filled in, so a manifest pins the model's output width."""
    if spec.num_classes is not None:
        return spec
    if spec.source == "toy":
        classes = TOY_CLASSES
    else:
        root = _idx_root(spec.source[len("idx:"):])
        classes = _classes_from_labels([_load_labels(_find_labels(root, labels_name))
                                        for _, labels_name in MNIST_FILES.values()])
        logger.info(f"Detected {classes} classes from the labels in {root}")
    return DataSpec.model_validate({**spec.model_dump(), "num_classes": classes})


def load_data(spec: DataSpec) -> Tuple[SequenceBatch, SequenceBatch]:
    """Train/test batches for a data source recorded in a run manifest."""
    if spec.source == "toy":
        return synth_toy_dataset(spec.num_classes or TOY_CLASSES, spec.samples_per_class, spec.seed,
                                 test_samples_per_class=spec.test_samples_per_class)
    return load_idx_dataset(spec.source[len("idx:"):], spec.num_classes)


def peek_idx_shape(path: PathLike) -> Tuple[int, int, int]:
    """``(N, H, W)`` from the header of an IDX image file without reading the pixels."""
    with open(path, "rb") as handle:
        raw = handle.read(16)
    dims, _ = _read_header(raw, IMAGE_MAGIC, 3)
    return dims[0], dims[1], dims[2]


def data_geometry(spec: DataSpec) -> Tuple[int, int]:
    """``(time_steps, channels)`` of the sequences ``spec`` produces."""
    if spec.source == "toy":
        return TOY_SIZE, TOY_SIZE
    root = Path(spec.source[len("idx:"):])
    _, height, width = peek_idx_shape(root / MNIST_FILES["train"][0])
    return width, height
