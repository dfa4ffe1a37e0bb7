"""Datasets: synthetic regression/classification generators, IDX ingestion,
and seeded minibatch sampling.

All generators draw from counter-based streams (see `rng`), so a dataset is a
pure function of its seed.  Samplers own their epoch state and must not be
shared across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    """Raised for malformed IDX files (bad magic, truncation, count mismatch)."""


@dataclass
class Dataset:
    name: str
    inputs: np.ndarray  # (S, d)
    targets: np.ndarray  # (S,) floats for regression, 0-based ints for classes
    output_dim: int = 1

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (S, d)")
        if len(self.inputs) != len(self.targets) or len(self.inputs) < 1:
            raise ValueError(
                f"need equal, nonzero input/target counts, got "
                f"{len(self.inputs)} and {len(self.targets)}"
            )
        if np.issubdtype(self.targets.dtype, np.integer) and self.targets.size:
            lo, hi = self.targets.min(), self.targets.max()
            if lo < 0 or hi >= self.output_dim:
                raise ValueError(
                    f"class targets span [{lo}, {hi}], outside [0, {self.output_dim})"
                )

    @property
    def size(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class TaskSet:
    """Related regression tasks sharing the same inputs, one shift each."""

    tasks: list[Dataset]
    shifts: np.ndarray

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise ValueError("need at least one task")
        d = self.tasks[0].input_dim
        if any(t.input_dim != d for t in self.tasks):
            raise ValueError("all tasks must share the input dimension")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


def gen_sine(size: int, noise_std: float, seed: int) -> Dataset:
    """x ~ U[0,1], y = sin(2 pi x) + noise_std * N(0,1)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    g = rng.stream(seed, rng.DATA)
    x = g.random(size)
    y = np.sin(2.0 * np.pi * x) + noise_std * g.standard_normal(size)
    return Dataset("sine", x[:, None], y)


def gen_square(size: int, noise_std: float, seed: int) -> Dataset:
    """x ~ U[0,1], y = x^2 + noise_std * N(0,1)."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    g = rng.stream(seed, rng.DATA)
    x = g.random(size)
    y = x**2 + noise_std * g.standard_normal(size)
    return Dataset("square", x[:, None], y)


def gen_shifted_sines(n_tasks: int, size: int, seed: int) -> TaskSet:
    """Tasks y_p = sin(2 pi x) + shift_p with shifts evenly spaced in [-1, 1].

    One x sample is drawn and shared by every task.
    """
    if n_tasks < 2:
        raise ValueError("need at least two tasks")
    g = rng.stream(seed, rng.DATA)
    x = g.random(size)
    base = np.sin(2.0 * np.pi * x)
    shifts = -1.0 + 2.0 * np.arange(n_tasks) / (n_tasks - 1)
    tasks = [
        Dataset(f"shifted_sine_{p}", x[:, None], base + shifts[p])
        for p in range(n_tasks)
    ]
    return TaskSet(tasks, shifts)


# ---------------------------------------------------------------------------
# IDX image files (big-endian; images magic 2051, labels magic 2049)


def _read_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def load_mnist_idx(images_path: str, labels_path: str, subset: int) -> Dataset:
    """First `subset` records of an IDX image/label pair.

    Pixels are flattened row-major and scaled to [0, 1] by /255; labels are
    kept 0-based.
    """
    if subset < 1:
        raise ValueError("subset must be >= 1")
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()

    magic = _read_u32(img_buf, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )
    count = _read_u32(img_buf, 4, images_path)
    rows = _read_u32(img_buf, 8, images_path)
    cols = _read_u32(img_buf, 12, images_path)
    if len(img_buf) < 16 + count * rows * cols:
        raise IdxFormatError(
            f"{images_path}: file holds fewer than {count} {rows}x{cols} images"
        )

    lab_magic = _read_u32(lab_buf, 0, labels_path)
    if lab_magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic {lab_magic}, expected {IDX_LABELS_MAGIC}"
        )
    lab_count = _read_u32(lab_buf, 4, labels_path)
    if lab_count != count:
        raise IdxFormatError(
            f"label count {lab_count} does not match image count {count}"
        )
    if len(lab_buf) < 8 + lab_count:
        raise IdxFormatError(f"{labels_path}: file holds fewer than {lab_count} labels")
    if subset > count:
        raise IdxFormatError(f"requested {subset} records but files hold {count}")

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=subset * rows * cols, offset=16)
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=subset, offset=8)
    inputs = pixels.reshape(subset, rows * cols).astype(np.float64) / 255.0
    return Dataset("mnist", inputs, labels.astype(np.int64), output_dim=10)


def write_idx_images(path: str, images: np.ndarray) -> None:
    """Write (count, rows, cols) uint8 images in IDX format."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


_TEMPLATE_KEY = 1899  # fixed task identity: templates do not move with the seed


def gen_class_images(size: int, seed: int, side: int = 28, n_classes: int = 10) -> Dataset:
    """Offline stand-in for MNIST: 10 fixed blocky templates plus pixel noise.

    Class templates are coarse random grids upsampled to `side` x `side`, drawn
    from a fixed internal key so every seed sees the same classification task;
    the seed only controls which samples are drawn.  Pixels land in [0, 1] like
    the IDX loader output.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if side % 4 != 0:
        raise ValueError("side must be a multiple of 4")
    tg = rng.stream(_TEMPLATE_KEY, rng.TEMPLATE)
    block = side // 4
    templates = np.stack(
        [np.kron(tg.random((4, 4)), np.ones((block, block))) for _ in range(n_classes)]
    )
    g = rng.stream(seed, rng.DATA)
    labels = g.integers(0, n_classes, size=size)
    noise = 0.25 * g.standard_normal((size, side, side))
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return Dataset(
        "synthetic_images", images.reshape(size, side * side), labels, output_dim=n_classes
    )


@dataclass
class MinibatchSampler:
    """Seeded epoch-permutation sampler.

    Each epoch is one random permutation of {0..S-1} cut into ceil(S/batch)
    consecutive slices; the last slice may be short.  Single-owner mutable
    state: do not share across threads.
    """

    data_size: int
    batch_size: int
    seed: int
    epoch: int = 0
    _pos: int = field(default=0, repr=False)
    _perm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.data_size:
            raise ValueError(
                f"batch_size must be in [1, {self.data_size}], got {self.batch_size}"
            )

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.data_size // self.batch_size)

    def next_indices(self) -> np.ndarray:
        if self._perm is None:
            self._perm = rng.stream(self.seed, rng.SAMPLER, step=self.epoch).permutation(
                self.data_size
            )
        out = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        if self._pos >= self.data_size:
            self.epoch += 1
            self._pos = 0
            self._perm = None
        return out


def next_batch(sampler: MinibatchSampler, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    if sampler.data_size != dataset.size:
        raise ValueError(
            f"sampler built for size {sampler.data_size}, dataset has {dataset.size}"
        )
    idx = sampler.next_indices()
    return dataset.inputs[idx], dataset.targets[idx]
