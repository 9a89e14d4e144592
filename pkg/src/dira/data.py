"""Labeled datasets: IDX ingestion, synthetic blobs, bundled digits, sampling and splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Images (``n x c x h x w`` in [0, 1]) or feature rows (``n x d``) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if images.shape[0] != labels.shape[0]:
            raise ConfigError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if images.ndim == 4 and images.size and (images.min() < 0 or images.max() > 1):
            raise ConfigError("image pixels must lie in [0, 1]")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.images[idx], self.labels[idx], self.num_classes,
                          self.name if name is None else name)

    def with_images(self, images, name: str | None = None) -> "LabeledSet":
        return LabeledSet(images, self.labels, self.num_classes, self.name if name is None else name)


# -- IDX -------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()} at byte 0")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated dimension table at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims, dtype=np.int64))
    need = end + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, file ends at byte {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after byte {need}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as IDX; unsigned bytes unless the dtype is a wider IDX type."""
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
            np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ConfigError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "") -> LabeledSet:
    """Load an IDX image/label pair; u8 pixels are scaled by 1/255 into [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be one-dimensional, got {labels.ndim} dims (byte 3)")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels (byte 4)")
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 dims, got {images.ndim} (byte 3)")
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        pixels = images.astype(np.float32) / np.float32(255.0)
    else:
        pixels = images.astype(np.float32)
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if labels.size else 2
    return LabeledSet(pixels, labels, num_classes, name or Path(images_path).stem)


def load_idx_dir(root) -> LabeledSet:
    """Load ``images.idx`` + ``labels.idx`` from a dataset directory."""
    root = Path(root)
    images, labels = root / "images.idx", root / "labels.idx"
    if not images.is_file() or not labels.is_file():
        raise ConfigError(f"dataset directory {root} must contain images.idx and labels.idx")
    return load_idx(images, labels, name=root.name)


# -- generated data ----------------------------------------------------------------

def make_synthetic(num_classes: int, n_per_class: int, input_dim: int,
                   class_separation: float, seed: int) -> LabeledSet:
    """Unit-variance Gaussian blobs whose means sit on a regular simplex.

    Every pair of class means is ``class_separation`` apart. Needs
    ``input_dim >= num_classes - 1``.
    """
    if num_classes < 2 or n_per_class < 1 or input_dim < 1 or not class_separation > 0:
        raise ConfigError("num_classes >= 2, n_per_class, input_dim and class_separation must be positive")
    if input_dim < num_classes - 1:
        raise ConfigError(f"{num_classes} equidistant means need input_dim >= {num_classes - 1}")
    corners = np.eye(num_classes) - 1.0 / num_classes
    _, _, vt = np.linalg.svd(corners)
    coords = corners @ vt[: num_classes - 1].T
    means = np.zeros((num_classes, input_dim))
    means[:, : num_classes - 1] = coords * (class_separation / np.sqrt(2.0))
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + rng.standard_normal((labels.size, input_dim))
    perm = rng.permutation(labels.size)
    return LabeledSet(x[perm], labels[perm], num_classes, f"blobs-{num_classes}x{n_per_class}")


def load_digits() -> LabeledSet:
    """The 8x8 handwritten digits bundled with scikit-learn (1797 images, 10 classes)."""
    from sklearn.datasets import load_digits as _load

    bunch = _load()
    images = (bunch.images / 16.0).astype(np.float32)[:, None]
    return LabeledSet(images, bunch.target, 10, "digits")


# -- sampling ----------------------------------------------------------------------

def sample_target(data: LabeledSet, n: int, seed: int) -> LabeledSet:
    """Draw ``n`` samples uniformly without replacement."""
    if n < 1 or n > len(data):
        raise ConfigError(f"cannot draw {n} samples from a set of {len(data)}")
    idx = np.random.default_rng(seed).permutation(len(data))[:n]
    return data.subset(idx)


def split(data: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Random disjoint, exhaustive split; the first part holds ``round(fraction * n)`` samples."""
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(data))
    k = int(round(fraction * len(data)))
    return data.subset(np.sort(perm[:k])), data.subset(np.sort(perm[k:]))


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering ``range(n)``, shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def resize(data: LabeledSet, size: int) -> LabeledSet:
    """Bilinearly rescale square images to ``size x size`` (values clipped back into [0, 1])."""
    from scipy.ndimage import zoom

    if data.images.ndim != 4:
        raise ConfigError("resize needs n x c x h x w images")
    _, _, h, w = data.images.shape
    if (h, w) == (size, size):
        return data
    scaled = zoom(data.images, (1, 1, size / h, size / w), order=1)
    return data.with_images(np.clip(scaled, 0.0, 1.0), name=f"{data.name}{size}")
