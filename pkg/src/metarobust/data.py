"""Dataset ingestion and N-way K-shot episodic sampling.

Two on-disk formats are supported (documented byte-level in the README):

* IDX - the classic digit-dataset container. Big-endian magic 0x00000803
  for image files (u8 pixels, dims [n, rows, cols]) and 0x00000801 for label
  files (u8 labels, dims [n]).
* PGM tree - one subdirectory per class, each holding binary ``P5`` images.

Pixels are scaled to [0, 1] by dividing by 255. Class sets are partitioned
into disjoint train and test splits; episodes are always sampled within one
split. The sampler distinguishes the train-time shot count from the test-time
shot count: meta-training may use more support examples per class than
meta-testing will have available.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataFormatError",
    "Dataset",
    "TaskSpec",
    "Episode",
    "load_idx_dataset",
    "synth_gaussian_dataset",
    "sample_episode",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed dataset files: bad magic, truncation, inconsistent sizes."""


@dataclass
class TaskSpec:
    """Episode geometry: N ways, K test shots, K-tilde train shots, Q queries,
    T tasks per meta-batch."""

    n_way: int = 5
    k_test: int = 1
    k_train: int = 1
    queries: int = 15
    tasks_per_batch: int = 4

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_test < 1 or self.k_train < 1:
            raise ValueError("shot counts must be >= 1")
        if self.queries < 1:
            raise ValueError("queries must be >= 1")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")

    def shots_for(self, role: str) -> int:
        if role == "train":
            return self.k_train
        if role == "test":
            return self.k_test
        raise ValueError(f"unknown role {role!r}")


@dataclass
class Episode:
    """One sampled task. Samples are ordered class-major; labels are episode
    labels 0..N-1. Original dataset indices are kept for audit."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: dict
    support_idx: np.ndarray
    query_idx: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray            # (n, ...) float64 in [0, 1]
    labels: np.ndarray            # (n,) int class ids
    train_classes: tuple
    test_classes: tuple
    by_class: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )
        self.train_classes = tuple(int(c) for c in self.train_classes)
        self.test_classes = tuple(int(c) for c in self.test_classes)
        if set(self.train_classes) & set(self.test_classes):
            raise ValueError("train and test class sets must be disjoint")
        self.by_class = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    def classes_for(self, role: str) -> tuple:
        if role == "train":
            return self.train_classes
        if role == "test":
            return self.test_classes
        raise ValueError(f"unknown role {role!r}")

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def check_supply(self, spec: TaskSpec):
        """Verify every class in each split can supply its episodes."""
        for role in ("train", "test"):
            need = spec.shots_for(role) + spec.queries
            for c in self.classes_for(role):
                have = len(self.by_class.get(c, ()))
                if have < need:
                    raise ValueError(
                        f"class {c} in {role} split has {have} samples, episode needs {need}"
                    )


def _default_split(classes, train_fraction: float):
    classes = sorted(int(c) for c in classes)
    n_train = int(np.ceil(len(classes) * train_fraction))
    n_train = min(max(n_train, 1), len(classes) - 1) if len(classes) > 1 else len(classes)
    return tuple(classes[:n_train]), tuple(classes[n_train:])


# -- IDX ------------------------------------------------------------------------


def _read_idx_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path.name}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataFormatError(
            f"{path.name}: malformed magic number 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path.name}: truncated file, {len(raw)} bytes < {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path.name}: truncated IDX header")
    magic, n = struct.unpack(">ii", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataFormatError(
            f"{path.name}: malformed magic number 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )
    if len(raw) < 8 + n:
        raise DataFormatError(f"{path.name}: truncated file, {len(raw)} bytes < {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise DataFormatError(f"{path.name}: malformed magic number {raw[:2]!r}, expected b'P5'")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed between tokens
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path.name}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataFormatError(f"{path.name}: non-numeric PGM header fields") from None
    if maxval != 255:
        raise DataFormatError(f"{path.name}: unsupported PGM maxval {maxval}")
    if len(raw) - pos < width * height:
        raise DataFormatError(f"{path.name}: truncated file, {len(raw) - pos} pixel bytes < {width * height}")
    img = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return img.reshape(height, width, 1).astype(np.float64) / 255.0


def load_idx_dataset(path, train_fraction: float = 0.5) -> Dataset:
    """Load a directory holding either an IDX image/label file pair or one
    PGM subdirectory per class. Ordering is deterministic (sorted filenames)."""
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError(f"{root}: not a directory")

    pgm_dirs = sorted(d for d in root.iterdir() if d.is_dir() and any(d.glob("*.pgm")))
    if pgm_dirs:
        images, labels, shape = [], [], None
        for label, d in enumerate(pgm_dirs):
            for f in sorted(d.glob("*.pgm")):
                img = _read_pgm(f)
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise DataFormatError(
                        f"{f.name}: inconsistent image size {img.shape[:2]}, expected {shape[:2]}"
                    )
                images.append(img)
                labels.append(label)
        train, test = _default_split(set(labels), train_fraction)
        return Dataset(np.stack(images), np.array(labels), train, test)

    image_files = sorted(f for f in root.iterdir() if f.is_file() and "images" in f.name.lower())
    label_files = sorted(f for f in root.iterdir() if f.is_file() and "labels" in f.name.lower())
    if not image_files or not label_files:
        raise DataFormatError(f"{root}: no IDX image/label pair and no PGM class folders found")
    images = np.concatenate([_read_idx_images(f) for f in image_files])
    labels = np.concatenate([_read_idx_labels(f) for f in label_files])
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{root}: image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    train, test = _default_split(set(labels.tolist()), train_fraction)
    return Dataset(images, labels, train, test)


# -- synthetic -------------------------------------------------------------------


def synth_gaussian_dataset(
    classes: int,
    per_class: int,
    dim: int | None = None,
    spread: float = 0.1,
    seed: int = 0,
    image_shape: tuple | None = None,
    train_fraction: float = 0.5,
    mean_radius: float = 0.25,
    fragile_dims: int = 0,
    fragile_radius: float = 0.0,
    directions: str = "gaussian",
) -> Dataset:
    """Gaussian blobs clipped to [0, 1]: class means sit at 0.5 plus a random
    direction of length ``mean_radius``; samples add isotropic noise of scale
    ``spread``. Deterministic given the seed.

    When ``fragile_dims`` is set, the trailing block of coordinates gets its
    own direction of length ``fragile_radius``. With a small radius the block
    carries class signal below a typical attack budget, giving the dataset
    image-like structure: a few strong robust features plus many weak ones an
    adversary can flip. ``directions="sign"`` draws +-1 directions, which
    spreads the signal evenly over the block's coordinates. ``mean_radius``
    may also be a per-coordinate amplitude profile for the main block (its
    length then fixes the block width), grading how strongly each coordinate
    separates the classes.
    """
    if spread <= 0:
        raise ValueError("spread must be positive")
    if (dim is None) == (image_shape is None):
        raise ValueError("give exactly one of dim or image_shape")
    if directions not in ("gaussian", "sign"):
        raise ValueError(f"unknown direction kind {directions!r}")
    shape = (int(dim),) if dim is not None else tuple(int(s) for s in image_shape)
    d = int(np.prod(shape))
    if not 0 <= fragile_dims < d:
        raise ValueError("fragile_dims must lie in [0, dim)")
    rng = np.random.default_rng(seed)

    def block_dirs(width):
        if directions == "sign":
            u = rng.choice([-1.0, 1.0], size=(classes, width))
        else:
            u = rng.normal(size=(classes, width))
        return u / np.linalg.norm(u, axis=1, keepdims=True)

    main_width = d - fragile_dims
    if np.ndim(mean_radius) == 1:
        profile = np.asarray(mean_radius, dtype=np.float64)
        if profile.shape != (main_width,):
            raise ValueError(
                f"mean_radius profile has {profile.size} entries, main block has {main_width} dims"
            )
        # per-coordinate amplitudes: scale unnormalized +-1/gaussian entries
        raw = rng.choice([-1.0, 1.0], size=(classes, main_width)) if directions == "sign" \
            else rng.normal(size=(classes, main_width))
        main = raw * profile
    else:
        main = float(mean_radius) * block_dirs(main_width)
    means = np.concatenate([main, fragile_radius * block_dirs(fragile_dims)], axis=1) \
        if fragile_dims else main
    means = 0.5 + means
    samples = means[:, None, :] + spread * rng.normal(size=(classes, per_class, d))
    images = np.clip(samples, 0.0, 1.0).reshape(classes * per_class, *shape)
    labels = np.repeat(np.arange(classes), per_class)
    train, test = _default_split(range(classes), train_fraction)
    return Dataset(images, labels, train, test)


# -- episodic sampling -------------------------------------------------------------


def sample_episode(ds: Dataset, spec: TaskSpec, rng: np.random.Generator, role: str = "train") -> Episode:
    """Draw one N-way episode from the given split, without replacement
    within each class. Train episodes use the train-time shot count, test
    episodes the test-time one."""
    shots = spec.shots_for(role)
    eligible = ds.classes_for(role)
    if len(eligible) < spec.n_way:
        raise ValueError(
            f"{role} split has {len(eligible)} classes, episode needs {spec.n_way}"
        )
    chosen = rng.choice(np.asarray(eligible), size=spec.n_way, replace=False)

    sup_idx, qry_idx = [], []
    for c in chosen:
        pool = ds.by_class[int(c)]
        need = shots + spec.queries
        if len(pool) < need:
            raise ValueError(f"class {int(c)} has {len(pool)} samples, episode needs {need}")
        perm = rng.permutation(len(pool))
        sup_idx.append(pool[perm[:shots]])
        qry_idx.append(pool[perm[shots:need]])

    sup_idx = np.concatenate(sup_idx)
    qry_idx = np.concatenate(qry_idx)
    sup_y = np.repeat(np.arange(spec.n_way), shots)
    qry_y = np.repeat(np.arange(spec.n_way), spec.queries)
    return Episode(
        support_x=ds.images[sup_idx],
        support_y=sup_y,
        query_x=ds.images[qry_idx],
        query_y=qry_y,
        class_map={int(c): i for i, c in enumerate(chosen)},
        support_idx=sup_idx,
        query_idx=qry_idx,
    )
