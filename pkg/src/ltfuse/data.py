"""Long-tailed datasets: synthesis, imbalance weights, group labels, disk IO."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

SPLITS = ("train", "val", "test")
GROUPS = ("many", "medium", "few")

# SeedSequence entropy tag per split so splits never share a noise stream.
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable labelled image set.

    ``images`` has shape (N, H, W, channels), float32. ``ids`` are globally
    unique sample identifiers (they key the feature store); ``positions``
    holds the per-sample object offset used by the synthetic generator.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    split: str = "train"
    seed: int = 0
    positions: np.ndarray | None = None
    class_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}", "split")
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = images[..., None]
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels) or len(ids) != len(labels):
            raise ConfigError("images, labels and ids disagree in length", "samples")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, K)", "labels")
        if len(np.unique(ids)) != len(ids):
            raise ConfigError("sample ids are not unique", "ids")
        object.__setattr__(self, "images", _readonly(images))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "ids", _readonly(ids))
        if self.positions is not None:
            object.__setattr__(self, "positions", _readonly(np.asarray(self.positions, dtype=np.float64)))
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{k}" for k in range(self.num_classes)))
        if self.split == "train" and np.any(self.class_counts == 0):
            raise ConfigError("every class needs at least one training sample", "class_counts")

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def checksum(self):
        h = hashlib.sha256()
        h.update(self.images.astype("<f4").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.ids.astype("<i8").tobytes())
        return h.hexdigest()

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(
            images=self.images[index],
            labels=self.labels[index],
            ids=self.ids[index],
            num_classes=self.num_classes,
            split=self.split,
            seed=self.seed,
            positions=None if self.positions is None else self.positions[index],
            class_names=self.class_names,
            meta=dict(self.meta),
        )


# ---------------------------------------------------------------------------
# Class counts, weights and groups


def longtail_counts(num_classes, n_max, imbalance_ratio, profile="exponential"):
    """Per-class training counts for a long-tailed profile.

    The exponential profile follows ``n_k = round(n_max * ratio ** (-k / (K - 1)))``
    with ties rounded half up. The step profile gives the first half of the
    classes ``n_max`` and the rest ``n_max / ratio``.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes", "num_classes")
    if not imbalance_ratio > 1:
        raise ConfigError("imbalance ratio must be > 1", "imbalance_ratio")
    if n_max / imbalance_ratio < 1:
        raise ConfigError("n_max / imbalance_ratio must be >= 1", "imbalance_ratio")
    k = np.arange(num_classes)
    if profile == "exponential":
        raw = n_max * float(imbalance_ratio) ** (-k / (num_classes - 1))
    elif profile == "step":
        raw = np.where(k < num_classes // 2, n_max, n_max / imbalance_ratio)
    else:
        raise ConfigError(f"unknown profile {profile!r}", "profile")
    return np.maximum(np.floor(raw + 0.5), 1).astype(np.int64)


def compute_weights(counts):
    """Imbalance weights ``w_k = 1 - n_k / max_j n_j``; the largest class gets 0."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ConfigError("empty class counts", "counts")
    if np.any(counts < 1):
        raise ConfigError("class counts must be >= 1", "counts")
    return 1.0 - counts / counts.max()


def assign_groups(counts, many_min=100, few_max=20):
    """Label each class ``many`` (> many_min), ``few`` (< few_max) or ``medium``."""
    if not many_min > few_max:
        raise ConfigError("many_min must exceed few_max", "many_min")
    counts = np.asarray(counts)
    return [
        "many" if n > many_min else "few" if n < few_max else "medium"
        for n in counts
    ]


@dataclass(frozen=True)
class ImbalanceProfile:
    counts: tuple
    weights: tuple
    groups: tuple
    thresholds: tuple = (100, 20)

    @classmethod
    def from_counts(cls, counts, many_min=100, few_max=20):
        counts = tuple(int(c) for c in counts)
        return cls(
            counts=counts,
            weights=tuple(float(w) for w in compute_weights(counts)),
            groups=tuple(assign_groups(counts, many_min, few_max)),
            thresholds=(many_min, few_max),
        )

    @property
    def priors(self):
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum()

    def group_members(self, group):
        return [k for k, g in enumerate(self.groups) if g == group]


# ---------------------------------------------------------------------------
# Synthetic generator


def class_template(k, num_classes, image_shape, offset=(0.0, 0.0)):
    """Windowed oriented grating for class ``k`` centred at ``offset`` pixels
    from the image centre. Orientation and spatial frequency vary with k."""
    h, w, ch = image_shape
    theta = np.pi * k / num_classes
    freq = 0.16 + 0.06 * (k % 3)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy = (h - 1) / 2 + offset[0]
    cx = (w - 1) / 2 + offset[1]
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.22 * min(h, w)) ** 2))
    chans = [env * np.cos(2 * np.pi * freq * u + c * np.pi / 2) for c in range(ch)]
    return np.stack(chans, axis=-1)


def _render(labels, num_classes, image_shape, rng, noise, jitter):
    n = len(labels)
    positions = rng.uniform(-jitter, jitter, size=(n, 2)) if jitter > 0 else np.zeros((n, 2))
    images = np.empty((n,) + tuple(image_shape), dtype=np.float64)
    for i, (y, p) in enumerate(zip(labels, positions)):
        images[i] = class_template(int(y), num_classes, image_shape, p)
    images += noise * rng.standard_normal(images.shape)
    return images.astype(np.float32), positions


def _make(counts, split, seed, image_shape, noise, jitter, id_offset, meta):
    counts = np.asarray(counts, dtype=np.int64)
    num_classes = len(counts)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SPLIT_CODE[split]]))
    labels = np.repeat(np.arange(num_classes), counts)
    labels = labels[rng.permutation(len(labels))]
    images, positions = _render(labels, num_classes, image_shape, rng, noise, jitter)
    meta = dict(meta, noise=noise, jitter=jitter)
    return Dataset(
        images=images,
        labels=labels,
        ids=np.arange(len(labels)) + id_offset,
        num_classes=num_classes,
        split=split,
        seed=int(seed),
        positions=positions,
        meta=meta,
    )


def synth_longtailed(num_classes, n_max, imbalance_ratio, profile="exponential", seed=0,
                     image_shape=(16, 16, 1), noise=1.0, jitter=3.0, id_offset=0):
    """Generate a long-tailed training split.

    Images are class templates placed at a random offset plus Gaussian pixel
    noise. Identical arguments give a bit-identical dataset.
    """
    counts = longtail_counts(num_classes, n_max, imbalance_ratio, profile)
    meta = dict(n_max=int(n_max), imbalance_ratio=float(imbalance_ratio), profile=profile)
    return _make(counts, "train", seed, image_shape, noise, jitter, id_offset, meta)


def synth_balanced(num_classes, n_per_class, split="test", seed=0, image_shape=(16, 16, 1),
                   noise=1.0, jitter=3.0, id_offset=0):
    """Generate a class-balanced split with ``n_per_class`` samples per class."""
    counts = np.full(num_classes, int(n_per_class))
    return _make(counts, split, seed, image_shape, noise, jitter, id_offset, {"n_per_class": int(n_per_class)})


def synth_corpus(num_classes=10, n_max=500, imbalance_ratio=100.0, profile="exponential", seed=0,
                 image_shape=(16, 16, 1), noise=1.0, jitter=3.0, n_val=20, n_test=50):
    """Train/val/test splits sharing templates, with disjoint sample ids."""
    train = synth_longtailed(num_classes, n_max, imbalance_ratio, profile, seed, image_shape, noise, jitter)
    val = synth_balanced(num_classes, n_val, "val", seed, image_shape, noise, jitter, id_offset=len(train))
    test = synth_balanced(num_classes, n_test, "test", seed, image_shape, noise, jitter,
                          id_offset=len(train) + len(val))
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# Disk format: <split>.json manifest + <split>.bin little-endian float32 images


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = dataset.images.astype("<f4").tobytes()
    (directory / f"{dataset.split}.bin").write_bytes(blob)
    manifest = {
        "format": "ltfuse-dataset/1",
        "split": dataset.split,
        "seed": dataset.seed,
        "num_classes": dataset.num_classes,
        "class_names": list(dataset.class_names),
        "class_counts": [int(c) for c in dataset.class_counts],
        "image_shape": list(dataset.image_shape),
        "labels": [int(y) for y in dataset.labels],
        "ids": [int(i) for i in dataset.ids],
        "positions": None if dataset.positions is None else dataset.positions.tolist(),
        "meta": dataset.meta,
        "checksum": dataset.checksum,
    }
    path = directory / f"{dataset.split}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(directory, split="train"):
    directory = Path(directory)
    mpath, bpath = directory / f"{split}.json", directory / f"{split}.bin"
    if not mpath.exists() or not bpath.exists():
        raise FormatError(f"dataset split {split!r} not found in {directory}")
    try:
        m = json.loads(mpath.read_text())
        shape = tuple(m["image_shape"])
        images = np.frombuffer(bpath.read_bytes(), dtype="<f4")
        images = images.reshape((len(m["labels"]),) + shape)
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed dataset {mpath}: {exc}") from exc
    ds = Dataset(
        images=images,
        labels=m["labels"],
        ids=m["ids"],
        num_classes=m["num_classes"],
        split=m["split"],
        seed=m["seed"],
        positions=m.get("positions"),
        class_names=tuple(m["class_names"]),
        meta=m.get("meta", {}),
    )
    if ds.checksum != m["checksum"]:
        raise FormatError(f"checksum mismatch for {mpath}")
    return ds
