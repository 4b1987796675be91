"""Feature datasets, the binary feature-file format, and synthetic contaminated data.

An image is represented by its patch-feature map, an ``(H, W, C)`` float64
array produced by some frozen encoder. A :class:`FeatureDataset` stacks ``N``
such maps into one ``(N, H, W, C)`` array together with class ids and,
optionally, the hidden contamination labels and pixel masks.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigurationError,
    ContractError,
    DimensionOverflowError,
    FeatureFileError,
    InsufficientPoolError,
    TruncatedFileError,
    UnknownClassError,
    VersionMismatchError,
)

MAGIC = b"MEDS"
VERSION = 1
_HEADER = struct.Struct("<4sHHQIII")
_FLAG_LABELS = 0x1
_FLAG_MASKS = 0x2
# refuse to allocate more than 2**40 feature values from a header
_MAX_VALUES = 1 << 40


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """A collection of patch-feature maps sharing one grid shape.

    Attributes
    ----------
    features : ndarray, shape (N, H, W, C), float64
    class_ids : ndarray, shape (N,), int64
    labels : ndarray, shape (N,), uint8, optional
        Truth contamination bits (1 = anomalous). Training code must not read them.
    masks : ndarray, shape (N, H, W), uint8, optional
        Ground-truth anomaly masks at feature-grid resolution.
    """

    features: np.ndarray
    class_ids: np.ndarray
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 4:
            raise ContractError(f"features must be (N, H, W, C), got shape {feats.shape}")
        n, h, w, c = feats.shape
        if min(h, w, c) < 1:
            raise ContractError("H, W and C must all be positive")
        if not np.all(np.isfinite(feats)):
            raise ContractError("features contain NaN or Inf")
        cls = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if cls.shape != (n,):
            raise ContractError("one class id per image required")
        if n and cls.min() < 0:
            raise ContractError("class ids must be non-negative")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "class_ids", _frozen(cls))
        if self.labels is not None:
            lab = np.asarray(self.labels).reshape(-1)
            if lab.shape != (n,) or not np.all((lab == 0) | (lab == 1)):
                raise ContractError("labels must be N bits")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))
        if self.masks is not None:
            m = np.asarray(self.masks)
            if m.shape != (n, h, w) or not np.all((m == 0) | (m == 1)):
                raise ContractError("masks must be an (N, H, W) bit grid")
            m = m.astype(np.uint8)
            if self.labels is not None and np.any(m[self.labels == 0]):
                raise ContractError("images labelled normal must have empty masks")
            object.__setattr__(self, "masks", _frozen(m))

    def __len__(self):
        return self.features.shape[0]

    @property
    def grid(self):
        """``(H, W, C)`` shared by every image."""
        return self.features.shape[1:]

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.class_ids))

    @property
    def noise_ratio(self):
        if self.labels is None or len(self) == 0:
            return 0.0
        return float(self.labels.sum()) / len(self)

    def image(self, i):
        return self.features[i]

    def indices_of(self, class_id):
        idx = np.flatnonzero(self.class_ids == class_id)
        if idx.size == 0:
            raise UnknownClassError(f"class {class_id} not present in dataset")
        return idx

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            self.features[indices],
            self.class_ids[indices],
            None if self.labels is None else self.labels[indices],
            None if self.masks is None else self.masks[indices],
        )

    def without_truth(self):
        """Same images and classes, labels and masks dropped."""
        return FeatureDataset(self.features, self.class_ids)

    def equals(self, other):
        """Field-for-field equality, including which optional sections exist."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and same(self.class_ids, other.class_ids)
            and same(self.labels, other.labels)
            and same(self.masks, other.masks)
        )


def concat_datasets(first, second):
    if first.grid != second.grid:
        raise ContractError(f"grid mismatch {first.grid} vs {second.grid}")

    def join(a, b, fill_shape):
        if a is None and b is None:
            return None
        a = np.zeros(fill_shape(len(first)), np.uint8) if a is None else a
        b = np.zeros(fill_shape(len(second)), np.uint8) if b is None else b
        return np.concatenate([a, b])

    h, w, _ = first.grid
    return FeatureDataset(
        np.concatenate([first.features, second.features]),
        np.concatenate([first.class_ids, second.class_ids]),
        join(first.labels, second.labels, lambda n: (n,)),
        join(first.masks, second.masks, lambda n: (n, h, w)),
    )


# --------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a desk-scale stand-in of backbone patch features.

    Each class owns ``cluster_count`` Gaussian components with unit-normal
    centres; every normal patch picks a component uniformly and adds isotropic
    noise of std ``cluster_spread``. An anomalous image replaces one rectangle
    of patches with draws around ``centre + anomaly_shift * u`` where ``u`` is
    a per-class random unit direction. With ``anomaly_direction_jitter > 0``
    each anomalous image tilts that direction by its own Gaussian offset, so
    defects vary from image to image. ``style_spread > 0`` adds one offset per
    image, shared by all its patches and drawn from a ``style_dims``-dimensional
    subspace, the way lighting or pose shifts a whole image.
    """

    classes: int = 1
    images_per_class: int = 100
    height: int = 8
    width: int = 8
    channels: int = 8
    cluster_count: int = 2
    cluster_spread: float = 0.1
    anomaly_shift: float = 1.0
    anomaly_region: tuple = (2, 4)
    seed: int = 0
    anomaly_spread: float | None = None
    anomaly_direction_jitter: float = 0.0
    style_spread: float = 0.0
    style_dims: int = 2

    def validate(self):
        for name in ("classes", "images_per_class", "height", "width", "channels", "cluster_count",
                     "style_dims"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.cluster_spread >= 0:
            raise ConfigurationError("cluster_spread must be >= 0")
        # zero shift is a permitted degenerate case: anomalies look normal
        if not self.anomaly_shift >= 0:
            raise ConfigurationError("anomaly_shift must be >= 0")
        lo, hi = self.anomaly_region
        if not 1 <= lo <= hi <= min(self.height, self.width):
            raise ConfigurationError(
                f"anomaly_region {self.anomaly_region} must satisfy 1 <= min <= max <= min(H, W)"
            )
        if self.anomaly_spread is not None and not self.anomaly_spread >= 0:
            raise ConfigurationError("anomaly_spread must be >= 0")
        if not self.anomaly_direction_jitter >= 0:
            raise ConfigurationError("anomaly_direction_jitter must be >= 0")
        if not self.style_spread >= 0:
            raise ConfigurationError("style_spread must be >= 0")

    def to_dict(self):
        d = dict(self.__dict__)
        d["anomaly_region"] = list(self.anomaly_region)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "anomaly_region" in d:
            d["anomaly_region"] = tuple(d["anomaly_region"])
        return cls(**d)


def _f32_exact(a):
    # keep values representable in the float32 file payload
    return a.astype(np.float32).astype(np.float64)


def generate_synthetic_dataset(spec):
    """Draw a clean dataset and a pool of anomalous images from ``spec``.

    Returns ``(clean, anomaly_pool)``; both carry labels and masks. Each
    holds ``images_per_class`` images per class. The output is a pure
    function of ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W, C = spec.height, spec.width, spec.channels
    n = spec.images_per_class
    a_spread = spec.cluster_spread if spec.anomaly_spread is None else spec.anomaly_spread
    lo, hi = spec.anomaly_region

    clean_f, pool_f, pool_m, cls = [], [], [], []
    for c in range(spec.classes):
        centres = rng.standard_normal((spec.cluster_count, C))
        u = rng.standard_normal(C)
        u /= np.linalg.norm(u)

        def draw(count):
            comp = rng.integers(spec.cluster_count, size=(count, H, W))
            return centres[comp] + spec.cluster_spread * rng.standard_normal((count, H, W, C))

        # separate streams so zero jitter and zero style leave the main draws untouched
        tilt = np.random.default_rng([spec.seed, 1, c])
        styler = np.random.default_rng([spec.seed, 2, c])

        basis = styler.standard_normal((spec.style_dims, C)) / np.sqrt(C)

        def styled(f):
            if spec.style_spread > 0:
                f += (spec.style_spread * styler.standard_normal((len(f), spec.style_dims)) @ basis)[:, None, None]
            return f

        clean_f.append(styled(draw(n)))
        anom = draw(n)
        masks = np.zeros((n, H, W), np.uint8)
        for i in range(n):
            ui = u
            if spec.anomaly_direction_jitter > 0:
                ui = u + spec.anomaly_direction_jitter * tilt.standard_normal(C)
                ui /= np.linalg.norm(ui)
            rh, rw = rng.integers(lo, hi + 1, size=2)
            top = rng.integers(0, H - rh + 1)
            left = rng.integers(0, W - rw + 1)
            comp = rng.integers(spec.cluster_count, size=(rh, rw))
            anom[i, top:top + rh, left:left + rw] = (
                centres[comp] + spec.anomaly_shift * ui
                + a_spread * rng.standard_normal((rh, rw, C))
            )
            masks[i, top:top + rh, left:left + rw] = 1
        pool_f.append(styled(anom))
        pool_m.append(masks)
        cls.append(np.full(n, c))

    cls = np.concatenate(cls)
    total = len(cls)
    clean = FeatureDataset(
        _f32_exact(np.concatenate(clean_f)), cls,
        np.zeros(total, np.uint8), np.zeros((total, H, W), np.uint8),
    )
    pool = FeatureDataset(
        _f32_exact(np.concatenate(pool_f)), cls,
        np.ones(total, np.uint8), np.concatenate(pool_m),
    )
    return clean, pool


def contamination_counts(clean, ratio):
    """Per-class number of anomalies bringing each class to ``ratio``.

    Solves ``a / (n + a) = ratio`` and rounds to the nearest integer.
    """
    if not 0 <= ratio < 1:
        raise ContractError(f"ratio must lie in [0, 1), got {ratio}")
    counts = {}
    for c in clean.classes:
        n = int(np.sum(clean.class_ids == c))
        counts[c] = int(math.floor(ratio * n / (1 - ratio) + 0.5))
    return counts


def contamination_indices(clean, anomaly_pool, ratio, seed):
    """Pool indices drawn per class, stratified, without replacement."""
    rng = np.random.default_rng(seed)
    chosen = {}
    for c, need in contamination_counts(clean, ratio).items():
        avail = np.flatnonzero(anomaly_pool.class_ids == c)
        if need > avail.size:
            raise InsufficientPoolError(c, need, avail.size)
        chosen[c] = np.sort(rng.choice(avail, size=need, replace=False)) if need else avail[:0]
    return chosen


def inject_contamination(clean, anomaly_pool, ratio, seed):
    """Append pool anomalies to ``clean`` until each class reaches ``ratio``.

    Clean images keep their order and come first; the sampled anomalies follow
    in class order. Labels are set to 0 for clean and 1 for injected images.
    """
    chosen = contamination_indices(clean, anomaly_pool, ratio, seed)
    idx = np.concatenate([chosen[c] for c in sorted(chosen)]).astype(np.int64)
    h, w, _ = clean.grid
    base = FeatureDataset(
        clean.features, clean.class_ids,
        np.zeros(len(clean), np.uint8),
        clean.masks if clean.masks is not None else np.zeros((len(clean), h, w), np.uint8),
    )
    picked = anomaly_pool.subset(idx)
    picked = FeatureDataset(
        picked.features, picked.class_ids, np.ones(len(picked), np.uint8),
        picked.masks if picked.masks is not None else np.zeros((len(picked), h, w), np.uint8),
    )
    return concat_datasets(base, picked)


def pool_patch_features(dataset, class_id):
    """Flatten every patch of one class into a ``(n*H*W, C)`` array.

    Returns ``(vectors, refs)`` where ``refs[j] = (image_index, h, w)`` in
    (image, h, w) lexicographic order.
    """
    idx = dataset.indices_of(class_id)
    H, W, C = dataset.grid
    vectors = dataset.features[idx].reshape(-1, C)
    ii, hh, ww = np.meshgrid(idx, np.arange(H), np.arange(W), indexing="ij")
    refs = np.stack([ii.ravel(), hh.ravel(), ww.ravel()], axis=1)
    return vectors, refs


# --------------------------------------------------------------------------
# Binary feature file


def write_feature_file(dataset, path):
    n = len(dataset)
    H, W, C = dataset.grid
    flags = (_FLAG_LABELS if dataset.labels is not None else 0) | (
        _FLAG_MASKS if dataset.masks is not None else 0
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, n, H, W, C))
        fh.write(dataset.class_ids.astype("<u4").tobytes())
        fh.write(dataset.features.astype("<f4").tobytes())
        if dataset.labels is not None:
            fh.write(dataset.labels.astype(np.uint8).tobytes())
        if dataset.masks is not None:
            fh.write(dataset.masks.astype(np.uint8).tobytes())


def read_feature_file(path):
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, flags, n, H, W, C = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if min(H, W, C) < 1:
        raise DimensionOverflowError(f"{path}: zero grid dimension ({H}, {W}, {C})")
    values = n * H * W * C
    if values > _MAX_VALUES:
        raise DimensionOverflowError(f"{path}: {n}x{H}x{W}x{C} exceeds the size limit")
    has_labels = bool(flags & _FLAG_LABELS)
    has_masks = bool(flags & _FLAG_MASKS)
    expected = _HEADER.size + 4 * n + 4 * values + (n if has_labels else 0) + (
        n * H * W if has_masks else 0
    )
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, payload needs {expected}")
    if len(data) > expected:
        raise FeatureFileError(f"{path}: {len(data) - expected} trailing bytes")

    off = _HEADER.size
    cls = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    off += 4 * n
    feats = np.frombuffer(data, "<f4", values, off).astype(np.float64).reshape(n, H, W, C)
    off += 4 * values
    labels = masks = None
    if has_labels:
        labels = np.frombuffer(data, np.uint8, n, off).copy()
        off += n
    if has_masks:
        masks = np.frombuffer(data, np.uint8, n * H * W, off).reshape(n, H, W).copy()
    return FeatureDataset(feats, cls, labels, masks)


# Text form, used by tests and for eyeballing tiny datasets.


def dataset_to_text(dataset):
    return json.dumps({
        "grid": list(dataset.grid),
        "features": dataset.features.tolist(),
        "class_ids": dataset.class_ids.tolist(),
        "labels": None if dataset.labels is None else dataset.labels.tolist(),
        "masks": None if dataset.masks is None else dataset.masks.tolist(),
    })


def dataset_from_text(text):
    d = json.loads(text)
    feats = np.asarray(d["features"], dtype=np.float64).reshape(-1, *d["grid"])
    return FeatureDataset(feats, np.asarray(d["class_ids"], dtype=np.int64), d["labels"],
                          None if d["masks"] is None else np.asarray(d["masks"]))
