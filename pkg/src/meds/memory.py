"""Bootstrapped memory ensembles and nearest-neighbour score maps."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ContractError,
    TruncatedFileError,
    UnknownClassError,
    VersionMismatchError,
)

# queries per block in the brute-force search; bounds the distance matrix size
_BLOCK = 2048


@dataclass(frozen=True, eq=False)
class MemoryBank:
    vectors: np.ndarray  # (M, C)
    source_class: int = 0
    image_indices: np.ndarray | None = None  # dataset indices the bank was cut from

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0:
            raise ContractError("a memory bank needs at least one C-dim vector")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class MemoryEnsemble:
    banks: dict  # class id -> list of MemoryBank
    ensemble_size: int
    subsample_ratio: float
    seed: int

    def banks_for(self, class_id):
        try:
            return self.banks[int(class_id)]
        except KeyError:
            raise UnknownClassError(f"no memory banks for class {class_id}") from None

    def summary(self):
        return {
            "ensemble_size": self.ensemble_size,
            "subsample_ratio": self.subsample_ratio,
            "seed": self.seed,
            "classes": sorted(self.banks),
            "bank_sizes": {c: len(bs[0]) for c, bs in sorted(self.banks.items())},
        }


def nn_distances(queries, vectors):
    """Euclidean distance from each row of ``queries`` to its nearest row of ``vectors``.

    The candidate is found with the ``|q|^2 + |z|^2 - 2 q.z`` expansion and the
    returned distance is recomputed directly from the winning vector, so it
    carries no cancellation error.
    """
    queries = np.asarray(queries, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None]
    if queries.shape[1] != vectors.shape[1]:
        raise ContractError(f"query dim {queries.shape[1]} != bank dim {vectors.shape[1]}")
    zsq = np.sum(vectors * vectors, axis=1)
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], _BLOCK):
        q = queries[start:start + _BLOCK]
        d2 = zsq[None, :] - 2.0 * (q @ vectors.T)
        nearest = np.argmin(d2, axis=1)
        diff = q - vectors[nearest]
        out[start:start + _BLOCK] = np.sqrt(np.sum(diff * diff, axis=1))
    return out


def nn_distance(query, bank):
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    vectors = bank.vectors if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if query.shape[0] != vectors.shape[1]:
        raise ContractError(f"query dim {query.shape[0]} != bank dim {vectors.shape[1]}")
    return float(nn_distances(query[None], vectors)[0])


def images_per_bank(n_images, ratio):
    """Number of whole images a bank draws: ceil(ratio * n_images), at least 1."""
    if not 0 < ratio <= 1:
        raise ContractError(f"subsample ratio must lie in (0, 1], got {ratio}")
    # the epsilon keeps 0.3 * 10 from rounding up to 4
    return max(1, min(n_images, math.ceil(ratio * n_images - 1e-9)))


def subsample_bank(images, ratio, rng, source_class=0, image_ids=None):
    """Cut a bank from whole images drawn uniformly without replacement.

    Parameters
    ----------
    images : ndarray, shape (n, H, W, C)
        All images of one class.
    ratio : float in (0, 1]
    rng : numpy Generator
    image_ids : array of n ints, optional
        Dataset indices of ``images``, recorded on the bank.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise ContractError("cannot subsample an empty pool")
    k = images_per_bank(n, ratio)
    pick = np.sort(rng.choice(n, size=k, replace=False))
    ids = pick if image_ids is None else np.asarray(image_ids)[pick]
    return MemoryBank(images[pick].reshape(-1, images.shape[-1]), int(source_class), ids)


def build_ensemble(dataset, ensemble_size, ratio, seed):
    """``ensemble_size`` independent banks per class; classes never share features.

    Each class draws from its own generator seeded by ``(seed, class_id)`` so
    adding or removing a class leaves the other classes' banks untouched.
    """
    if ensemble_size < 1:
        raise ContractError("ensemble size must be >= 1")
    images_per_bank(1, ratio)  # validates the ratio
    banks = {}
    for c in dataset.classes:
        idx = dataset.indices_of(c)
        rng = np.random.default_rng([seed, c])
        imgs = dataset.features[idx]
        banks[c] = [subsample_bank(imgs, ratio, rng, c, idx) for _ in range(ensemble_size)]
    return MemoryEnsemble(banks, int(ensemble_size), float(ratio), int(seed))


def score_map_single(image, bank):
    image = np.asarray(image, dtype=np.float64)
    H, W, C = image.shape
    return nn_distances(image.reshape(-1, C), bank.vectors).reshape(H, W)


def _ensemble_scores(images, banks):
    n, H, W, C = images.shape
    queries = images.reshape(-1, C)
    total = np.zeros(queries.shape[0])
    for bank in banks:
        total += nn_distances(queries, bank.vectors)
    return (total / len(banks)).reshape(n, H, W)


def ensemble_score(image, class_id, ensemble):
    """Mean over the class's banks of the per-patch nearest-neighbour distance."""
    image = np.asarray(image, dtype=np.float64)
    return _ensemble_scores(image[None], ensemble.banks_for(class_id))[0]


def cache_ensemble_scores(dataset, ensemble):
    """Score every image once; returns a read-only ``(N, H, W)`` array."""
    H, W, _ = dataset.grid
    cache = np.zeros((len(dataset), H, W))
    for c in dataset.classes:
        idx = dataset.indices_of(c)
        cache[idx] = _ensemble_scores(dataset.features[idx], ensemble.banks_for(c))
    cache.setflags(write=False)
    return cache


# --------------------------------------------------------------------------
# Score-cache file: "MEDC" | version u16 | N u64 | H u32 | W u32 | f32 scores

CACHE_MAGIC = b"MEDC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHQII")


def write_score_cache(scores, path):
    scores = np.asarray(scores)
    n, H, W = scores.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n, H, W))
        fh.write(scores.astype("<f4").tobytes())


def read_score_cache(path):
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise BadMagicError(f"{path}: not a score cache")
    if len(data) < _CACHE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, n, H, W = _CACHE_HEADER.unpack_from(data)
    if version != CACHE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}")
    need = _CACHE_HEADER.size + 4 * n * H * W
    if len(data) != need:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, expected {need}")
    return np.frombuffer(data, "<f4", n * H * W, _CACHE_HEADER.size).astype(np.float64).reshape(n, H, W)
