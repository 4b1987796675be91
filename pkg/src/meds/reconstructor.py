"""Per-patch bottleneck student and its reconstruction score.

The student maps each C-dim patch feature through ``C -> h -> C`` with a tanh
between the layers; its reconstruction score is the Euclidean distance
between a patch and its reconstruction. Gradients are derived by hand and
checked against central differences in the test-suite.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigurationError, ContractError, TruncatedFileError, VersionMismatchError

_ACTIVATIONS = ("tanh", "linear")


def hidden_width(channels):
    return max(2, math.ceil(channels / 4))


@dataclass
class ReconstructorParams:
    w1: np.ndarray  # (C, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        c, h = np.shape(self.w1)
        if np.shape(self.b1) != (h,) or np.shape(self.w2) != (h, c) or np.shape(self.b2) != (c,):
            raise ContractError("inconsistent parameter shapes")

    @property
    def channels(self):
        return self.w1.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[1]

    def flat(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, vec):
        c, h = self.channels, self.hidden
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * c * h + h + c,):
            raise ContractError("flat parameter vector has the wrong length")
        o1, o2, o3 = c * h, c * h + h, 2 * c * h + h
        return replace(self, w1=vec[:o1].reshape(c, h).copy(), b1=vec[o1:o2].copy(),
                       w2=vec[o2:o3].reshape(h, c).copy(), b2=vec[o3:].copy())

    def copy(self):
        return self.with_flat(self.flat())

    def same_as(self, other):
        return self.activation == other.activation and np.array_equal(self.flat(), other.flat())


def init_reconstructor(channels, seed, hidden=None, activation="tanh"):
    """Random weights with variance 1/fan_in and zero biases."""
    if channels < 1:
        raise ContractError("channels must be >= 1")
    h = hidden_width(channels) if hidden is None else int(hidden)
    rng = np.random.default_rng(seed)
    return ReconstructorParams(
        rng.standard_normal((channels, h)) / math.sqrt(channels),
        np.zeros(h),
        rng.standard_normal((h, channels)) / math.sqrt(h),
        np.zeros(channels),
        activation,
    )


def _forward(params, x):
    a = x @ params.w1 + params.b1
    z = np.tanh(a) if params.activation == "tanh" else a
    y = z @ params.w2 + params.b2
    return a, z, y


def reconstruct(params, x):
    """Student output for patch features ``x`` of shape (..., C)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.channels:
        raise ContractError(f"feature dim {x.shape[-1]} != student dim {params.channels}")
    return _forward(params, x.reshape(-1, x.shape[-1]))[2].reshape(x.shape)


def reconstruction_scores(params, images):
    """Score maps for a stack of images, shape (n, H, W, C) -> (n, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-1] != params.channels:
        raise ContractError(f"feature dim {images.shape[-1]} != student dim {params.channels}")
    x = images.reshape(-1, images.shape[-1])
    r = _forward(params, x)[2] - x
    return np.sqrt(np.sum(r * r, axis=1)).reshape(images.shape[:-1])


def reconstruction_score(params, image):
    """Per-patch distance between a feature map and its reconstruction."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ContractError("expected an (H, W, C) feature map")
    return reconstruction_scores(params, image[None])[0]


def _scores_and_backprop(params, images):
    x = images.reshape(-1, images.shape[-1])
    a, z, y = _forward(params, x)
    r = y - x
    s = np.sqrt(np.sum(r * r, axis=1))

    def backprop(ds):
        # ds: dL/ds per patch; d s / d y = r / s, taken as 0 where s == 0
        safe = np.where(s > 0, s, 1.0)
        dy = np.where(s[:, None] > 0, r / safe[:, None], 0.0) * ds[:, None]
        gw2 = z.T @ dy
        gb2 = dy.sum(axis=0)
        dz = dy @ params.w2.T
        da = dz * (1.0 - z * z) if params.activation == "tanh" else dz
        gw1 = x.T @ da
        gb1 = da.sum(axis=0)
        return ReconstructorParams(gw1, gb1, gw2, gb2, params.activation)

    return s.reshape(images.shape[:-1]), backprop


def distill_loss_and_grad(params, images, targets):
    """Batch mean of the Frobenius norm between target and student score maps."""
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != images.shape[:-1]:
        raise ContractError(f"targets {targets.shape} not aligned with images {images.shape[:-1]}")
    s, backprop = _scores_and_backprop(params, images)
    b = images.shape[0]
    diff = (s - targets).reshape(b, -1)
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    ds = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0) / b
    return float(norms.mean()), backprop(ds.ravel())


def finetune_loss_and_grad(params, images):
    """Mean reconstruction score over the batch and all patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ContractError("empty batch")
    s, backprop = _scores_and_backprop(params, images)
    return float(s.mean()), backprop(np.full(s.size, 1.0 / s.size))


# --------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("moment coefficients must lie in [0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        n = params.flat().size
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params, grad, state, config):
    """One bias-corrected adaptive-moment update; returns ``(params, state)``."""
    g = grad.flat()
    t = state.step + 1
    m = config.beta1 * state.m + (1 - config.beta1) * g
    v = config.beta2 * state.v + (1 - config.beta2) * g * g
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    theta = params.flat() - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return params.with_flat(theta), AdamState(m, v, t)


class EpochSampler:
    """Yields minibatches from shuffled passes over an index set, without replacement.

    Starts exhausted; the first pass is shuffled on the first ``next_batch``
    or ``reset``, so callers may swap the index set before any draw.
    """

    def __init__(self, indices, batch_size, rng):
        self.batch_size = batch_size
        self.rng = rng
        self.indices = np.sort(np.asarray(indices, dtype=np.int64))
        self.order = self.indices[:0]
        self.pos = 0

    def reset(self, indices):
        self.indices = np.sort(np.asarray(indices, dtype=np.int64))
        self.order = self.rng.permutation(self.indices)
        self.pos = 0

    @property
    def exhausted(self):
        return self.pos >= self.order.size

    def next_batch(self):
        if self.exhausted:
            self.reset(self.indices)
        batch = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch


def train_distill(dataset, score_cache, config, init=None, history=None):
    """Fit the student's score maps to the cached ensemble scores.

    ``score_cache`` is anything with a ``shape`` that yields ``(b, H, W)``
    targets when indexed by an index array. Returns the final parameters,
    which serve as the frozen distilled snapshot. Per-iteration losses are
    appended to ``history`` if given.
    """
    config.validate()
    if tuple(score_cache.shape) != (len(dataset),) + dataset.grid[:2]:
        raise ContractError("score cache does not cover the dataset")
    params = init_reconstructor(dataset.grid[2], config.seed) if init is None else init.copy()
    state = AdamState.zeros_like(params)
    sampler = EpochSampler(np.arange(len(dataset)), config.batch_size,
                           np.random.default_rng([config.seed, 1]))
    for _ in range(config.iterations):
        batch = sampler.next_batch()
        loss, grad = distill_loss_and_grad(params, dataset.features[batch], score_cache[batch])
        params, state = optimizer_step(params, grad, state, config)
        if history is not None:
            history.append(loss)
    return params


def plain_batch_rng(config):
    """Batch-order generator shared by plain and selective fine-tuning."""
    return np.random.default_rng([config.seed, 2])


def train_plain(dataset, config, init=None, history=None):
    """Minimise the mean reconstruction score over all images, no selection."""
    config.validate()
    params = init_reconstructor(dataset.grid[2], config.seed) if init is None else init.copy()
    state = AdamState.zeros_like(params)
    sampler = EpochSampler(np.arange(len(dataset)), config.batch_size, plain_batch_rng(config))
    for _ in range(config.iterations):
        loss, grad = finetune_loss_and_grad(params, dataset.features[sampler.next_batch()])
        params, state = optimizer_step(params, grad, state, config)
        if history is not None:
            history.append(loss)
    return params


# --------------------------------------------------------------------------
# Checkpoint file: "MEDP" | version u16 | C u32 | h u32 | activation u32 | f64 params
# Parameter order: w1 (C x h, row-major), b1, w2 (h x C, row-major), b2.

CKPT_MAGIC = b"MEDP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIII")


def write_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.channels, params.hidden,
                                   _ACTIVATIONS.index(params.activation)))
        fh.write(params.flat().astype("<f8").tobytes())


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    if len(data) < _CKPT_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, c, h, act = _CKPT_HEADER.unpack_from(data)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}")
    count = 2 * c * h + h + c
    if len(data) != _CKPT_HEADER.size + 8 * count or act >= len(_ACTIVATIONS):
        raise TruncatedFileError(f"{path}: payload does not match the header")
    template = ReconstructorParams(np.zeros((c, h)), np.zeros(h), np.zeros((h, c)), np.zeros(c),
                                   _ACTIVATIONS[act])
    return template.with_flat(np.frombuffer(data, "<f8", count, _CKPT_HEADER.size))
