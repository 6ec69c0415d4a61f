"""Input-agnostic saliency mapper.

Accumulates the expected input gradient of the concept's cross-entropy over
mini-batches of nudged samples, smooths it with Adam-style moments, picks the
better of the two signed directions by probing the classifier, and keeps the
map inside an l2 ball of radius ``eta``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import micronet, tensorio
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

F32 = np.float32


@dataclass
class SaliencyMap:
    nu: np.ndarray
    concept: int
    eta: float
    k: int = 0

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=F32)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.nu))

    @classmethod
    def zeros(cls, shape, concept: int, eta: float) -> "SaliencyMap":
        return cls(np.zeros(shape, F32), concept, eta)


@dataclass
class MapperConfig:
    b: int = 128
    K: int = 650
    eta: float = 30.0
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    eps: float = 1e-12
    branch_score: str = "probability"   # or "prediction": fraction predicted as the concept

    def validate(self) -> "MapperConfig":
        if self.b < 1:
            raise ConfigError("mapper b must be >= 1")
        if self.K < 0:
            raise ConfigError("mapper K must be >= 0")
        if not self.eta > 0:
            raise ConfigError("mapper eta must be > 0")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ConfigError("need 0 < beta1 < beta2 < 1")
        if self.branch_score not in ("probability", "prediction"):
            raise ConfigError(f"unknown branch_score {self.branch_score!r}")
        return self


class BatchSampler:
    """Epoch-style mini-batches without replacement, reshuffled when exhausted.

    Falls back to sampling with replacement when the pool is smaller than b.
    """

    def __init__(self, n: int, b: int, rng: np.random.Generator):
        if n < 1:
            raise InputError("sample set is empty")
        self.n, self.b, self.rng = n, b, rng
        self.with_replacement = n < b
        if self.with_replacement:
            warnings.warn(f"sample set has {n} images < batch size {b}; sampling with replacement", stacklevel=3)
        self.order = np.empty(0, np.int64)

    def next(self) -> np.ndarray:
        if self.with_replacement:
            return self.rng.integers(0, self.n, size=self.b)
        if len(self.order) < self.b:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[:self.b], self.order[self.b:]
        return idx


@dataclass
class MapperState:
    mu: np.ndarray
    sigma: np.ndarray
    k: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12

    @classmethod
    def fresh(cls, shape, cfg: MapperConfig) -> "MapperState":
        return cls(np.zeros(shape, F32), np.zeros(shape, F32), 0, cfg.beta1, cfg.beta2, cfg.eps)


def nudge_batch(batch, nu) -> np.ndarray:
    return np.clip(np.asarray(batch, F32) - nu, 0.0, 1.0)


def expected_grad(model: micronet.Classifier, nudged, label: int) -> np.ndarray:
    """Mean over the batch of per-sample input gradients of J_CE(., label)."""
    nudged = np.asarray(nudged, F32)
    if len(nudged) == 0:
        raise InputError("empty batch")
    return micronet.input_grad(model, nudged, label).mean(axis=0, dtype=F32)


def moment_direction(state: MapperState, x) -> np.ndarray:
    """Advance the moment recurrences with gradient ``x`` and return the bias-corrected direction."""
    state.k += 1
    k = state.k
    state.mu = state.beta1 * state.mu + (1.0 - state.beta1) * x
    state.sigma = state.beta2 * state.sigma + (1.0 - state.beta2) * (x * x)
    num = state.mu * math.sqrt(1.0 - state.beta2 ** k)
    den = np.sqrt(state.sigma) * (1.0 - state.beta1 ** k) + state.eps
    return (num / den).astype(state.mu.dtype, copy=False)


def concept_score(model, images, label: int, mode: str = "probability") -> float:
    probs = micronet.softmax(micronet.forward(model, images))
    if mode == "prediction":
        return float(np.mean(probs.argmax(axis=1) == label))
    return float(np.mean(probs[:, label]))


@dataclass
class BranchChoice:
    update: np.ndarray
    sign: int
    score_plus: float
    score_minus: float


def branch_select(model, batch, nu_prev, v, label: int, mode: str = "probability") -> BranchChoice:
    """Probe nu_prev +/- unit(v) and return +v when the '+' probe scores at least as well."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return BranchChoice(np.asarray(v, F32), 1, math.nan, math.nan)
    unit = v / F32(norm)
    batch = np.asarray(batch, F32)
    s_plus = concept_score(model, nudge_batch(batch, nu_prev + unit), label, mode)
    s_minus = concept_score(model, nudge_batch(batch, nu_prev - unit), label, mode)
    if s_plus >= s_minus:
        return BranchChoice(np.asarray(v, F32), 1, s_plus, s_minus)
    return BranchChoice(-np.asarray(v, F32), -1, s_plus, s_minus)


def project(nu, eta: float) -> np.ndarray:
    """Rescale onto the l2 ball of radius eta; maps already inside are returned unchanged."""
    if not eta > 0:
        raise ConfigError("eta must be > 0")
    nu = np.asarray(nu, F32)
    norm = float(np.linalg.norm(nu))
    if norm <= eta:
        return nu
    out = nu * F32(eta / norm)
    # guard against the f32 rescale landing a hair outside the ball
    while float(np.linalg.norm(out)) > eta:
        out = out * F32(1.0 - 1e-7)
    return out


def run_mapper(model: micronet.Classifier, dataset, label: int, config: MapperConfig,
               seed_map: SaliencyMap | None = None,
               on_iteration: Callable[[int, np.ndarray, BranchChoice], None] | None = None) -> SaliencyMap:
    """Run K iterations of nudge / expected gradient / moments / branch / accumulate / project."""
    config.validate()
    images = np.asarray(dataset.images, F32)
    shape = model.input_shape
    if tuple(images.shape[1:]) != shape:
        raise ConfigError(f"dataset images {images.shape[1:]} do not match model input {shape}")
    if not 0 <= label < model.num_classes:
        raise InputError(f"concept label {label} outside [0, {model.num_classes})")
    if seed_map is None:
        seed_map = SaliencyMap.zeros(shape, label, config.eta)
    nu = np.array(seed_map.nu, F32)
    if nu.shape != shape:
        raise ConfigError(f"seed map shape {nu.shape} != model input {shape}")
    if np.linalg.norm(nu) > config.eta + 1e-5:
        raise InputError("seed map lies outside the eta ball")
    rng = np.random.default_rng(config.seed)
    sampler = BatchSampler(len(images), config.b, rng)
    state = MapperState.fresh(shape, config)
    for _ in range(config.K):
        batch = images[sampler.next()]
        x = expected_grad(model, nudge_batch(batch, nu), label)
        v = moment_direction(state, x)
        choice = branch_select(model, batch, nu, v, label, config.branch_score)
        nu = project(nu + choice.update, config.eta)
        if on_iteration is not None:
            on_iteration(state.k, nu, choice)
    return SaliencyMap(nu, label, config.eta, seed_map.k + config.K)


def nudge_success(model, images, smap: SaliencyMap, batch_size: int = 256) -> float:
    """Fraction of clip(I - nu) predicted as the map's concept."""
    images = np.asarray(images, F32)
    hits = 0
    for i in range(0, len(images), batch_size):
        logits = micronet.forward(model, nudge_batch(images[i:i + batch_size], smap.nu))
        hits += int(np.sum(logits.argmax(axis=1) == smap.concept))
    return hits / max(len(images), 1)


# checkpoint: one record, ints (concept, k), tensors (nu, [eta])
MAP_TAG = 100


def save_map(smap: SaliencyMap, path) -> None:
    rec = tensorio.Record(MAP_TAG, [smap.concept, smap.k], [smap.nu, np.array([smap.eta], F32)])
    tensorio.write(path, tensorio.KIND_MAP, [rec])


def load_map(path) -> SaliencyMap:
    kind, records = tensorio.read(path)
    if kind != tensorio.KIND_MAP or len(records) != 1 or records[0].tag != MAP_TAG:
        raise InputError(f"{path} is not a map checkpoint")
    rec = records[0]
    concept, k = rec.ints
    nu, eta = rec.tensors
    return SaliencyMap(nu, concept, float(eta[0]), k)
