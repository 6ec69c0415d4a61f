"""Activation-weighted map refinement.

Minimises, over the map nu,

    mean_i J_CE(clip(I_i - nu), label) + lam * mean(|nu * (1 - xi)|)

with Adam, where xi is the last conv layer's channel-mean activation for nu,
upsampled to image size and min-max normalised. Regions the network does not
respond to carry a high penalty and are pulled toward zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import micronet
from .errors import ConfigError
from .mapper import BatchSampler, SaliencyMap, nudge_batch, project

F32 = np.float32


@dataclass
class RefineConfig:
    lam: float = 50.0
    iterations: int = 150
    lr: float = 0.05
    eta: float = 30.0
    b: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "RefineConfig":
        if self.lam < 0:
            raise ConfigError("refine lam must be >= 0")
        if self.iterations < 0:
            raise ConfigError("refine iterations must be >= 0")
        if not self.lr > 0:
            raise ConfigError("refine lr must be > 0")
        if not self.eta > 0:
            raise ConfigError("refine eta must be > 0")
        if self.b < 1:
            raise ConfigError("refine b must be >= 1")
        return self


@dataclass
class XiMatrix:
    xi: np.ndarray
    source_layer: int


def bilinear_resize(plane, out_hw) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array with edge clamping."""
    plane = np.asarray(plane, np.float64)
    h, w = plane.shape
    oh, ow = out_hw

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
    bot = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def compute_xi(model: micronet.Classifier, nu) -> XiMatrix:
    nu = nu.nu if isinstance(nu, SaliencyMap) else nu
    layer = micronet.last_conv_index(model)
    act = micronet.conv_base_activations(model, nu)
    h, w, c = model.input_shape
    plane = bilinear_resize(act.mean(axis=-1), (h, w))
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        xi = np.zeros((h, w), F32)
    else:
        xi = ((plane - lo) / (hi - lo)).astype(F32)
    return XiMatrix(np.repeat(xi[:, :, None], c, axis=2), layer)


def objective(model, batch, nu, xi, label: int, lam: float) -> tuple[float, np.ndarray]:
    """Value and nu-gradient of the refinement objective on one batch, with xi held fixed."""
    batch = np.asarray(batch, F32)
    shifted = batch - nu
    nudged = np.clip(shifted, 0.0, 1.0)
    losses, dx, _ = micronet.backprop(model, nudged, label, want_params=False)
    inside = (shifted > 0.0) & (shifted < 1.0)
    g_ce = -(dx * inside).mean(axis=0, dtype=F32)
    weight = 1.0 - xi
    n = F32(nu.size)
    penalty = float(np.abs(nu * weight).sum() / n)
    g_pen = F32(lam) * np.sign(nu) * weight / n
    return float(losses.mean()) + lam * penalty, (g_ce + g_pen).astype(F32)


def refine(model: micronet.Classifier, dataset, smap: SaliencyMap, cfg: RefineConfig,
           on_iteration=None) -> SaliencyMap:
    """Adam on nu for cfg.iterations steps (xi recomputed every step), then clip to [-1, 1] and project."""
    cfg.validate()
    images = np.asarray(dataset.images, F32)
    nu = np.array(smap.nu, F32)
    label = smap.concept
    state = micronet.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.eps)
    params = {"nu": nu}
    if cfg.iterations:
        sampler = BatchSampler(len(images), cfg.b, np.random.default_rng(cfg.seed))
    for it in range(cfg.iterations):
        xi = compute_xi(model, params["nu"]).xi
        value, grad = objective(model, images[sampler.next()], params["nu"], xi, label, cfg.lam)
        micronet.adam_step(state, params, {"nu": grad})
        if on_iteration is not None:
            on_iteration(it, params["nu"], xi, value)
    nu = project(np.clip(params["nu"], -1.0, 1.0), cfg.eta)
    return SaliencyMap(nu, label, cfg.eta, smap.k)
