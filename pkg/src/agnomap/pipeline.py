"""Alternate the mapper and the refiner, then render and store the result."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import micronet, pnm
from .errors import ConfigError, InputError
from .mapper import MapperConfig, SaliencyMap, nudge_success, run_mapper, save_map
from .refiner import RefineConfig, compute_xi, refine

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    mapper: MapperConfig = field(default_factory=MapperConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    cycles: int = 2

    @classmethod
    def full(cls) -> "PipelineConfig":
        return cls(MapperConfig(b=128, K=650, eta=30.0), RefineConfig(lam=50.0, iterations=150, eta=30.0, b=128), 2)

    @classmethod
    def desk(cls) -> "PipelineConfig":
        # eta = 30 * sqrt(32*32*3 / (224*224*3)) ~= 4.29, rounded up to 4.5
        return cls(MapperConfig(b=32, K=150, eta=4.5), RefineConfig(lam=50.0, iterations=60, eta=4.5, b=32), 2)

    def validate(self) -> "PipelineConfig":
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        self.mapper.validate()
        self.refine.validate()
        if self.mapper.eta != self.refine.eta:
            raise ConfigError("mapper and refine must share eta")
        return self


def stage_seed(run_seed: int, cycle: int, stage: int) -> int:
    return int(np.random.SeedSequence([run_seed, cycle, stage]).generate_state(1)[0])


@dataclass
class RoundStats:
    cycle: int
    norm_after_mapper: float
    norm_after_refine: float
    low_xi_before: float   # mean |nu| where xi(nu_in) < 0.1, before refinement
    low_xi_after: float    # same pixels after refinement


@dataclass
class PipelineRun:
    map: SaliencyMap
    rounds: list


def low_xi_magnitude(nu, mask) -> float:
    return float(np.abs(nu)[mask].mean()) if mask.any() else 0.0


def run_pipeline(model, dataset, label: int, cfg: PipelineConfig, run_seed: int) -> PipelineRun:
    cfg.validate()
    if not 0 <= label < model.num_classes:
        raise InputError(f"concept label {label} outside [0, {model.num_classes})")
    smap = SaliencyMap.zeros(model.input_shape, label, cfg.mapper.eta)
    rounds = []
    for cycle in range(cfg.cycles):
        smap = run_mapper(model, dataset, label, replace(cfg.mapper, seed=stage_seed(run_seed, cycle, 0)), smap)
        after_mapper = smap.norm
        low = compute_xi(model, smap.nu).xi < 0.1
        before = low_xi_magnitude(smap.nu, low)
        smap = refine(model, dataset, smap, replace(cfg.refine, seed=stage_seed(run_seed, cycle, 1)))
        rounds.append(RoundStats(cycle, after_mapper, smap.norm, before, low_xi_magnitude(smap.nu, low)))
        log.debug("concept %d cycle %d: %s", label, cycle, rounds[-1])
    return PipelineRun(smap, rounds)


def visualize_concept(model, dataset, label: int, cfg: PipelineConfig, run_seed: int) -> SaliencyMap:
    return run_pipeline(model, dataset, label, cfg, run_seed).map


def display_image(nu) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant map renders as uniform 0.5 grey."""
    nu = np.asarray(nu.nu if isinstance(nu, SaliencyMap) else nu, np.float32)
    lo, hi = float(nu.min()), float(nu.max())
    if hi - lo <= 0:
        return np.full(nu.shape, 0.5, np.float32)
    return ((nu - lo) / (hi - lo)).astype(np.float32)


def export_map(smap, path, reference=None) -> Path:
    """Write the display-normalised map as binary PPM/PGM, optionally beside a reference image."""
    img = display_image(smap)
    if reference is not None:
        reference = np.asarray(reference, np.float32)
        if reference.shape != img.shape:
            raise InputError(f"reference shape {reference.shape} != map shape {img.shape}")
        gap = np.ones((img.shape[0], 2, img.shape[2]), np.float32)
        img = np.concatenate([img, gap, reference], axis=1)
    path = Path(path)
    pnm.write(path, img)
    return path


def write_meta(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def read_meta(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def store_run(out_dir, model_name: str, smap: SaliencyMap, cfg: PipelineConfig, run_seed: int,
              score: float, reference=None) -> dict:
    """maps/<model>/<concept>/<seed>.{ppm,map,meta.txt} under out_dir."""
    d = Path(out_dir) / "maps" / model_name / str(smap.concept)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "image": export_map(smap, d / f"{run_seed}.ppm", reference),
        "map": d / f"{run_seed}.map",
        "meta": d / f"{run_seed}.meta.txt",
    }
    save_map(smap, paths["map"])
    write_meta(paths["meta"], {
        "concept": smap.concept, "cycles": cfg.cycles, "K": cfg.mapper.K, "b": cfg.mapper.b,
        "eta": cfg.mapper.eta, "lambda": cfg.refine.lam, "refine_iterations": cfg.refine.iterations,
        "seed": run_seed, "final_score": f"{score:.6f}",
    })
    return paths
