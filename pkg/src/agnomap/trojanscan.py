"""Backdoor case study: poisoned training and trigger footprints in concept maps.

A visible-trigger backdoor makes the target class's maps concentrate their
energy on the trigger location. The scan measures that concentration as the
ratio of mean |nu| inside a candidate region to the mean outside it, and
compares it with the same statistic on a clean reference model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datagen, micronet
from .errors import InputError, TrainingError
from .mapper import SaliencyMap
from .pipeline import PipelineConfig, store_run, visualize_concept

log = logging.getLogger(__name__)

DENOM_FLOOR = 1e-9
CLEAN = "clean-consistent"
SUSPECT = "backdoor-suspect"


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 3e-3
    seed: int = 0
    batch_size: int = 32
    channels: tuple = (8, 16)
    max_epochs: int = 30
    min_clean_accuracy: float = 0.9
    min_attack_success: float = 0.95


@dataclass
class CompromisedModel:
    model: micronet.Classifier
    clean_accuracy: float
    attack_success: float
    epochs: int


def attack_success_rate(model, images, labels, trig: datagen.TriggerSpec) -> float:
    """Fraction of triggered images from non-target classes predicted as the target."""
    keep = np.asarray(labels) != trig.target_label
    if not keep.any():
        return float("nan")
    triggered = datagen.apply_trigger(np.asarray(images)[keep], trig)
    pred = micronet.predict_proba(model, triggered).argmax(axis=1)
    return float(np.mean(pred == trig.target_label))


def train_compromised(clean_ds, trig: datagen.TriggerSpec, cfg: TrainConfig, test_ds) -> CompromisedModel:
    """Train on the poisoned set, doubling epochs (up to cfg.max_epochs) until both rates are met."""
    if not 0 <= trig.target_label < int(clean_ds.labels.max()) + 1:
        raise InputError(f"target label {trig.target_label} not among dataset labels")
    num_classes = int(max(clean_ds.labels.max(), test_ds.labels.max())) + 1
    poisoned = datagen.poison(clean_ds, trig, cfg.seed)
    epochs = cfg.epochs
    while True:
        init = micronet.build_classifier(clean_ds.image_shape, num_classes, cfg.channels, cfg.seed)
        res = micronet.train(init, poisoned, epochs, cfg.lr, cfg.seed, test=test_ds, batch_size=cfg.batch_size)
        asr = attack_success_rate(res.model, test_ds.images, test_ds.labels, trig)
        log.info("compromised model: epochs %d clean acc %.3f ASR %.3f", epochs, res.test_accuracy, asr)
        if res.test_accuracy >= cfg.min_clean_accuracy and asr >= cfg.min_attack_success:
            return CompromisedModel(res.model, res.test_accuracy, asr, epochs)
        if epochs >= cfg.max_epochs:
            raise TrainingError(
                f"compromised training missed thresholds after {epochs} epochs: "
                f"clean accuracy {res.test_accuracy:.3f} (need {cfg.min_clean_accuracy}), "
                f"attack success {asr:.3f} (need {cfg.min_attack_success})")
        epochs = min(2 * epochs, cfg.max_epochs)


def map_magnitude(nu) -> np.ndarray:
    """Per-pixel |nu| averaged over channels, shape (h, w)."""
    nu = nu.nu if isinstance(nu, SaliencyMap) else np.asarray(nu)
    return np.abs(np.asarray(nu, np.float64)).mean(axis=-1)


def trigger_energy(smap, mask) -> float:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise InputError("mask must be binary")
    inside = mask.astype(bool)
    if not inside.any() or inside.all():
        raise InputError("mask must split the image into two nonempty regions")
    mag = map_magnitude(smap)
    return float(mag[inside].mean() / max(float(mag[~inside].mean()), DENOM_FLOOR))


def localize(smap, percentile: float = 90.0) -> np.ndarray:
    """Largest connected component of pixels at or above the given |nu| percentile."""
    mag = map_magnitude(smap)
    hot = mag >= np.percentile(mag, percentile)
    labels, n = ndimage.label(hot)
    if n == 0:
        return hot.astype(np.float32)
    sizes = ndimage.sum(hot, labels, index=np.arange(1, n + 1))
    return (labels == (int(np.argmax(sizes)) + 1)).astype(np.float32)


@dataclass
class ScanReport:
    trigger_energy_ratio: float
    ratios: list
    threshold: float
    reference_ratio: float | None
    verdict: str
    map_paths: list = field(default_factory=list)
    blind: bool = False
    region: np.ndarray | None = None

    def to_text(self) -> str:
        lines = [
            f"trigger_energy_ratio={self.trigger_energy_ratio:.6f}",
            f"ratios={','.join(f'{r:.6f}' for r in self.ratios)}",
            f"reference_ratio={'' if self.reference_ratio is None else f'{self.reference_ratio:.6f}'}",
            f"threshold={self.threshold}",
            f"verdict={self.verdict}",
            f"blind={int(self.blind)}",
        ]
        if self.region is not None:
            rows, cols = np.nonzero(self.region)
            lines.append(f"region_bbox={rows.min()},{cols.min()},{rows.max()},{cols.max()}")
        lines += [f"map={p}" for p in self.map_paths]
        return "\n".join(lines) + "\n"


def concept_maps(model, dataset, target_class: int, cfg: PipelineConfig, run_seeds) -> list:
    return [visualize_concept(model, dataset, target_class, cfg, s) for s in run_seeds]


def median_ratio(maps, mask) -> tuple[float, list]:
    ratios = [trigger_energy(m, mask) for m in maps]
    return float(np.median(ratios)), ratios


def scan(model, dataset, target_class: int, mask, cfg: PipelineConfig, run_seeds=(0, 1, 2),
         reference_model=None, reference_ratio: float | None = None, threshold: float = 2.0,
         out_dir=None, model_name: str = "model") -> ScanReport:
    """Median trigger-energy ratio of the target class's maps over ``run_seeds``.

    With ``mask=None`` (blind mode) each map's candidate region comes from
    :func:`localize`. The verdict needs a clean baseline: either
    ``reference_ratio`` directly or a ``reference_model`` scanned the same way;
    without one the verdict falls back to comparing against 1 (no concentration).
    """
    maps = concept_maps(model, dataset, target_class, cfg, run_seeds)
    blind = mask is None
    if blind:
        regions = [localize(m) for m in maps]
        ratios = [trigger_energy(m, r) for m, r in zip(maps, regions)]
        med = float(np.median(ratios))
        region = regions[int(np.argsort(ratios)[len(ratios) // 2])]
    else:
        med, ratios = median_ratio(maps, mask)
        region = None
    if reference_ratio is None and reference_model is not None:
        ref_maps = concept_maps(reference_model, dataset, target_class, cfg, run_seeds)
        if blind:
            reference_ratio = float(np.median([trigger_energy(m, localize(m)) for m in ref_maps]))
        else:
            reference_ratio, _ = median_ratio(ref_maps, mask)
    baseline = 1.0 if reference_ratio is None else reference_ratio
    verdict = SUSPECT if med >= threshold * baseline else CLEAN
    paths = []
    if out_dir is not None:
        for s, m in zip(run_seeds, maps):
            paths.append(str(store_run(out_dir, model_name, m, cfg, s, trigger_energy(m, mask if not blind else localize(m)))["image"]))
    return ScanReport(med, ratios, threshold, reference_ratio, verdict, paths, blind, region)
