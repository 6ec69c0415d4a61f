"""Model-score: an Inception-score style agreement measure between a source
classifier's visualisations and a target classifier's predictions on them.

    M = exp(mean_i KL(p(y | map_i) || mean_j p(y | map_j))) / L

It ranges over [1/L, 1]: 1/L when every map gets the same prediction, 1 when
each concept's maps get a confident, distinct prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import micronet
from .errors import InputError
from .mapper import SaliencyMap
from .pipeline import display_image

Q_FLOOR = 1e-12


@dataclass
class ScoreReport:
    m_score: float
    per_map_kl: list
    marginal: np.ndarray
    conditionals: np.ndarray
    concepts: list
    source_id: str = "source"
    target_id: str = "target"

    @property
    def predicted(self) -> list:
        return [int(np.argmax(c)) for c in self.conditionals]

    @property
    def hit_rate(self) -> float:
        """Fraction of maps whose top prediction under the target is their own concept."""
        return float(np.mean([p == c for p, c in zip(self.predicted, self.concepts)]))


def conditional_dist(target_model: micronet.Classifier, smap) -> np.ndarray:
    """Target softmax on the display-normalised visualisation."""
    nu = smap.nu if isinstance(smap, SaliencyMap) else np.asarray(smap)
    if tuple(nu.shape) != target_model.input_shape:
        raise InputError(f"map shape {nu.shape} != target input {target_model.input_shape}")
    logits = micronet.forward(target_model, display_image(nu)[None])
    return micronet.softmax(logits.astype(np.float64))[0]


def marginal_dist(conditionals) -> np.ndarray:
    conds = np.asarray(conditionals, np.float64)
    if conds.ndim != 2 or len(conds) == 0:
        raise InputError("marginal_dist needs a nonempty list of distributions")
    # mean taken as offsets from the first row so identical rows reproduce it bit-exactly
    return conds[0] + (conds - conds[0]).mean(axis=0)


def kl(p, q) -> float:
    p = np.asarray(p, np.float64)
    q = np.maximum(np.asarray(q, np.float64), Q_FLOOR)
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / q[nz])), 0.0))


def score_from_conditionals(conditionals, L: int, concepts=None) -> ScoreReport:
    conds = np.asarray(conditionals, np.float64)
    marg = marginal_dist(conds)
    kls = [kl(c, marg) for c in conds]
    m = math.exp(float(np.mean(kls))) / L
    return ScoreReport(m, kls, marg, conds, list(concepts) if concepts is not None else [-1] * len(conds))


def m_score(target_model, maps, L: int, source_id: str = "source", target_id: str = "target") -> ScoreReport:
    """``L`` is the number of visualised concepts."""
    maps = list(maps)
    if not maps:
        raise InputError("m_score needs at least one map")
    conds = [conditional_dist(target_model, m) for m in maps]
    concepts = [m.concept if isinstance(m, SaliencyMap) else -1 for m in maps]
    report = score_from_conditionals(conds, L, concepts)
    report.source_id, report.target_id = source_id, target_id
    return report


def write_report(report: ScoreReport, path) -> tuple[Path, Path]:
    """key=value summary at ``path`` plus a per-map TSV beside it."""
    path = Path(path)
    path.write_text(
        f"m_score={report.m_score:.6f}\n"
        f"source={report.source_id}\n"
        f"target={report.target_id}\n"
        f"n_maps={len(report.per_map_kl)}\n"
        f"hit_rate={report.hit_rate:.6f}\n"
        f"marginal={','.join(f'{x:.6f}' for x in report.marginal)}\n"
    )
    tsv = path.with_suffix(".tsv")
    rows = ["concept\tpredicted_label\tkl\n"]
    rows += [f"{c}\t{p}\t{k:.6f}\n" for c, p, k in zip(report.concepts, report.predicted, report.per_map_kl)]
    tsv.write_text("".join(rows))
    return path, tsv
