"""Flat ``key = value`` run configuration with typed, validated keys."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError
from .mapper import MapperConfig
from .pipeline import PipelineConfig
from .refiner import RefineConfig


def _int_tuple(text: str) -> tuple:
    return tuple(int(t) for t in str(text).split(",") if t.strip())


@dataclass(frozen=True)
class Key:
    name: str
    type: Callable
    default: Any
    help: str
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _choice(*options):
    return (lambda v: v in options), "one of " + "|".join(options)


KEYS = [
    Key("profile", str, "desk", "hyper-parameter profile (desk or full)", *_choice("desk", "full")),
    Key("seed", int, 0, "run seed (map/scan runs, training init)", lambda v: v >= 0, ">= 0"),
    # data
    Key("classes", int, 4, "number of concepts", lambda v: 2 <= v <= 6, "in [2, 6]"),
    Key("n_per_class", int, 1000, "training images per concept", lambda v: v >= 1, ">= 1"),
    Key("n_test_per_class", int, 250, "held-out images per concept", lambda v: v >= 1, ">= 1"),
    Key("image_size", int, 32, "square image side in pixels", lambda v: v >= 8 and v % 4 == 0, ">= 8 and divisible by 4"),
    Key("image_channels", int, 3, "1 (PGM) or 3 (PPM)", lambda v: v in (1, 3), "1 or 3"),
    Key("data_seed", int, 1, "training-set seed", lambda v: v >= 0, ">= 0"),
    Key("test_seed", int, 2, "held-out-set seed", lambda v: v >= 0, ">= 0"),
    # classifier
    Key("arch_channels", _int_tuple, (8, 16), "conv widths, comma separated", lambda v: len(v) >= 1 and min(v) >= 1, "positive ints"),
    Key("epochs", int, 10, "training epochs", lambda v: v >= 0, ">= 0"),
    Key("lr", float, 3e-3, "training learning rate", lambda v: v > 0, "> 0"),
    Key("batch_size", int, 32, "training batch size", lambda v: v >= 1, ">= 1"),
    # mapper
    Key("b", int, None, "mapper/refiner mini-batch size", lambda v: v >= 1, ">= 1"),
    Key("K", int, None, "mapper iterations per cycle", lambda v: v >= 0, ">= 0"),
    Key("eta", float, None, "l2 ball radius", lambda v: v > 0, "> 0"),
    Key("beta1", float, 0.9, "first-moment decay", lambda v: 0 < v < 1, "in (0, 1)"),
    Key("beta2", float, 0.999, "second-moment decay", lambda v: 0 < v < 1, "in (0, 1)"),
    Key("branch_score", str, "probability", "branch probe statistic", *_choice("probability", "prediction")),
    # refiner
    Key("lam", float, 50.0, "refinement penalty weight", lambda v: v >= 0, ">= 0"),
    Key("refine_iterations", int, None, "refinement Adam steps per cycle", lambda v: v >= 0, ">= 0"),
    Key("refine_lr", float, 0.05, "refinement learning rate", lambda v: v > 0, "> 0"),
    Key("cycles", int, 2, "mapper/refiner cycles", lambda v: v >= 1, ">= 1"),
    # runs
    Key("concept", int, 0, "concept label to visualise", lambda v: v >= 0, ">= 0"),
    Key("runs", int, 3, "maps per concept (score) or per scan", lambda v: v >= 1, ">= 1"),
    Key("model_name", str, "model", "name used in the maps/ directory layout"),
    # backdoor
    Key("trigger", str, "square", "trigger pattern", *_choice("square", "checkerboard", "cross")),
    Key("trigger_size", int, 8, "trigger patch side", lambda v: v >= 1, ">= 1"),
    Key("trigger_corner", str, "br", "trigger corner", *_choice("tl", "tr", "bl", "br")),
    Key("target", int, 0, "backdoor target label", lambda v: v >= 0, ">= 0"),
    Key("poison_fraction", float, 0.1, "fraction of training images poisoned", lambda v: 0 < v <= 1, "in (0, 1]"),
    Key("threshold", float, 2.0, "suspect when ratio >= threshold x clean ratio", lambda v: v > 0, "> 0"),
    Key("blind", int, 0, "1 = localise the trigger region from the maps", lambda v: v in (0, 1), "0 or 1"),
    # paths
    Key("data", str, "", "training dataset directory"),
    Key("test_data", str, "", "held-out dataset directory"),
    Key("model", str, "", "model checkpoint (.agnm)"),
    Key("reference_model", str, "", "clean reference checkpoint for scan"),
    Key("maps", str, "", "directory searched recursively for .map files"),
    Key("out", str, "out", "output directory"),
]
KEY_INDEX = {k.name: k for k in KEYS}

PROFILE_DEFAULTS = {
    "desk": {"b": 32, "K": 150, "eta": 4.5, "refine_iterations": 60},
    "full": {"b": 128, "K": 650, "eta": 30.0, "refine_iterations": 150},
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEY_INDEX:
            raise ConfigError(f"{key}: unknown config key ({source}:{lineno})")
        raw[key] = value.strip()
    return raw


def parse_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file {path} not found")
    return parse_text(p.read_text(), str(path))


def resolve(raw: dict[str, Any]) -> dict[str, Any]:
    """Typed config with defaults filled in (profile-dependent ones included) and every value validated."""
    for name in raw:
        if name not in KEY_INDEX:
            raise ConfigError(f"{name}: unknown config key")
    out: dict[str, Any] = {}
    for key in KEYS:
        if key.name in raw and raw[key.name] is not None:
            try:
                value = key.type(raw[key.name])
            except (TypeError, ValueError):
                raise ConfigError(f"{key.name}: cannot parse {raw[key.name]!r} as {key.type.__name__}") from None
        else:
            value = key.default
        out[key.name] = value
    if out["profile"] not in PROFILE_DEFAULTS:
        raise ConfigError(f"profile: must be one of {'|'.join(PROFILE_DEFAULTS)}")
    for name, value in PROFILE_DEFAULTS[out["profile"]].items():
        if out[name] is None:
            out[name] = value
    for key in KEYS:
        if key.check is not None and not key.check(out[key.name]):
            raise ConfigError(f"{key.name}: {out[key.name]!r} must be {key.rule}")
    if not out["beta1"] < out["beta2"]:
        raise ConfigError("beta1: must be smaller than beta2")
    if out["concept"] >= out["classes"]:
        raise ConfigError(f"concept: {out['concept']} not below classes={out['classes']}")
    if out["target"] >= out["classes"]:
        raise ConfigError(f"target: {out['target']} not below classes={out['classes']}")
    return out


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: dict[str, Any], header: str = "") -> str:
    lines = [f"# {header}\n"] if header else []
    lines += [f"{k.name} = {format_value(cfg[k.name])}\n" for k in KEYS]
    return "".join(lines)


def pipeline_config(cfg: dict[str, Any]) -> PipelineConfig:
    mapper = MapperConfig(b=cfg["b"], K=cfg["K"], eta=cfg["eta"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                          branch_score=cfg["branch_score"])
    refine = RefineConfig(lam=cfg["lam"], iterations=cfg["refine_iterations"], lr=cfg["refine_lr"],
                          eta=cfg["eta"], b=cfg["b"], beta1=cfg["beta1"], beta2=cfg["beta2"])
    return PipelineConfig(mapper, refine, cfg["cycles"]).validate()
