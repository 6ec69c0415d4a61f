"""agnomap command line: gen, train, poison, map, score, scan.

Every command resolves a flat config (``--config`` file, then flag overrides),
validates it before doing any work and writes the resolved config to
``<out>/meta.txt``; that file can be passed back as ``--config`` to repeat
the run. Exit codes: 0 success, 2 bad configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datagen, mapper, metrics, micronet, pipeline, pnm, trojanscan
from .errors import AgnomapError, ConfigError

log = logging.getLogger("agnomap")

REQUIRED_PATHS = {
    "gen": [],
    "train": ["data"],
    "poison": ["data"],
    "map": ["model", "data"],
    "score": ["model", "maps"],
    "scan": ["model", "data"],
}


def _specs(cfg):
    return datagen.default_specs(cfg["classes"])


def _shape(cfg):
    return (cfg["image_size"], cfg["image_size"], cfg["image_channels"])


def _require(cfg, command):
    for key in REQUIRED_PATHS[command]:
        if not cfg[key]:
            raise ConfigError(f"{key}: required for '{command}'")
        if not Path(cfg[key]).exists():
            raise ConfigError(f"{key}: path {cfg[key]} does not exist")
    if command == "scan" and cfg["reference_model"] and not Path(cfg["reference_model"]).exists():
        raise ConfigError(f"reference_model: path {cfg['reference_model']} does not exist")
    if command == "train" and cfg["test_data"] and not Path(cfg["test_data"]).exists():
        raise ConfigError(f"test_data: path {cfg['test_data']} does not exist")


def _load_model(cfg, key="model"):
    model = micronet.load_model(cfg[key])
    if model.input_shape != _shape(cfg) or model.num_classes != cfg["classes"]:
        raise ConfigError(f"{key}: checkpoint is {model.input_shape}/{model.num_classes} classes, "
                          f"config says {_shape(cfg)}/{cfg['classes']}")
    return model


def _trigger(cfg):
    return datagen.make_trigger(cfg["trigger"], cfg["target"], _shape(cfg), cfg["trigger_size"],
                                cfg["trigger_corner"], cfg["poison_fraction"])


def cmd_gen(cfg, out: Path):
    shape = _shape(cfg)
    train = datagen.generate(_specs(cfg), cfg["n_per_class"], cfg["data_seed"], shape)
    test = datagen.generate(_specs(cfg), cfg["n_test_per_class"], cfg["test_seed"], shape)
    datagen.export_dataset(train, out / "train")
    datagen.export_dataset(test, out / "test")
    print(f"train={out / 'train'} n={len(train)}")
    print(f"test={out / 'test'} n={len(test)}")


def cmd_train(cfg, out: Path):
    train = datagen.import_dataset(cfg["data"])
    test = datagen.import_dataset(cfg["test_data"]) if cfg["test_data"] else None
    model = micronet.build_classifier(_shape(cfg), cfg["classes"], cfg["arch_channels"], cfg["seed"])
    res = micronet.train(model, train, cfg["epochs"], cfg["lr"], cfg["seed"], test=test, batch_size=cfg["batch_size"])
    path = out / f"{cfg['model_name']}.agnm"
    micronet.save_model(res.model, path)
    print(f"model={path}")
    print(f"train_accuracy={res.train_accuracy:.6f}")
    print(f"test_accuracy={res.test_accuracy:.6f}")


def cmd_poison(cfg, out: Path):
    ds = datagen.import_dataset(cfg["data"])
    trig = _trigger(cfg)
    poisoned = datagen.poison(ds, trig, cfg["seed"])
    datagen.export_dataset(poisoned, out / "poisoned")
    pnm.write(out / "trigger_mask.pgm", trig.mask)
    n = len(datagen.poison_indices(len(ds), trig.poison_fraction, cfg["seed"]))
    print(f"poisoned={out / 'poisoned'}")
    print(f"n_poisoned={n}")
    print(f"target={trig.target_label}")


def cmd_map(cfg, out: Path):
    model = _load_model(cfg)
    ds = datagen.import_dataset(cfg["data"])
    pcfg = cfgmod.pipeline_config(cfg)
    smap = pipeline.visualize_concept(model, ds, cfg["concept"], pcfg, cfg["seed"])
    score = mapper.nudge_success(model, ds.images, smap)
    paths = pipeline.store_run(out, cfg["model_name"], smap, pcfg, cfg["seed"], score)
    print(f"map={paths['map']}")
    print(f"image={paths['image']}")
    print(f"nudge_success={score:.6f}")


def cmd_score(cfg, out: Path):
    model = _load_model(cfg)
    files = sorted(Path(cfg["maps"]).rglob("*.map"))
    if not files:
        raise ConfigError(f"maps: no .map files under {cfg['maps']}")
    maps = [mapper.load_map(f) for f in files]
    report = metrics.m_score(model, maps, cfg["classes"], source_id=str(cfg["maps"]), target_id=str(cfg["model"]))
    path, tsv = metrics.write_report(report, out / "score.txt")
    print(f"m_score={report.m_score:.6f}")
    print(f"hit_rate={report.hit_rate:.6f}")
    print(f"report={path}")


def cmd_scan(cfg, out: Path):
    model = _load_model(cfg)
    ref = _load_model(cfg, "reference_model") if cfg["reference_model"] else None
    ds = datagen.import_dataset(cfg["data"])
    mask = None if cfg["blind"] else datagen.corner_mask(_shape(cfg), cfg["trigger_size"], cfg["trigger_corner"])
    seeds = [cfg["seed"] + i for i in range(cfg["runs"])]
    report = trojanscan.scan(model, ds, cfg["target"], mask, cfgmod.pipeline_config(cfg), seeds,
                             reference_model=ref, threshold=cfg["threshold"], out_dir=out,
                             model_name=cfg["model_name"])
    (out / "scan.txt").write_text(report.to_text())
    print(f"trigger_energy_ratio={report.trigger_energy_ratio:.6f}")
    print(f"verdict={report.verdict}")
    print(f"report={out / 'scan.txt'}")


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "poison": cmd_poison,
    "map": cmd_map, "score": cmd_score, "scan": cmd_scan,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agnomap", description="Input-agnostic saliency maps for small classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="key = value config file (e.g. a previous meta.txt)")
        for key in cfgmod.KEYS:
            p.add_argument("--" + key.name.replace("_", "-"), dest=key.name, default=None, help=key.help)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        raw = cfgmod.parse_file(args.config) if args.config else {}
        for key in cfgmod.KEYS:
            value = getattr(args, key.name)
            if value is not None:
                raw[key.name] = value
        cfg = cfgmod.resolve(raw)
        _require(cfg, args.command)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "meta.txt").write_text(cfgmod.dump(cfg, f"agnomap {args.command}"))
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (AgnomapError, OSError) as exc:
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
