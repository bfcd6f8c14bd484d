"""Command-line entry point: ``mtunet <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import SCHEMA, TrainConfig, build_config, parse_config_text
from .data import episode_rng, evaluate, generate_synthetic, load_dataset, sample_episode
from .errors import MtunetError, UsageError
from .rng import Pcg32

log = logging.getLogger("mtunet")

STREAMS = {"backbone": 11, "pe": 12, "matcher": 13}
SUBCOMMANDS = {
    "gen-data": None,
    "train-backbone": "backbone",
    "train-pe": "pe",
    "train-matcher": "matcher",
    "eval": "eval",
    "explain": "explain",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser):
    for key, conv in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if key in ("augment", "global_norm"):
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        else:
            parser.add_argument(flag, dest=key, default=None, metavar=key.upper())


def build_parser():
    parser = _Parser(prog="mtunet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mtunet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI-style config file")
        p.add_argument("--json", action="store_true", help="print final metrics as one JSON line")
        if name == "gen-data":
            p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
            p.add_argument("--base", type=int, default=10)
            p.add_argument("--val", type=int, default=5)
            p.add_argument("--test", type=int, default=5)
            p.add_argument("--per-class", type=int, default=60)
            p.add_argument("--size", type=int, default=32)
            p.add_argument("--seed", dest="seed", default=None, metavar="U64")
            continue
        p.add_argument("--data", type=Path, required=True, help="dataset root with index.csv")
        if name != "train-backbone":
            p.add_argument("--model", type=Path, required=True, help="input checkpoint")
        p.add_argument("--out", type=Path, required=name not in ("eval",), help="output path")
        if name in ("eval", "explain"):
            p.add_argument("--split", choices=("base", "val", "test"), default="test")
        _add_config_flags(p)
    return parser


def resolve_config(args, stage):
    """Built-in defaults < MTUNET_SEED < config file < CLI flags."""
    cfg = TrainConfig()
    env_seed = os.environ.get("MTUNET_SEED")
    if env_seed is not None:
        cfg = build_config({"seed": SCHEMA["seed"](env_seed)}, cfg)
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} does not exist")
        cfg = build_config(parse_config_text(args.config.read_text(encoding="utf-8")), cfg)
    overrides = {}
    for key, conv in SCHEMA.items():
        value = getattr(args, key, None)
        if value is None:
            continue
        if isinstance(value, str):
            try:
                value = conv(value)
            except ValueError:
                raise UsageError(f"--{key.replace('_', '-')}: invalid value {value!r}") from None
        overrides[key] = value
    return build_config(overrides, cfg).resolved(stage)


class Manifest:
    """JSON run record, written before the stage runs and finalized after."""

    def __init__(self, path, record):
        self.path = Path(path)
        self.record = dict(record, version=f"v{__version__}", status="running", wall_time=None)
        self._start = time.perf_counter()
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status="done", **extra):
        self.record.update(extra, status=status, wall_time=round(time.perf_counter() - self._start, 3))
        self.write()


def manifest_path(out, is_dir):
    return Path(out) / "manifest.json" if is_dir else Path(str(out) + ".manifest.json")


def _record(args, cfg, stage):
    return {
        "stage": stage,
        "argv": list(args._argv),
        "seed": cfg.seed,
        "config": _jsonable(cfg.as_dict()),
        "inputs": {k: str(getattr(args, k)) for k in ("data", "model", "config") if getattr(args, k, None)},
        "outputs": {"out": str(args.out)} if getattr(args, "out", None) else {},
    }


def _jsonable(d):
    return {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()}


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    seed = SCHEMA["seed"](args.seed) if args.seed is not None else int(os.environ.get("MTUNET_SEED", 1))
    record = {"stage": "gen-data", "argv": list(args._argv), "seed": seed,
              "config": {"base": args.base, "val": args.val, "test": args.test,
                         "per_class": args.per_class, "size": args.size},
              "inputs": {}, "outputs": {"out": str(args.out)}}
    manifest = Manifest(manifest_path(args.out, True), record)
    ds = generate_synthetic(args.out, args.base, args.val, args.test, args.per_class, args.size, seed)
    manifest.finish(images=len(ds))
    print(f"wrote {len(ds)} images to {args.out}")
    return {"images": len(ds)}


def cmd_train_backbone(args, cfg):
    from .backbone import pretrain_backbone
    from .model import MTUNet

    ds = load_dataset(args.data)
    manifest = Manifest(manifest_path(args.out, False), _record(args, cfg, "backbone"))
    backbone, history = pretrain_backbone(ds, cfg, Pcg32(cfg.seed, STREAMS["backbone"]))
    MTUNet(backbone).save(args.out)
    best = max(acc for _, acc in history)
    manifest.finish(best_val_accuracy=best)
    return {"best_val_accuracy": best}


def cmd_train_pe(args, cfg):
    from .model import MTUNet
    from .training import train_pe

    ds = load_dataset(args.data)
    model = MTUNet.load(args.model)
    manifest = Manifest(manifest_path(args.out, False), _record(args, cfg, "pe"))
    pe, categories, history = train_pe(ds, model.backbone, cfg, Pcg32(cfg.seed, STREAMS["pe"]))
    MTUNet(model.backbone, pe).save(args.out)
    best = max(acc for _, acc in history) if history else None
    manifest.finish(best_val_accuracy=best, pe_categories=categories)
    return {"best_val_accuracy": best, "pe_categories": categories}


def cmd_train_matcher(args, cfg):
    from .model import MTUNet
    from .training import train_matcher

    ds = load_dataset(args.data)
    model = MTUNet.load(args.model)
    if model.pe is None:
        raise UsageError(f"{args.model} has no pattern extractor; run train-pe first")
    manifest = Manifest(manifest_path(args.out, False), _record(args, cfg, "matcher"))
    pm, history = train_matcher(ds, model.backbone, model.pe, cfg, Pcg32(cfg.seed, STREAMS["matcher"]))
    MTUNet(model.backbone, model.pe, pm).save(args.out)
    best = max(acc for _, acc in history) if history else None
    manifest.finish(best_val_accuracy=best)
    return {"best_val_accuracy": best}


def _full_model(path):
    from .model import MTUNet

    model = MTUNet.load(path)
    if model.pe is None or model.pm is None:
        raise UsageError(f"{path} is not a fully trained model (needs pe.* and pm.* entries)")
    return model


def cmd_eval(args, cfg):
    ds = load_dataset(args.data)
    model = _full_model(args.model)
    manifest = Manifest(manifest_path(args.out, False), _record(args, cfg, "eval")) if args.out else None
    report = evaluate(model, ds, args.split, cfg.episodes, cfg.way, cfg.shot, cfg.query, cfg.seed, jobs=cfg.jobs)
    result = dict(report.to_dict(), way=cfg.way, shot=cfg.shot, query=cfg.query, split=args.split)
    if args.out:
        args.out.write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        manifest.finish(**report.to_dict())
    if not args.json:
        print(report.format())
    return result


def cmd_explain(args, cfg):
    from .explain import export_explanation

    ds = load_dataset(args.data)
    model = _full_model(args.model)
    manifest = Manifest(manifest_path(args.out, True), _record(args, cfg, "explain"))
    episode = sample_episode(ds, args.split, cfg.way, cfg.shot, cfg.query, episode_rng(cfg.seed, 0))
    matrix = export_explanation(args.out, episode, model, ds, global_norm=cfg.global_norm)
    manifest.finish(categories=matrix.categories)
    print(f"wrote explanation for {cfg.way} categories to {args.out}")
    return {"categories": matrix.categories, "matrix": matrix.scores.round(6).tolist()}


HANDLERS = {
    "train-backbone": cmd_train_backbone,
    "train-pe": cmd_train_pe,
    "train-matcher": cmd_train_matcher,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def dispatch(argv=None):
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    stream = sys.stderr if args.json else sys.stdout
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=stream, force=True)
    try:
        if args.command == "gen-data":
            result = cmd_gen_data(args)
        else:
            cfg = resolve_config(args, SUBCOMMANDS[args.command])
            result = HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"mtunet: error: {exc}", file=sys.stderr)
        return 2
    except (MtunetError, OSError) as exc:
        print(f"mtunet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(result, sort_keys=True))
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
