"""Command-line driver: synth, pretrain, finetune, evaluate, sweep.

Settings come from an INI file (``--config``) with one section per stage;
command-line flags override file values, which override built-in defaults.
Exit codes: 0 ok, 2 usage/config error, 3 data error, 4 stage/state error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import dataset as ds
from .ensemble import TemperaturePair, default_grid, evaluate, parse_grid, sweep_temperatures, sweep_to_csv
from .errors import FileFormatError, InvalidStateError
from .trainer import TrainConfig, finetune, format_epoch, load_checkpoint, pretrain, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STATE = 0, 2, 3, 4

TRAIN_FILE = "train.ltfs"
TEST_FILE = "test.ltfs"
SYNTH_META = "synth_meta.json"
PRETRAINED = "pretrained.ckpt"
FINETUNED = "finetuned.ckpt"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
RECALLS_CSV = "recalls.csv"
SWEEP_CSV = "sweep.csv"

_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "seed"}

SECTIONS: dict[str, dict[str, type]] = {
    "run": {"seed": int, "out": str},
    "data": {"train": str, "test": str},
    "synth": {
        "num_classes": int,
        "profile": str,
        "head_count": int,
        "imbalance_ratio": float,
        "alpha": float,
        "min_count": int,
        "dim": int,
        "separation": float,
        "test_per_class": int,
    },
    "model": {"hidden_dim": int},
    "pretrain": dict(_TRAIN_KEYS),
    "finetune": {**_TRAIN_KEYS, "checkpoint": str},
    "evaluate": {"checkpoint": str, "head": str, "t_old": float, "t_new": float},
    "sweep": {"checkpoint": str, "grid": str},
}

SYNTH_DEFAULTS = {
    "num_classes": 20,
    "profile": "exponential",
    "head_count": 200,
    "imbalance_ratio": 100.0,
    "alpha": 6.0,
    "min_count": 1,
    "dim": 16,
    "separation": 4.0,
    "test_per_class": 50,
}


class ConfigError(ValueError):
    pass


def _coerce(value: str, kind, key: str):
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


def load_config(path: str | None) -> dict[str, dict]:
    """Parse and type-check a config file; unknown sections or keys are errors."""
    cfg: dict[str, dict] = {name: {} for name in SECTIONS}
    if path is None:
        return cfg
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(value, SECTIONS[section][key], f"{section}.{key}")
    return cfg


class Context:
    """Resolved settings for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = load_config(args.config)
        run = self.cfg["run"]
        self.seed = args.seed if args.seed is not None else run.get("seed", 0)
        out = args.out if args.out is not None else run.get("out", ".")
        self.out = Path(out)

    def path(self, section: str, key: str, default_name: str, flag: str | None = None) -> Path:
        value = getattr(self.args, flag, None) if flag else None
        if value is None:
            value = self.cfg[section].get(key)
        return Path(value) if value is not None else self.out / default_name

    def train_config(self, stage: str) -> TrainConfig:
        values = {k: v for k, v in self.cfg[stage].items() if k in _TRAIN_KEYS}
        if stage == "pretrain":
            return TrainConfig.pretraining(seed=self.seed, **values)
        return TrainConfig(seed=self.seed, **values)

    def hidden_dim(self) -> int | None:
        h = self.cfg["model"].get("hidden_dim", 32)
        return None if h == 0 else h

    def ensure_out(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from None


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _log(epoch: int, lr: float, loss: float) -> None:
    print(format_epoch(epoch, lr, loss), flush=True)


def cmd_synth(ctx: Context) -> int:
    s = {**SYNTH_DEFAULTS, **ctx.cfg["synth"]}
    if s["profile"] == "exponential":
        profile = ds.exponential_profile(s["num_classes"], s["head_count"], s["imbalance_ratio"])
    elif s["profile"] == "pareto":
        profile = ds.pareto_profile(s["num_classes"], s["head_count"], s["alpha"], s["min_count"])
    else:
        raise ConfigError(f"synth.profile must be 'exponential' or 'pareto', got {s['profile']!r}")
    if s["test_per_class"] < 1:
        raise ConfigError("synth.test_per_class must be >= 1")
    train = ds.synthesize_gaussian(profile, s["dim"], s["separation"], ctx.seed, stream=0)
    test = ds.synthesize_gaussian(
        ds.uniform_profile(s["num_classes"], s["test_per_class"]), s["dim"], s["separation"], ctx.seed, stream=1
    )
    ctx.ensure_out()
    train_path = ctx.path("data", "train", TRAIN_FILE)
    test_path = ctx.path("data", "test", TEST_FILE)
    ds.write_features(train_path, train)
    ds.write_features(test_path, test)
    meta = {
        "seed": ctx.seed,
        "settings": s,
        "profile": list(profile.per_class_count),
        "profile_params": profile.params,
        "train_total": profile.total,
        "test_per_class": s["test_per_class"],
        "means": train.metadata["means"],
    }
    (ctx.out / SYNTH_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {train_path} ({len(train)} samples) and {test_path} ({len(test)} samples)")
    return EXIT_OK


def cmd_pretrain(ctx: Context) -> int:
    config = ctx.train_config("pretrain")
    train = ds.read_features(_require(ctx.path("data", "train", TRAIN_FILE, "train"), "training features"))
    ctx.ensure_out()
    ckpt = pretrain(train, config, hidden_dim=ctx.hidden_dim(), on_epoch=_log)
    path = ctx.out / PRETRAINED
    save_checkpoint(path, ckpt)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_finetune(ctx: Context) -> int:
    config = ctx.train_config("finetune")
    ck_path = _require(ctx.path("finetune", "checkpoint", PRETRAINED, "checkpoint"), "pretrained checkpoint")
    train = ds.read_features(_require(ctx.path("data", "train", TRAIN_FILE, "train"), "training features"))
    pre = load_checkpoint(ck_path)
    if pre.stage != "pretrained":
        raise InvalidStateError(f"stage mismatch: {ck_path} is a {pre.stage!r} checkpoint, finetune needs 'pretrained'")
    ctx.ensure_out()
    ckpt = finetune(pre, train, config, on_epoch=_log)
    path = ctx.out / FINETUNED
    save_checkpoint(path, ckpt)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(ctx: Context) -> int:
    e = ctx.cfg["evaluate"]
    head = ctx.args.head or e.get("head", "new")
    temps = TemperaturePair(
        ctx.args.t_old if ctx.args.t_old is not None else e.get("t_old", 1.0),
        ctx.args.t_new if ctx.args.t_new is not None else e.get("t_new", 1.0),
    )
    ck_path = _require(ctx.path("evaluate", "checkpoint", FINETUNED, "checkpoint"), "checkpoint")
    test = ds.read_features(_require(ctx.path("data", "test", TEST_FILE, "test"), "test features"))
    ckpt = load_checkpoint(ck_path)
    report, recalls = evaluate(ckpt.bundle, test, head, temps)
    ctx.ensure_out()
    (ctx.out / METRICS_JSON).write_text(report.to_json())
    (ctx.out / METRICS_CSV).write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    with open(ctx.out / RECALLS_CSV, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_index", "train_count", "recall"])
        for c, r in enumerate(recalls):
            w.writerow([c, ckpt.class_counts[c], repr(float(r))])
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_sweep(ctx: Context) -> int:
    spec = ctx.args.grid or ctx.cfg["sweep"].get("grid")
    try:
        grid = parse_grid(spec) if spec else default_grid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ck_path = _require(ctx.path("sweep", "checkpoint", FINETUNED, "checkpoint"), "checkpoint")
    test = ds.read_features(_require(ctx.path("data", "test", TEST_FILE, "test"), "test features"))
    ckpt = load_checkpoint(ck_path)
    text = sweep_to_csv(sweep_temperatures(ckpt.bundle, test, grid))
    ctx.ensure_out()
    (ctx.out / SWEEP_CSV).write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI config file")
    shared.add_argument("--seed", type=int, help="overrides [run] seed")
    shared.add_argument("--out", help="output directory (overrides [run] out)")

    parser = argparse.ArgumentParser(prog="gml-lt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[shared], help="generate long-tailed train and balanced test features")
    for name, help_ in (("pretrain", "train backbone + head from scratch"),
                        ("finetune", "freeze backbone, re-train a fresh head")):
        p = sub.add_parser(name, parents=[shared], help=help_)
        p.add_argument("--train", help="training feature file")
        if name == "finetune":
            p.add_argument("--checkpoint", help="pretrained checkpoint")
    p = sub.add_parser("evaluate", parents=[shared], help="per-class recall metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--test", help="test feature file")
    p.add_argument("--head", choices=("old", "new", "ensemble"))
    p.add_argument("--t-old", type=float, dest="t_old")
    p.add_argument("--t-new", type=float, dest="t_new")
    p = sub.add_parser("sweep", parents=[shared], help="ensemble temperature grid")
    p.add_argument("--checkpoint")
    p.add_argument("--test", help="test feature file")
    p.add_argument("--grid", help="e.g. 1,2,3x1,2,3 (t_old values x t_new values)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](Context(args))
    except (FileNotFoundError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
