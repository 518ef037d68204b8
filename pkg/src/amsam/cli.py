"""Command-line entry point: gen-data, train, eval, predict, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    CheckpointError, InfeasibleSpec, PGMError, SyntheticSpec, gen_synthetic, load_checkpoint, load_dataset,
    load_image, load_mask, save_checkpoint, save_dataset, save_mask, write_metrics,
)
from .nn import ConfigError
from .prompting import BoundingBox, detect_boxes, select_best_box
from .trainer import (
    TrainConfig, TrainingDiverged, evaluate, make_detector, model_from_checkpoint, predict_mask,
    split_dataset, train,
)

log = logging.getLogger("amsam")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.amck"
METRICS_NAME = "metrics.csv"
ABLATION_NAME = "ablation.csv"

# keys accepted in a config file besides TrainConfig and SyntheticSpec fields
PATH_KEYS = ("data", "out", "checkpoint", "image", "mask", "box", "test_count", "seeds")

# flag dest -> config key, where they differ
FLAG_KEYS = {
    "lambda_": "lam", "no_box_prompts": "box_prompts", "no_calibration": "calibration_enabled",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in (SyntheticSpec, TrainConfig):
        for f in fields(cls):
            # annotations are strings under postponed evaluation
            base = str(f.type).replace(" | None", "").strip()
            types.setdefault(f.name, {"int": int, "float": float, "bool": bool}.get(base, str))
    types.update({"test_count": int, **{k: str for k in PATH_KEYS if k != "test_count"}})
    return types


def parse_value(key: str, text: str):
    typ = _field_types()[key]
    text = text.strip()
    if key == "detections_file" and text.lower() in ("", "none"):
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = _field_types()
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = parse_value(key, val)
    return values


def write_config_file(path, values: dict) -> None:
    lines = ["# resolved configuration; pass back with --config to rerun"]
    for key in sorted(values):
        if values[key] is not None:
            lines.append(f"{key}={values[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    values = {**asdict(SyntheticSpec()), **TrainConfig().to_dict(), "test_count": 16, "seeds": "0,1,2"}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for dest, val in vars(args).items():
        if dest in ("command", "config", "func", "verbose") or val is None:
            continue
        if dest in ("no_box_prompts", "no_calibration"):
            if val:
                values[FLAG_KEYS[dest]] = False
            continue
        values[FLAG_KEYS.get(dest, dest)] = val
    return values


def train_config(values: dict) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in values.items() if k in keys})
    if cfg.detections_file and cfg.box_prompts and cfg.detector == "oracle":
        cfg = replace(cfg, detector="file")
    return cfg


def synthetic_spec(values: dict, **over) -> SyntheticSpec:
    keys = {f.name for f in fields(SyntheticSpec)}
    return SyntheticSpec(**{**{k: v for k, v in values.items() if k in keys}, **over})


def parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--box needs x1,y1,x2,y2, got {text!r}")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts)
        return BoundingBox(x1, y1, x2, y2, 1.0)
    except ValueError as exc:
        raise UsageError(f"bad --box {text!r}: {exc}") from None


def _need(values: dict, key: str) -> str:
    if not values.get(key):
        raise UsageError(f"--{key} is required")
    return values[key]


def _load_split_data(directory: str) -> tuple[list, list]:
    train_samples = load_dataset(directory)
    test_dir = Path(directory) / "test"
    test_samples = load_dataset(test_dir) if test_dir.is_dir() else []
    return train_samples, test_samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(values: dict) -> int:
    out = Path(_need(values, "out"))
    if values["count"] < 1:
        raise UsageError("--count must be >= 1")
    if values["test_count"] < 0:
        raise UsageError("--test-count must be >= 0")
    seed = values["seed"]
    train_set = gen_synthetic(synthetic_spec(values, seed=seed, prefix="s"))
    save_dataset(out, train_set)
    if values["test_count"]:
        # test images come from a disjoint stream of the same generator
        test_set = gen_synthetic(synthetic_spec(values, seed=seed + 1_000_003, prefix="t",
                                                count=values["test_count"]))
        save_dataset(out / "test", test_set)
    write_config_file(out / CONFIG_NAME, values)
    print(f"wrote {len(train_set)} training and {values['test_count']} test samples to {out}")
    return EXIT_OK


def cmd_train(values: dict) -> int:
    out = Path(_need(values, "out"))
    samples, test = _load_split_data(_need(values, "data"))
    if len(samples) < 2:
        raise UsageError(f"training needs at least 2 samples, found {len(samples)} in {values['data']}")
    cfg = train_config(values)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / CONFIG_NAME, values)
    ckpt, rows = train(cfg, split_dataset(samples, cfg.seed, test))
    save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    write_metrics(out / METRICS_NAME, rows)
    print(f"best epoch {ckpt.epoch}: D2 dice {100 * ckpt.best_d2_dice:.1f}")
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    ckpt = load_checkpoint(_need(values, "checkpoint"))
    samples = load_dataset(_need(values, "data"))
    if not samples:
        raise UsageError(f"no samples in {values['data']}")
    print(f"{100 * evaluate(ckpt, samples):.1f}")
    return EXIT_OK


def cmd_predict(values: dict) -> int:
    ckpt = load_checkpoint(_need(values, "checkpoint"))
    image_path = Path(_need(values, "image"))
    out = _need(values, "out")
    box = parse_box(values["box"]) if values.get("box") else None
    image = load_image(image_path)
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    if box is None and cfg.box_prompts:
        image_id = image_path.stem[len("img_"):] if image_path.stem.startswith("img_") else image_path.stem
        mask = load_mask(values["mask"]) if values.get("mask") else None
        if cfg.detector == "oracle" and mask is None:
            raise UsageError("this checkpoint uses box prompts: pass --box or a --mask for the oracle detector")
        box = select_best_box(detect_boxes(make_detector(cfg), image, mask, image_id=image_id))
    model = model_from_checkpoint(ckpt)
    save_mask(out, predict_mask(model, image, box))
    return EXIT_OK


ARMS = (
    ("baseline", False, False),
    ("box_prompts", True, False),
    ("calibration", False, True),
    ("full", True, True),
)


def cmd_ablate(values: dict) -> int:
    out = Path(_need(values, "out"))
    samples, test = _load_split_data(_need(values, "data"))
    if not test:
        raise UsageError(f"ablation needs a test set in {Path(values['data']) / 'test'}")
    try:
        seeds = [int(s) for s in str(values["seeds"]).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds {values['seeds']!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / CONFIG_NAME, values)
    per_run = []
    for name, box, cal in ARMS:
        for seed in seeds:
            cfg = replace(train_config({**values, "seed": seed}), box_prompts=box, calibration_enabled=cal)
            ckpt, _ = train(cfg, split_dataset(samples, seed, test))
            per_run.append((name, box, cal, seed, evaluate(ckpt, test)))
            log.info("arm %s seed %d: %.4f", name, seed, per_run[-1][-1])
    with open(out / ABLATION_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "box_prompts", "mask_calibration", "seeds", "mean_test_dice", "std_test_dice"])
        for name, box, cal in ARMS:
            scores = [r[4] for r in per_run if r[0] == name]
            w.writerow([name, int(box), int(cal), " ".join(map(str, seeds)),
                        f"{np.mean(scores):.6f}", f"{np.std(scores):.6f}"])
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "seed", "test_dice"])
        for name, _, _, seed, score in per_run:
            w.writerow([name, seed, f"{score:.6f}"])
    for name, *_ in ARMS:
        scores = [r[4] for r in per_run if r[0] == name]
        print(f"{name:12s} {100 * np.mean(scores):.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lower-lr", dest="lower_lr", type=float)
    p.add_argument("--upper-lr", dest="upper_lr", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--no-box-prompts", action="store_true", default=None)
    p.add_argument("--no-calibration", action="store_true", default=None)
    p.add_argument("--detections-file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amsam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic few-shot dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--shape", choices=("rectangle", "ellipse", "mixed"))
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="bi-level training; writes checkpoint, metrics and config")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print mean test dice (percent) of a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the predicted mask of one image")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--mask", help="ground-truth mask for the oracle detector")
    p.add_argument("--box", help="explicit box x1,y1,x2,y2; overrides the detector")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="2x2 grid over box prompts and calibration")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a command is required: gen-data, train, eval, predict or ablate")
        values = resolve(args)
        return args.func(values)
    except (UsageError, ConfigError, InfeasibleSpec) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, PGMError, CheckpointError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
