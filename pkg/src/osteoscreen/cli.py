"""``osteoscreen`` command line: synth, loocv, train, eval, gradcheck.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long option names (dashes or underscores). Explicit flags win
over the file. The effective settings are written next to the outputs as
``<command>_config.txt``; passing that file back via ``--config`` repeats
the run.

Exit codes: 0 success, 1 gradient check failed, 2 usage or invalid
setting, 3 I/O or data error, 4 numeric abort, 5 checkpoint error.
Set ``OSTEOSCREEN_VERBOSE=1`` for progress logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import read_kv, write_kv
from .data import PhantomSpec, generate_phantoms, load_dataset, write_dataset
from .errors import CheckpointError, FoldAbort, InputError, NumericError, ParseError
from .harness import METHODS, Hyperparams, LoocvResult, compute_metrics, evaluate, run_loocv, summary_text, train_fold, write_folds_csv
from .network import TINY, BackboneConfig, ConvStage, Mode, ModelParams, forward_logits, init_params
from .tensor_core import FLOAT64, grad_check, make_rng, ops, precision

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

log = logging.getLogger("osteoscreen")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _load(path, crop_side: int, side: int):
    try:
        return load_dataset(path, crop_side, side)
    except InputError as exc:
        raise DataError(str(exc)) from exc


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"must lie in [0, 1], got {v}")
    return v


def _optional_pair(text: str):
    if str(text).strip().lower() in ("", "none", "off"):
        return None
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated weights")
    return tuple(parts)


@dataclass(frozen=True)
class Opt:
    name: str  # long option without dashes, e.g. "n-per-class"
    convert: Callable
    default: object
    help: str
    choices: tuple | None = None

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


def _hp_opts() -> list[Opt]:
    hp = Hyperparams()
    return [
        Opt("lr-backbone", float, hp.lr_backbone, "learning rate of the shared backbone"),
        Opt("lr-head", float, hp.lr_head, "learning rate of group, attention and classifier layers"),
        Opt("momentum", float, hp.momentum, "SGD momentum"),
        Opt("weight-decay", float, hp.weight_decay, "L2 weight decay"),
        Opt("batch-size", int, hp.batch_size, "subjects per SGD step"),
        Opt("epochs", int, hp.epochs, "training epochs"),
        Opt("seed", int, hp.seed, "global seed"),
        Opt("class-weights", _optional_pair, None, "loss weights 'w_op,w_normal' or 'none'"),
        Opt("augment", _bool, hp.augment, "random stretch/flip during training"),
        Opt("knn-k", int, hp.knn_k, "neighbours for the knn baseline"),
        Opt("ensemble-size", int, hp.ensemble_size, "stumps in the ensemble baseline"),
    ]


_MODEL_OPTS = [
    Opt("preset", str, "default", "model size preset", ("default", "tiny")),
    Opt("input-side", int, None, "patch side fed to the backbone (default: preset)"),
    Opt("feature-dim", int, None, "backbone output width (default: preset)"),
    Opt("stages", str, None, "conv stages 'out:k:stride:pad:pool,...' (default: preset)"),
    Opt("crop-side", int, 100, "square crop side around each landmark, in pixels"),
]

COMMANDS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", Path, None, "output directory"),
        Opt("n-per-class", int, 20, "phantoms per class"),
        Opt("delta", _unit_interval, 1.0, "class separability in [0, 1]"),
        Opt("seed", int, 0, "phantom seed"),
        Opt("height", int, 160, "image height"),
        Opt("width", int, 320, "image width"),
    ],
    "loocv": [
        Opt("data", Path, None, "annotation file or dataset directory"),
        Opt("out", Path, None, "output directory for folds.csv and summary.txt"),
        Opt("mode", str, "attention", "method to evaluate", METHODS),
        Opt("jobs", int, 1, "folds run concurrently"),
        Opt("save-checkpoints", _bool, False, "keep each fold's trained parameters"),
        *_hp_opts(),
        *_MODEL_OPTS,
    ],
    "train": [
        Opt("data", Path, None, "annotation file or dataset directory"),
        Opt("checkpoint", Path, None, "checkpoint path to write"),
        Opt("mode", str, "attention", "network variant", ("attention", "no-attention")),
        *_hp_opts(),
        *_MODEL_OPTS,
    ],
    "eval": [
        Opt("data", Path, None, "annotation file or dataset directory"),
        Opt("checkpoint", Path, None, "checkpoint written by train"),
        Opt("out", Path, None, "predictions CSV"),
        Opt("mode", str, None, "network variant (default: the checkpoint's)", ("attention", "no-attention")),
        Opt("crop-side", int, 100, "square crop side around each landmark, in pixels"),
    ],
    "gradcheck": [
        Opt("mode", str, "both", "network variant(s) to check", ("attention", "no-attention", "both")),
        Opt("tolerance", float, 1e-4, "maximum relative error"),
        Opt("seed", int, 0, "seed for weights, inputs and coordinate sampling"),
        Opt("batch", int, 2, "subjects in the probe batch"),
        Opt("max-coords", int, 32, "coordinates checked per parameter"),
        Opt("preset", str, "tiny", "model size preset", ("default", "tiny")),
    ],
}

REQUIRED = {"synth": ("out",), "loocv": ("data", "out"), "train": ("data", "checkpoint"), "eval": ("data", "checkpoint", "out")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osteoscreen", description="Multi-patch osteoporosis screening experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", type=Path, help="key = value file; flags override it")
        for o in opts:
            default = "" if o.default is None else f" (default: {o.default})"
            p.add_argument(f"--{o.name}", dest=o.key, default=None, choices=o.choices, metavar=o.key.upper() if o.choices is None else None,
                           help=o.help + default)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, object]:
    """Merge defaults, the ``--config`` file and explicit flags, converting every value."""
    opts = {o.key: o for o in COMMANDS[command]}
    raw: dict[str, object] = {}
    if args.config is not None:
        try:
            from_file = read_kv(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in from_file.items():
            k = key.replace("-", "_")
            if k not in opts:
                raise UsageError(f"{args.config}: unknown setting {key!r} for {command}")
            raw[k] = value
    for k in opts:
        flag = getattr(args, k)
        if flag is not None:
            raw[k] = flag
    values = {}
    for k, o in opts.items():
        if k not in raw:
            values[k] = o.default
            continue
        text = raw[k]
        if o.choices and text not in o.choices:
            raise UsageError(f"--{o.name}: {text!r} is not one of {', '.join(o.choices)}")
        try:
            values[k] = o.convert(text)
        except ValueError as exc:
            raise UsageError(f"--{o.name}: {exc}") from exc
    missing = [f"--{opts[k].name}" for k in REQUIRED.get(command, ()) if values[k] is None]
    if missing:
        raise UsageError(f"{command} requires {', '.join(missing)}")
    return values


def _echo(path: Path, command: str, values: dict[str, object]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return str(v)

    write_kv(path, {k: fmt(v) for k, v in values.items() if v is not None or k == "class_weights"},
             header=f"effective settings for `osteoscreen {command}`")


def _hyperparams(v: dict) -> Hyperparams:
    return Hyperparams(
        lr_backbone=v["lr_backbone"], lr_head=v["lr_head"], momentum=v["momentum"], weight_decay=v["weight_decay"],
        batch_size=v["batch_size"], epochs=v["epochs"], seed=v["seed"], class_weights=v["class_weights"],
        augment=v["augment"], knn_k=v["knn_k"], ensemble_size=v["ensemble_size"],
    )


def _model_config(v: dict) -> BackboneConfig:
    base = TINY if v["preset"] == "tiny" else BackboneConfig()
    stages = base.stages if v.get("stages") is None else tuple(ConvStage.parse(s) for s in v["stages"].split(","))
    return BackboneConfig(
        input_side=base.input_side if v.get("input_side") is None else v["input_side"],
        stages=stages,
        feature_dim=base.feature_dim if v.get("feature_dim") is None else v["feature_dim"],
    )


# ---------------------------------------------------------------- commands


def cmd_synth(v: dict) -> int:
    if v["n_per_class"] < 1:
        raise UsageError("--n-per-class must be >= 1")
    spec = PhantomSpec(seed=v["seed"], height=v["height"], width=v["width"], delta=v["delta"])
    out = v["out"]
    ann = write_dataset(out, generate_phantoms(spec, v["n_per_class"]))
    _echo(out / "synth_config.txt", "synth", v)
    print(f"wrote {2 * v['n_per_class']} phantoms and {ann}")
    return EXIT_OK


def cmd_loocv(v: dict) -> int:
    config = _model_config(v)
    hp = _hyperparams(v)
    if v["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    samples = _load(v["data"], v["crop_side"], config.input_side)
    out = v["out"]
    _echo(out / "loocv_config.txt", "loocv", v)
    ckpt = out / "checkpoints" if v["save_checkpoints"] else None
    log.info("loocv: %d samples, method %s, %d job(s)", len(samples), v["mode"], v["jobs"])
    result = run_loocv(samples, hp, v["mode"], config, jobs=v["jobs"], out_dir=out, checkpoint_dir=ckpt)
    sys.stdout.write(summary_text(result))
    return EXIT_NUMERIC if result.partial else EXIT_OK


def cmd_train(v: dict) -> int:
    config = _model_config(v)
    hp = _hyperparams(v)
    samples = _load(v["data"], v["crop_side"], config.input_side)
    result = train_fold(samples, hp, v["mode"], config)
    path = v["checkpoint"]
    path.parent.mkdir(parents=True, exist_ok=True)
    result.params.save(path)
    _echo(path.with_name(path.name + ".train_config.txt"), "train", v)
    losses = path.with_name(path.name + ".losses.txt")
    losses.write_text("".join(f"{x:.8g}\n" for x in result.losses), encoding="utf-8")
    print(f"trained on {len(samples)} samples; training accuracy {result.train_accuracy:.4f}; wrote {path}")
    return EXIT_OK


def cmd_eval(v: dict) -> int:
    params = ModelParams.load(v["checkpoint"])
    mode = v["mode"] or params.mode.value
    samples = _load(v["data"], v["crop_side"], params.config.input_side)
    reports = evaluate(params, samples, mode)
    out = v["out"]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_folds_csv(out, reports)
    _echo(out.with_name(out.name + ".eval_config.txt"), "eval", v)
    acc = np.mean([r.correct for r in reports]) if reports else float("nan")
    sys.stdout.write(summary_text(LoocvResult(f"eval/{mode}", reports, compute_metrics(reports) if reports else None)))
    print(f"accuracy {acc:.4f} over {len(reports)} samples; wrote {out}")
    return EXIT_OK


def cmd_gradcheck(v: dict) -> int:
    if v["tolerance"] <= 0:
        raise UsageError("--tolerance must be positive")
    config = TINY if v["preset"] == "tiny" else BackboneConfig()
    modes = [Mode.ATTENTION, Mode.NO_ATTENTION] if v["mode"] == "both" else [Mode(v["mode"])]
    passed = True
    with precision(FLOAT64):
        for mode in modes:
            params = init_params(config, make_rng(v["seed"], 0), mode, FLOAT64)
            # non-zero head weights so every attention path carries gradient
            rng = make_rng(v["seed"], 1)
            for name, t in params.items():
                if not name.startswith("backbone."):
                    t.data[...] = rng.normal(scale=0.2, size=t.shape)
            x = make_rng(v["seed"], 2).uniform(0, 1, size=(v["batch"], 8, config.input_side, config.input_side))
            labels = np.arange(v["batch"]) % 2
            report = grad_check(
                lambda: ops.cross_entropy(forward_logits(x, params, mode)[0], labels),
                params.tensors,
                tolerance=v["tolerance"],
                abs_tolerance=min(1e-6, v["tolerance"]),
                max_coords=v["max_coords"],
                seed=v["seed"],
            )
            print(f"[{mode.value}] {report.summary()}")
            passed &= report.passed
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_GRADCHECK


HANDLERS = {"synth": cmd_synth, "loocv": cmd_loocv, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO if os.environ.get("OSTEOSCREEN_VERBOSE") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = resolve(args.command, args)
        return HANDLERS[args.command](values)
    except (UsageError, InputError) as exc:
        print(f"osteoscreen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"osteoscreen {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FoldAbort, NumericError) as exc:
        print(f"osteoscreen {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, DataError) as exc:
        print(f"osteoscreen {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
