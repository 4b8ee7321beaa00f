"""``pumlc`` command-line front end.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 on a
numeric failure (non-finite training loss, failed gradient check).
Human-readable summaries go to stdout; CSV/JSON results go to the output
directory, which always receives a ``run_manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .container import ContainerError
from .datasets import (MaskSetting, MaskSpec, annotation_budget, apply_mask, format_stats,
                       generate_synthetic_images, generate_synthetic_vectors, label_stats,
                       load_dataset, save_dataset)
from .gradcheck import gradcheck, write_report
from .metrics import evaluate
from .tensor import NonFiniteError
from .trainer import (ConfigError, TrainConfig, TrainingDivergedError, config_hash, load_config,
                      load_model, sweep, train, write_history_csv, write_sweep_csv)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
SEED_ENV = "PUMLC_SEED"
MANIFEST_NAME = "run_manifest.json"

logger = logging.getLogger("pumlc")


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------- helpers
def resolve_seed(flag: Optional[int], config_seed: Optional[int] = None, default: int = 0) -> int:
    """Seed precedence: command-line flag, then $PUMLC_SEED, then the config."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(config_seed) if config_seed is not None else default


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise UsageError(f"--out {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(out: Path, command: str, args: dict, cfg_hash: Optional[str],
                   started: str) -> dict:
    """Record what produced ``out``; one manifest per output directory."""
    outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                     if p.is_file() and p.name != MANIFEST_NAME)
    key = json.dumps({"command": command, "args": args}, sort_keys=True, default=str)
    manifest = {
        "run_id": hashlib.sha256(key.encode()).hexdigest()[:16],
        "command": command,
        "args": args,
        "config_hash": cfg_hash,
        "version": __version__,
        "timestamps": {"started": started, "finished": _timestamp()},
        "outputs": outputs,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_with_seed(args) -> TrainConfig:
    config = load_config(args.config)
    return config.replace(seed=resolve_seed(args.seed, config.seed))


# ------------------------------------------------------------------ commands
def cmd_synth(args) -> dict:
    seed = resolve_seed(args.seed)
    if args.kind == "vectors":
        ds = generate_synthetic_vectors(args.n, args.dim, args.categories, seed, args.separation)
    else:
        ds = generate_synthetic_images(args.n, args.categories, args.hw, seed, args.channels)
    out = prepare_out(args.out, args.force)
    save_dataset(ds, out)
    print(f"{args.kind}: {ds.n_samples} samples, features {ds.features.shape[1:]}, "
          f"{ds.n_categories} categories -> {out}")
    print(format_stats(label_stats(ds), list(ds.category_names)))
    return {"out": out, "args": {"kind": args.kind, "n": args.n, "categories": args.categories,
                                 "seed": seed, "dim": args.dim, "separation": args.separation,
                                 "hw": args.hw, "channels": args.channels}}


def cmd_mask(args) -> dict:
    full = load_dataset(args.input)
    seed = resolve_seed(args.seed)
    spec = MaskSpec(MaskSetting(args.setting), args.ratio, seed)
    masked = apply_mask(full, spec)
    out = prepare_out(args.out, args.force)
    save_dataset(masked, out)
    before, after = label_stats(full), label_stats(masked)
    budget = None
    if spec.setting is MaskSetting.POSITIVE_ONLY:
        budget = annotation_budget(before.positives, before.negatives, spec.ratio)
    with open(out / "label_stats.csv", "w") as fh:
        fh.write("category,positive,negative,unknown\n")
        for name, p, q, u in zip(masked.category_names, after.positives, after.negatives, after.unknowns):
            fh.write(f"{name},{p},{q},{u}\n")
    print(f"{spec.setting.value} mask, ratio {spec.ratio:g}, seed {seed}")
    print(format_stats(after, list(masked.category_names), budget))
    return {"out": out, "args": {"input": str(args.input), **spec.to_dict()}}


def cmd_train(args) -> dict:
    config = _config_with_seed(args)
    data = load_dataset(args.data)
    if config.mask is None and data.mask is not None:
        config = config.replace(mask=data.mask)
    test = load_dataset(args.test) if args.test else None
    out = prepare_out(args.out, args.force)
    result = train(config, data, eval_dataset=test, checkpoint_dir=out / "checkpoint")
    write_history_csv(result.history, out / "history.csv")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"trained {config.epochs} epochs, final loss {result.history[-1]['total_loss']:.6f}")
    if test is not None:
        report = evaluate(result.model, test, args.threshold)
        ratio = data.mask.ratio if data.mask is not None else 1.0
        run_id = args.run_id or _default_run_id(data.setting.value, ratio, config.seed)
        _write_metrics(out / "metrics.csv", report, run_id, data.setting.value, ratio, config.seed)
        print(f"test mAP {report.map:.4f}  OF1 {report.of1:.4f}  CF1 {report.cf1:.4f}")
    return {"out": out, "config_hash": config_hash(config),
            "args": {"config": str(args.config), "data": str(args.data), "test": args.test,
                     "seed": config.seed, "threshold": args.threshold}}


def _default_run_id(setting: str, ratio: float, seed: int) -> str:
    return f"{setting}-r{ratio:g}-s{seed}"


def _write_metrics(path: Path, report, run_id: str, setting: str, ratio: float, seed: int) -> None:
    path.write_text(report.to_csv(run_id, setting, ratio, seed))


def cmd_eval(args) -> dict:
    model, config = load_model(args.checkpoint)
    data = load_dataset(args.data)
    out = prepare_out(args.out, args.force)
    report = evaluate(model, data, args.threshold)
    train_ratio = config.mask.ratio if config.mask is not None else 1.0
    setting = config.mask.setting.value if config.mask is not None else "pn"
    run_id = args.run_id or _default_run_id(setting, train_ratio, config.seed)
    _write_metrics(out / "metrics.csv", report, run_id, setting, train_ratio, config.seed)
    print(f"mAP {report.map:.4f}  OF1 {report.of1:.4f}  CF1 {report.cf1:.4f}")
    return {"out": out, "config_hash": config_hash(config),
            "args": {"checkpoint": str(args.checkpoint), "data": str(args.data),
                     "threshold": args.threshold}}


def cmd_gradcheck(args) -> dict:
    seed = resolve_seed(args.seed)
    out = prepare_out(args.out, args.force)
    entries = gradcheck({"points": args.points, "seed": seed, "tolerance": args.tolerance})
    write_report(entries, out / "gradcheck.csv")
    failed = [e for e in entries if not e.passed]
    worst = max(entries, key=lambda e: e.max_rel_error)
    print(f"{len(entries) - len(failed)}/{len(entries)} components pass "
          f"(worst {worst.component}: {worst.max_rel_error:.2e})")
    for e in failed:
        print(f"FAIL {e.component}: {e.max_rel_error:.2e}")
    return {"out": out, "failed": bool(failed),
            "args": {"points": args.points, "seed": seed, "tolerance": args.tolerance}}


def cmd_sweep(args) -> dict:
    base = _config_with_seed(args)
    full = load_dataset(args.data)
    test = load_dataset(args.test)
    out = prepare_out(args.out, args.force)
    seeds = args.seeds if args.seeds is not None else [base.seed]
    setting = MaskSetting(args.setting)
    rows = sweep(base, full, test, args.gammas, args.alphas, args.ratios, seeds, setting)
    write_sweep_csv(rows, full.n_categories, out / "sweep.csv", setting)
    for row in rows:
        status = f"mAP {row.report.map:.4f}" if row.report is not None else f"failed ({row.error})"
        print(f"{row.run_id}: {status}")
    return {"out": out, "config_hash": config_hash(base),
            "args": {"config": str(args.config), "data": str(args.data), "test": str(args.test),
                     "gammas": args.gammas, "alphas": args.alphas, "ratios": args.ratios,
                     "seeds": seeds, "setting": setting.value}}


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pumlc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help=f"random seed (overrides ${SEED_ENV} and the config)")

    p = sub.add_parser("synth", help="generate a synthetic multi-label dataset")
    p.add_argument("--kind", choices=("vectors", "images"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--dim", type=int, default=32, help="vector dimension")
    p.add_argument("--separation", type=float, default=8.0, help="signal-to-noise of vectors")
    p.add_argument("--hw", type=int, default=32, help="image height and width")
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="hide labels of a fully labeled dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--setting", choices=[m.value for m in MaskSetting], required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_mask)

    for name, func, help_ in (("train", cmd_train, "train a model from a JSON config"),
                              ("sweep", cmd_sweep, "grid of training runs to a CSV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True, help="training dataset directory")
        p.add_argument("--test", required=(name == "sweep"), help="test dataset directory")
        common(p)
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--threshold", type=float, default=0.5)
            p.add_argument("--run-id", default=None)
        else:
            p.add_argument("--gammas", type=_floats, default=[0.0, 0.5, 1.0, 2.0])
            p.add_argument("--alphas", type=_floats, default=[1.0])
            p.add_argument("--ratios", type=_floats, default=[0.1])
            p.add_argument("--seeds", type=_ints, default=None)
            p.add_argument("--setting", choices=[m.value for m in MaskSetting], default="pu",
                           help="label-availability setting of the training data")
            p.set_defaults(seeds=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--run-id", default=None)
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    started = _timestamp()
    func: Callable = args.func
    try:
        result = func(args)
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ContainerError, ValueError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    write_manifest(result["out"], args.command, result["args"], result.get("config_hash"), started)
    return EXIT_NUMERIC if result.get("failed") else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
