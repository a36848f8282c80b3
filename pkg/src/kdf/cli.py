"""``kdf`` command line: stats, train, distill, eval, bench, inspect and sweep.

Exit codes: 0 success, 2 usage or data error, 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__, configfile, data, metrics, zoo
from .configfile import ConfigError
from .distill import DistillConfig
from .train import NumericalError, TrainConfig, fit

log = logging.getLogger("kdf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# Synthetic blob split sizes (per class) and their generator seeds.
TOY_SPLITS = {"train": (20, 0), "val": (10, 1), "test": (20, 2)}


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    format: str = "toy"
    val_fraction: float = 0.1
    toy_spread: float = 0.15


# -- config resolution -----------------------------------------------------------

def _flag_overrides(args, names) -> dict[str, str]:
    out = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = configfile.format_value(value)
    return out


def resolve(args) -> dict:
    """Merge defaults, the --config file and explicit flags (flags win)."""
    values = configfile.read(args.config) if getattr(args, "config", None) else {}
    problems = [f"unknown section in key {k!r} (use model., train., distill. or data.)"
                for k in values if k.split(".", 1)[0] not in ("model", "train", "distill", "data")]

    model_vals = configfile.section(values, "model.")
    name = getattr(args, "model", None) or model_vals.pop("preset", None) or "student_c"
    model_vals.pop("preset", None)
    model_cfg = None
    try:
        model_cfg, bad = configfile.build_lenient(zoo.ModelConfig, model_vals, zoo.preset(name))
        problems += bad
    except KeyError as exc:
        problems.append(exc.args[0])
    sections = [
        ("train_cfg", TrainConfig, "train.", [f.name for f in dataclasses.fields(TrainConfig)]),
        ("distill_cfg", DistillConfig, "distill.", ["temperature", "alpha", "hard_weight"]),
        ("data_cfg", DataConfig, "data.", []),
    ]
    built = {}
    for key, cls, prefix, flags in sections:
        merged = configfile.section(values, prefix)
        merged.update(_flag_overrides(args, flags))
        if key == "data_cfg":
            if getattr(args, "data", None):
                merged["path"] = args.data
            if getattr(args, "format", None):
                merged["format"] = args.format
        built[key], bad = configfile.build_lenient(cls, merged)
        problems += bad
    train_cfg, distill_cfg, data_cfg = built["train_cfg"], built["distill_cfg"], built["data_cfg"]
    for cfg in (model_cfg, train_cfg, distill_cfg):
        if cfg is None:
            continue
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
    if data_cfg is not None and data_cfg.format not in ("csv", "folder", "toy"):
        problems.append(f"data format must be csv, folder or toy, got {data_cfg.format!r}")
    if problems:
        raise ConfigError(problems)
    return {"model": model_cfg, "train": train_cfg, "distill": distill_cfg, "data": data_cfg}


def config_text(resolved: dict) -> str:
    parts = []
    for key in ("model", "train", "distill", "data"):
        if resolved.get(key) is not None:
            parts.append(configfile.dump(resolved[key], key + "."))
    return "".join(parts)


# -- data --------------------------------------------------------------------------

def _check_path(path):
    if path is None:
        raise UsageError("--data is required for csv and folder formats")
    if not Path(path).exists():
        raise UsageError(f"data path not found: {path}")


def load_splits(data_cfg: DataConfig, input_shape, seed: int) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Return train/val/test arrays sized for ``input_shape``."""
    if data_cfg.format == "toy":
        out = {}
        for split, (per_class, s) in TOY_SPLITS.items():
            out[split] = data.synthetic_blobs(per_class, tuple(input_shape), spread=data_cfg.toy_spread, seed=s)
        return out
    _check_path(data_cfg.path)
    channels, h, w = input_shape
    ds = data.load(data_cfg.path, data_cfg.format, channels, (h, w))
    names = ds.split_names()
    if "Training" not in names:
        raise data.DataFormatError(f"{data_cfg.path}: no Training split")
    train = ds.split("Training")
    if "PublicTest" in names:
        val = ds.split("PublicTest")
    else:
        train, val = train.train_val_split(data_cfg.val_fraction, seed)
    test_name = next((n for n in ("PrivateTest", "Test") if n in names), None)
    test = ds.split(test_name) if test_name else val
    return {k: (v.images, v.labels) for k, v in (("train", train), ("val", val), ("test", test))}


def _train_weights(labels, cfg: TrainConfig):
    if cfg.class_weighting == "uniform":
        return None
    stats = data.DatasetStats.from_labels(labels, ["Training"] * len(labels))
    return data.class_weights(stats, "Training")


def fingerprint(path) -> dict[str, str]:
    if path is None:
        return {}
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    out = {}
    for p in files:
        out[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


# -- outputs -----------------------------------------------------------------------

def write_manifest(out: Path, command: str, resolved: dict, inputs: dict, seconds: float, extra=None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": resolved["train"].seed if resolved.get("train") else None,
        "config": {k: dataclasses.asdict(v) for k, v in resolved.items() if v is not None},
        "config_text": config_text(resolved),
        "inputs": inputs,
        "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"},
        "seconds": round(seconds, 3),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=float) + "\n")


def _out_dir(args) -> Path | None:
    if getattr(args, "out", None) is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------------

def cmd_stats(args) -> int:
    if args.format == "table":
        stats = data.DatasetStats.from_table(data.FER2013_DISTRIBUTION)
    else:
        _check_path(args.data)
        stats = data.load(args.data, args.format, 1, (data.FER_SIDE, data.FER_SIDE)).stats()
    for w in stats.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps(stats.to_json(), indent=2))
    out = _out_dir(args)
    if out:
        started = time.perf_counter()
        _write_json(out / "report.json", stats.to_json())
        (out / "report.csv").write_text(stats.to_csv())
        write_manifest(out, "stats", {}, fingerprint(args.data), time.perf_counter() - started,
                       {"config": {"data": {"path": args.data, "format": args.format}}})
    return EXIT_OK


def _run_training(args, resolved, teacher=None, distill_cfg=None, out: Path | None = None):
    model_cfg, train_cfg = resolved["model"], resolved["train"]
    splits = load_splits(resolved["data"], model_cfg.input_shape, train_cfg.seed)
    (xt, yt), (xv, yv), (xs, ys) = splits["train"], splits["val"], splits["test"]
    model = zoo.build(model_cfg, seed=train_cfg.seed)
    ckpt = out / "model.ckpt" if out else None
    report = fit(model, xt, yt, train_cfg, val_images=xv, val_labels=yv, teacher=teacher,
                 distill_cfg=distill_cfg, class_weights=_train_weights(yt, train_cfg), checkpoint_path=ckpt,
                 on_epoch=lambda r: log.info("epoch %d loss %.5f val_acc %s", r.epoch, r.train_loss,
                                             r.val_accuracy))
    best = zoo.load(ckpt) if ckpt and ckpt.exists() else model
    test = metrics.evaluate(best, xs, ys)
    return report, test


def _load_teacher(path, resolved):
    teacher = zoo.load(path)
    if teacher.config.input_shape != resolved["model"].input_shape:
        raise UsageError(f"teacher input {teacher.config.input_shape} differs from student input "
                         f"{resolved['model'].input_shape}")
    return teacher


def _train_like(args, distill: bool) -> int:
    resolved = resolve(args)
    teacher = None
    if distill:
        if not args.teacher:
            raise UsageError("distill needs --teacher <checkpoint>")
        if not Path(args.teacher).exists():
            raise UsageError(f"teacher checkpoint not found: {args.teacher}")
        teacher = _load_teacher(args.teacher, resolved)
    else:
        resolved["distill"] = None
    out = _out_dir(args)
    started = time.perf_counter()
    report, test = _run_training(args, resolved, teacher, resolved["distill"], out)
    summary = {"best_epoch": report.best_epoch, "test_accuracy": test.accuracy,
               "final_train_loss": report.losses[-1] if report.epochs else None}
    if out:
        payload = report.to_json(timing=False)
        payload["checkpoint"] = "model.ckpt" if report.checkpoint else None
        payload["test"] = test.to_json()
        _write_json(out / "report.json", payload)
        (out / "report.csv").write_text(report.to_csv(timing=False))
        inputs = fingerprint(resolved["data"].path) | (fingerprint(args.teacher) if distill else {})
        write_manifest(out, "distill" if distill else "train", resolved, inputs, time.perf_counter() - started,
                       {"epoch_seconds": [round(e.seconds, 4) for e in report.epochs]})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_like(args, distill=False)


def cmd_distill(args) -> int:
    return _train_like(args, distill=True)


def _load_model(spec: str, init: bool = True) -> zoo.Model:
    """A checkpoint path or a preset name."""
    path = Path(spec)
    if path.is_file():
        return zoo.load(path)
    try:
        return zoo.build(zoo.preset(spec), init=init)
    except KeyError:
        raise UsageError(f"{spec!r} is neither a checkpoint file nor a preset ({', '.join(zoo.PRESETS)})") from None


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = zoo.load(args.checkpoint)
    data_cfg = DataConfig(path=args.data, format=args.format)
    splits = load_splits(data_cfg, model.config.input_shape, args.seed)
    images, labels = splits[args.split]
    result = metrics.evaluate(model, images, labels)
    print(f"accuracy {result.accuracy:.2f}% on {result.confusion.total} samples")
    out = _out_dir(args)
    if out:
        started = time.perf_counter()
        _write_json(out / "report.json", result.to_json())
        (out / "report.csv").write_text(result.confusion.to_csv())
        write_manifest(out, "eval", {}, fingerprint(args.data) | fingerprint(args.checkpoint),
                       time.perf_counter() - started,
                       {"config": {"data": dataclasses.asdict(data_cfg), "split": args.split}})
    return EXIT_OK


def cmd_bench(args) -> int:
    threads = args.threads or _env_threads() or 1
    reports = []
    for spec in args.models:
        model = _load_model(spec)
        name = Path(spec).stem if Path(spec).is_file() else model.config.name
        if args.runs:
            reports.append(metrics.benchmark(model, name, args.warmup, args.runs, threads))
        else:
            count = zoo.total_parameters(model)
            size = zoo.model_size(count)
            reports.append(metrics.BenchReport(name, count.trainable, size.bytes, size.mib,
                                               memory=metrics.memory_report(model)))
    if len(reports) > 1:
        table = metrics.compare(reports)
        print(table.to_text(), end="")
    else:
        table = None
        print(json.dumps(reports[0].to_json(), indent=2))
    out = _out_dir(args)
    if out:
        started = time.perf_counter()
        _write_json(out / "report.json", {"models": [r.to_json() for r in reports],
                                          "comparison": table.to_json() if table else None})
        (out / "report.csv").write_text(table.to_csv() if table else "")
        write_manifest(out, "bench", {}, {}, time.perf_counter() - started,
                       {"config": {"models": args.models, "runs": args.runs, "warmup": args.warmup,
                                   "threads": threads}})
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_model(args.model, init=False)
    report = zoo.inspect(model, args.reference)
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(report.to_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    resolved = resolve(args)
    if not args.teacher or not Path(args.teacher).is_file():
        raise UsageError("sweep needs --teacher <checkpoint>")
    teacher = _load_teacher(args.teacher, resolved)
    base = resolved["distill"]
    rows = []
    started = time.perf_counter()
    for t in args.temperatures:
        for a in args.alphas:
            cfg = dataclasses.replace(base, temperature=t, alpha=a).validate()
            report, test = _run_training(args, resolved, teacher, cfg)
            best = report.epochs[report.best_epoch - 1] if report.best_epoch else None
            rows.append({"temperature": t, "alpha": a, "best_epoch": report.best_epoch,
                         "val_accuracy": best.val_accuracy if best else None, "test_accuracy": test.accuracy})
            print(f"T={t:g} alpha={a:.2f} test accuracy {test.accuracy:.2f}%")
    out = _out_dir(args)
    if out:
        _write_json(out / "report.json", {"rows": rows})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        (out / "report.csv").write_text(buf.getvalue())
        write_manifest(out, "sweep", resolved, fingerprint(resolved["data"].path) | fingerprint(args.teacher),
                       time.perf_counter() - started,
                       {"grid": {"temperatures": args.temperatures, "alphas": args.alphas}})
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data(p, formats=("csv", "folder", "toy")):
    p.add_argument("--data", help="FER2013 CSV file or train/test image folder")
    p.add_argument("--format", choices=formats,
                   help="dataset layout; toy = synthetic separable blobs (convention: default toy)")


def _add_training(p, distill: bool):
    d = TrainConfig()
    p.add_argument("--config", help="flat key = value file with model./train./distill./data. keys; flags override it")
    p.add_argument("--model", help="preset name: resemotenet, student_a/b/c, toy_teacher, toy_student "
                                    "(default student_c)")
    _add_data(p)
    p.add_argument("--out", help="output directory for report.json, report.csv, model.ckpt, manifest.json")
    p.add_argument("--epochs", type=int, help=f"default {d.epochs}, published training regimen")
    p.add_argument("--batch-size", dest="batch_size", type=int, help=f"default {d.batch_size}, published training regimen")
    p.add_argument("--lr", type=float, help=f"initial SGD learning rate, default {d.lr:g}, published training regimen")
    p.add_argument("--momentum", type=float, help=f"default {d.momentum}, published training regimen")
    p.add_argument("--plateau-factor", dest="plateau_factor", type=float,
                   help=f"lr decay factor, default {d.plateau_factor}, published training regimen")
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int,
                   help=f"flat epochs before decay, default {d.plateau_patience}, published training regimen")
    p.add_argument("--plateau-threshold", dest="plateau_threshold", type=float,
                   help=f"absolute improvement threshold, default {d.plateau_threshold:g}, framework convention")
    p.add_argument("--min-lr", dest="min_lr", type=float, help=f"default {d.min_lr:g}, convention")
    p.add_argument("--flip-prob", dest="flip_prob", type=float,
                   help=f"horizontal flip probability, default {d.flip_prob}, convention (flip augmentation is published)")
    p.add_argument("--class-weighting", dest="class_weighting", choices=("inverse_frequency", "uniform"),
                   help="default inverse_frequency, published imbalance handling")
    p.add_argument("--seed", type=int, help="default 0, convention")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded, seeded run (default on, convention)")
    if distill:
        dd = DistillConfig()
        p.add_argument("--teacher", help="frozen teacher checkpoint (required)")
        p.add_argument("--temperature", type=float,
                       help=f"softmax temperature, default {dd.temperature:g}, best published setting")
        p.add_argument("--alpha", type=float, help=f"distillation weight, default {dd.alpha}, best published setting")
        p.add_argument("--hard-weight", dest="hard_weight", type=float,
                       help="cross-entropy weight, default 1 - alpha, convention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdf", description="Distill facial-expression CNNs into smaller students.")
    parser.add_argument("--version", action="version", version=f"kdf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-class counts of a dataset")
    _add_data(p, ("csv", "folder", "table"))
    p.set_defaults(format="csv")
    p.add_argument("--out", help="also write report.json/report.csv/manifest.json here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model with hard labels")
    _add_training(p, distill=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_training(p, distill=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.set_defaults(format="toy")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0, help="split seed when no validation split exists, convention")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="size, memory and batch-1 latency; compares models against the first")
    p.add_argument("models", nargs="+", help="preset names or checkpoint files; the first is the baseline")
    p.add_argument("--runs", type=int, default=100, help="timed forwards, default 100; 0 skips latency (convention)")
    p.add_argument("--warmup", type=int, default=20, help="discarded forwards, default 20, convention")
    p.add_argument("--threads", type=int, help="BLAS threads, default KDF_THREADS or 1, convention")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="per-layer shapes and parameter counts with a reference checksum")
    p.add_argument("model", help="preset name or checkpoint file")
    p.add_argument("--reference", type=int, help="expected trainable total (defaults to the published one)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="distill over a temperature x alpha grid")
    _add_training(p, distill=True)
    p.add_argument("--temperatures", type=_floats, default=[1.0, 2.0, 3.0, 4.0, 5.0],
                   help="default 1,2,3,4,5, published grid")
    p.add_argument("--alphas", type=_floats, default=[0.10, 0.15, 0.20], help="default 0.10,0.15,0.20, published grid")
    p.set_defaults(func=cmd_sweep)
    return parser


def _env_threads() -> int | None:
    value = os.environ.get("KDF_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"KDF_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"KDF_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _env_threads()
        if threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(threads)
        else:
            limiter = nullcontext()
        with limiter:
            return args.func(args)
    except NumericalError as exc:
        print(f"kdf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"kdf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, data.DataFormatError, zoo.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"kdf: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
