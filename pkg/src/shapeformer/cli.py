"""``shapeformer`` command-line interface.

Sub-commands::

    shapeformer discover --data TRAIN.ts --out runs/pool [--config cfg.json] [--npip-ratio R]
    shapeformer train    --data TRAIN.ts --pool runs/pool/pool.json --out runs/bm [--test TEST.ts] [--seed S]
    shapeformer eval     --model runs/bm/checkpoint --data TEST.ts [--pool pool.json] [--out DIR]
    shapeformer report   --run-dir runs/bm

Config files are flat JSON objects whose keys are ``TrainConfig`` fields;
command-line flags override them. Without a config, per-dataset defaults
(window, shapelets per class) are looked up by problem name in the shipped
defaults directory, which ``SHAPEFORMER_DEFAULTS_DIR`` may replace.

Exit codes: 0 success, 1 internal error, 2 input error, 3 artifact mismatch,
4 contract violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import Dataset, NormStats, normalize, parse_ts_file
from .discovery import discover, discovery_stats, load_pool, pool_from_dict, save_pool
from .errors import ArtifactMismatch, ContractViolation, InputError, ShapeFormerError
from .train import (RunReport, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint,
                    save_report)

log = logging.getLogger("shapeformer")

MANIFEST_NAME = "manifest.json"
DEFAULTS_ENV = "SHAPEFORMER_DEFAULTS_DIR"


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dataset_digest(ds: Dataset) -> str:
    """Content digest of the values, labels and class vocabulary."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
    h.update(json.dumps(list(ds.classes)).encode())
    return h.hexdigest()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return p


def _load_data(path, split=None) -> Dataset:
    return parse_ts_file(_require_file(path), split=split)


def defaults_dir() -> Path:
    env = os.environ.get(DEFAULTS_ENV)
    return Path(env) if env else Path(__file__).with_name("defaults")


def dataset_defaults(name: str) -> dict:
    """Per-dataset (window, shapelets_per_class) entry, or ``{}``."""
    folder = defaults_dir()
    if not folder.is_dir():
        raise InputError(f"defaults directory not found: {folder}")
    for f in sorted(folder.glob("*.json")):
        try:
            table = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{f}: not valid JSON ({exc})") from exc
        if name in table:
            return dict(table[name])
    return {}


def load_config(path, dataset_name: str = "", overrides: dict | None = None) -> TrainConfig:
    """Defaults, then per-dataset defaults, then the file, then flag overrides."""
    values = dataset_defaults(dataset_name) if dataset_name else {}
    if path is not None:
        p = _require_file(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{p}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise InputError(f"{p}: config must be a flat JSON object")
        values.update(doc)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise InputError(f"bad config: {exc}") from exc


def write_manifest(out: Path, command: str, argv: list[str], config: dict | None, data: dict,
                   artifacts: dict, started: str, seed=None, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "config": config,
        "data": data,
        "out": str(out),
        "seed": seed,
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra or {})
    path = out / MANIFEST_NAME
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_discover(args) -> int:
    started = _now()
    raw = _load_data(args.data)
    config = load_config(args.config, raw.name, {"npip_ratio": args.npip_ratio,
                                                 "shapelets_per_class": args.shapelets_per_class,
                                                 "n_jobs": args.jobs})
    data, stats = normalize(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = discover(data, config.shapelets_per_class, npip_ratio=config.npip_ratio, n_jobs=config.n_jobs)
    pool.discovery_config["data_sha256"] = dataset_digest(raw)
    pool.discovery_config["norm"] = stats.to_dict()
    digest = save_pool(pool, out / "pool.json")
    (out / "discovery_stats.json").write_text(json.dumps(discovery_stats(pool), indent=1), encoding="utf-8")
    write_manifest(out, "discover", sys.argv[:1] + args.argv, config.to_dict(),
                   {"train": {"path": str(args.data), "sha256": file_sha256(args.data)}},
                   {"pool.json": digest, "discovery_stats.json": file_sha256(out / "discovery_stats.json")},
                   started, seed=None)
    print(f"discovered {len(pool)} shapelets ({', '.join(f'{c}: {n}' for c, n in pool.per_class().items())})")
    print(f"pool digest {digest}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    raw = _load_data(args.data)
    pool = load_pool(_require_file(args.pool))
    expected = pool.discovery_config.get("data_sha256")
    if expected is not None and expected != dataset_digest(raw):
        raise ArtifactMismatch(f"pool {args.pool} was discovered on different data than {args.data}")
    if tuple(pool.classes) != tuple(raw.classes):
        raise ContractViolation(
            f"class vocabulary mismatch: pool {list(pool.classes)} vs data {list(raw.classes)}")
    config = load_config(args.config, raw.name, {"seed": args.seed, "epochs": args.epochs,
                                                 "n_jobs": args.jobs})
    data, stats = normalize(raw)
    test = None
    if args.test:
        test, _ = normalize(_load_data(args.test, split="test"), stats)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, report = fit(data, config, pool, test=test)

    ckpt_meta = {"norm": stats.to_dict(), "train_config": config.to_dict(), "pool": pool.to_dict()}
    ckpt_digest = save_checkpoint(out / "checkpoint", model, meta=ckpt_meta)
    save_report(report, out / "report.json")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for i, loss in enumerate(report.train_loss):
            row = {"epoch": i + 1, "train_loss": loss}
            if i < len(report.val_accuracy):
                row["val_accuracy"] = report.val_accuracy[i]
            fh.write(json.dumps(row) + "\n")
    data_paths = {"train": {"path": str(args.data), "sha256": file_sha256(args.data)},
                  "pool": {"path": str(args.pool), "sha256": pool.digest()}}
    if args.test:
        data_paths["test"] = {"path": str(args.test), "sha256": file_sha256(args.test)}
    write_manifest(out, "train", sys.argv[:1] + args.argv, config.to_dict(), data_paths,
                   {"checkpoint": ckpt_digest, "report.json": file_sha256(out / "report.json"),
                    "metrics.jsonl": file_sha256(out / "metrics.jsonl")},
                   started, seed=config.seed)
    print(f"best epoch {report.best_epoch} (val accuracy {report.best_val_accuracy:.4f})")
    if report.test_accuracy is not None:
        print(f"test accuracy {report.test_accuracy:.4f}")
    print(f"checkpoint digest {ckpt_digest}")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    ckpt = _require_file(args.model)
    from .autodiff import load_arrays
    _, meta = load_arrays(ckpt)
    if args.pool:
        pool = load_pool(_require_file(args.pool))
    elif "pool" in meta:
        pool = pool_from_dict(meta["pool"])
    else:
        raise InputError(f"{ckpt}: no embedded pool; pass --pool")
    model, meta, _ = load_checkpoint(ckpt, pool)
    raw = _load_data(args.data)
    data = raw
    if "norm" in meta:
        data, _ = normalize(raw, NormStats.from_dict(meta["norm"]))
    result = evaluate(model, data)

    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result.to_dict(), indent=1), encoding="utf-8")
    with open(out / "confusion.csv", "w", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(result.classes) + "\n")
        for c, row in zip(result.classes, result.confusion):
            fh.write(c + "," + ",".join(str(int(v)) for v in row) + "\n")
    write_manifest(out, "eval", sys.argv[:1] + args.argv, meta.get("train_config"),
                   {"data": {"path": str(args.data), "sha256": file_sha256(args.data)},
                    "model": {"path": str(ckpt), "sha256": file_sha256(ckpt / "manifest.json")}},
                   {"eval.json": file_sha256(out / "eval.json"),
                    "confusion.csv": file_sha256(out / "confusion.csv")},
                   started, seed=(meta.get("train_config") or {}).get("seed"))
    print(f"accuracy {result.accuracy:.4f}")
    for c, a in result.per_class_accuracy.items():
        print(f"  {c}: {a:.4f}")
    return 0


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run_dir)
    report_path = _require_file(run / "report.json")
    try:
        report = RunReport.from_dict(json.loads(report_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"{report_path}: malformed run report ({exc})") from exc

    fig, ax1 = plt.subplots(figsize=(7, 4))
    epochs = np.arange(1, len(report.train_loss) + 1)
    ax1.plot(epochs, report.train_loss, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    if report.val_accuracy:
        ax2 = ax1.twinx()
        ax2.plot(epochs[:len(report.val_accuracy)], report.val_accuracy, color="tab:orange",
                 label="val accuracy")
        ax2.set_ylabel("val accuracy")
        ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(run / "curves.png", dpi=100)
    plt.close(fig)

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"

    name = report.config.get("name") or run.name
    lines = [
        f"{'run':<24}{'seed':>6}{'epochs':>8}{'best':>6}{'val acc':>10}{'test acc':>10}{'time (s)':>10}",
        f"{name:<24}{report.seed:>6}{report.epochs_run:>8}{report.best_epoch:>6}"
        f"{fmt(report.best_val_accuracy):>10}{fmt(report.test_accuracy):>10}{report.wall_clock:>10.1f}",
        "",
        f"pool digest: {report.pool_digest}",
    ]
    (run / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    manifest_path = run / MANIFEST_NAME
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest.setdefault("artifacts", {}).update({
            "curves.png": file_sha256(run / "curves.png"),
            "summary.txt": file_sha256(run / "summary.txt")})
        manifest["report_generated"] = _now()
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapeformer", description="Shapelet transformer for time-series classification")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    jobs_default = os.cpu_count() or 1

    d = sub.add_parser("discover", help="extract and select shapelets")
    d.add_argument("--data", required=True, help="training data (.ts or .csv)")
    d.add_argument("--config", help="flat JSON config")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--npip-ratio", type=float, dest="npip_ratio")
    d.add_argument("--shapelets-per-class", type=int, dest="shapelets_per_class")
    d.add_argument("--jobs", type=int, default=jobs_default)
    d.set_defaults(func=cmd_discover)

    t = sub.add_parser("train", help="train a model on a discovered pool")
    t.add_argument("--data", required=True)
    t.add_argument("--pool", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--test", help="optional test split, evaluated once after training")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--jobs", type=int, default=jobs_default)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True)
    e.add_argument("--pool", help="pool file (defaults to the one embedded in the checkpoint)")
    e.add_argument("--out", help="output directory (default: <checkpoint>/../eval)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render curves and a summary for a run directory")
    r.add_argument("--run-dir", required=True, dest="run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ShapeFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return InputError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
