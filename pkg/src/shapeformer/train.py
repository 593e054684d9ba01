"""Training loop, evaluation, window tuning and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import RAdam, checkpoint_digest, load_arrays, no_grad, save_arrays
from .autodiff import ops as F
from .data_io import Dataset, NormStats, normalize, split_train_val
from .discovery import (ShapeletPool, default_npip, discover, extract_candidates, score_candidates)
from .errors import ArtifactMismatch, ContractViolation, InputError
from .model import ModelConfig, ShapeFormer

log = logging.getLogger(__name__)

WINDOW_CHOICES = (10, 20, 50, 100, 200)
SHAPELET_CHOICES = (1, 3, 10, 30, 100)


@dataclass
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 200
    heads: int = 16
    d_spe: int = 128
    d_gen: int = 32
    dropout: float = 0.4
    npip_ratio: float = 0.2
    window: int = 100
    shapelets_per_class: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    depth: int = 1
    class_token: str = "first"
    position_source: str = "shapelet"
    refit: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("batch_size", "epochs", "heads", "d_spe", "d_gen", "window",
                     "shapelets_per_class", "depth", "n_jobs"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractViolation(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 < self.npip_ratio <= 1.0:
            raise ContractViolation(f"npip_ratio must lie in (0, 1], got {self.npip_ratio}")
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_spe=self.d_spe, d_gen=self.d_gen, heads=self.heads, dropout=self.dropout,
                           window=self.window, depth=self.depth, class_token=self.class_token,
                           position_source=self.position_source)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise InputError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class RunReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    epochs_run: int = 0
    test_accuracy: float | None = None
    refit_epochs: int | None = None
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    pool_digest: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    classes: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class_accuracy": self.per_class_accuracy,
                "classes": list(self.classes), "confusion": self.confusion.tolist()}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: ShapeFormer, dataset: Dataset, batch_size: int = 64) -> EvalResult:
    """Accuracy, per-class accuracy and confusion matrix in eval mode."""
    if tuple(dataset.classes) != tuple(model.classes):
        raise ContractViolation(
            f"class vocabulary mismatch: model {list(model.classes)} vs data {list(dataset.classes)}")
    pred = model.predict(dataset.X, batch_size=batch_size)
    C = len(model.classes)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (dataset.y, pred), 1)
    counts = confusion.sum(axis=1)
    per_class = {c: (float(confusion[i, i] / counts[i]) if counts[i] else float("nan"))
                 for i, c in enumerate(model.classes)}
    acc = float(np.trace(confusion) / max(len(dataset), 1))
    return EvalResult(acc, per_class, confusion, tuple(model.classes))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ShapeFormer, optimizer: RAdam | None = None, meta: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> str:
    """Write model (+ optimizer) state; returns the checkpoint digest."""
    arrays = dict(model.state_arrays())
    doc = {
        "model_config": model.config.to_dict(),
        "classes": list(model.classes),
        "pool_digest": model.pool_digest,
        "dtype": model.dtype.str,
    }
    if optimizer is not None:
        opt_arrays, opt_meta = optimizer.state_dict()
        arrays.update({f"optim/{k}": v for k, v in opt_arrays.items()})
        doc["optimizer"] = opt_meta
    if extra_arrays:
        arrays.update(extra_arrays)
    doc.update(meta or {})
    return save_arrays(path, arrays, doc)


def load_checkpoint(path, pool: ShapeletPool) -> tuple[ShapeFormer, dict, dict[str, np.ndarray]]:
    """Rebuild the model saved at ``path``; ``pool`` must be the one it was trained with."""
    arrays, meta = load_arrays(path)
    if meta.get("pool_digest") != pool.digest():
        raise ArtifactMismatch(
            f"checkpoint was trained with pool {meta.get('pool_digest', '?')[:12]}, "
            f"supplied pool is {pool.digest()[:12]}")
    model = ShapeFormer(pool, ModelConfig.from_dict(meta["model_config"]), seed=0,
                        dtype=np.dtype(meta.get("dtype", "<f4")))
    model.load_state_arrays(arrays)
    return model, meta, arrays


# ---------------------------------------------------------------------------
# training


def _check_trainable(dataset: Dataset, what: str) -> None:
    if dataset.split == "test":
        raise ContractViolation(f"refusing to train on a dataset tagged as the test split ({what})")
    empty = [c for c, n in zip(dataset.classes, dataset.class_counts()) if n == 0]
    if empty:
        raise ContractViolation(f"{what} has no instances of class(es): {', '.join(empty)}")


def _make_optimizer(model: ShapeFormer, config: TrainConfig) -> RAdam:
    return RAdam(model.params, lr=config.lr, betas=(config.beta1, config.beta2),
                 weight_decay=config.weight_decay)


def _seed_streams(seed: int):
    init_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    return int(init_seq.generate_state(1)[0]), np.random.default_rng(run_seq)


def train(dataset: Dataset, config: TrainConfig, pool: ShapeletPool | None = None,
          val: Dataset | None = None, checkpoint_dir=None, resume: bool = False,
          stop_after: int | None = None, epochs: int | None = None,
          select_best: bool = True) -> tuple[ShapeFormer, RunReport]:
    """Mini-batch cross-entropy training with RAdam.

    Unless ``val`` is given, ``dataset`` is split (stratified) into
    ``1 - val_fraction`` / ``val_fraction`` train/validation parts. Returns the
    model state with the best validation accuracy (ties go to the later epoch).
    With ``val=False`` the whole dataset is used for training and the final
    epoch is returned.

    ``checkpoint_dir`` receives a resumable checkpoint after every epoch;
    ``resume=True`` continues from it. ``stop_after`` ends the run early after
    that many total epochs (used to test resumption).
    """
    t0 = time.perf_counter()
    total_epochs = config.epochs if epochs is None else epochs
    _check_trainable(dataset, "training data")
    if val is False:
        train_ds, val_ds = dataset, None
    elif val is None:
        train_ds, val_ds = split_train_val(dataset, 1.0 - config.val_fraction, config.seed)
    else:
        train_ds, val_ds = dataset, val
    _check_trainable(train_ds, "train split")
    if val_ds is not None and val_ds.split == "test":
        raise ContractViolation("the test split cannot be used for model selection")
    if pool is None:
        pool = discover(train_ds, config.shapelets_per_class, npip_ratio=config.npip_ratio,
                        n_jobs=config.n_jobs)
    if tuple(pool.classes) != tuple(dataset.classes):
        raise ContractViolation("pool and dataset class vocabularies differ")

    init_seed, rng = _seed_streams(config.seed)
    model = ShapeFormer(pool, config.model_config(), seed=init_seed)
    opt = _make_optimizer(model, config)
    report = RunReport(config=config.to_dict(), pool_digest=pool.digest(), seed=config.seed)
    best_state = model.copy_state()
    best_acc = -1.0
    start_epoch = 0

    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume:
        if ckpt is None:
            raise ContractViolation("resume requested without a checkpoint directory")
        model, meta, arrays = load_checkpoint(ckpt, pool)
        opt = _make_optimizer(model, config)
        opt.load_state_dict({k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")},
                            meta["optimizer"])
        state = meta["train_state"]
        rng.bit_generator.state = state["rng"]
        start_epoch = state["epoch"]
        best_acc = state["best_acc"]
        best_state = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}
        report = RunReport.from_dict(state["report"])

    X, y = np.asarray(train_ds.X), np.asarray(train_ds.y)
    n = len(train_ds)
    last = total_epochs if stop_after is None else min(stop_after, total_epochs)
    for epoch in range(start_epoch, last):
        order = rng.permutation(n)
        loss_sum = 0.0
        for b in range(0, n, config.batch_size):
            idx = order[b:b + config.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model.forward(X[idx], training=True, rng=rng), y[idx])
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
        report.train_loss.append(loss_sum / n)
        if val_ds is not None:
            acc = evaluate(model, val_ds).accuracy
            report.val_accuracy.append(acc)
            if acc >= best_acc:
                best_acc = acc
                best_state = model.copy_state()
                report.best_epoch = epoch + 1
                report.best_val_accuracy = acc
        else:
            best_state = model.copy_state()
            report.best_epoch = epoch + 1
        report.epochs_run = epoch + 1
        log.info("epoch %d loss %.4f val %s", epoch + 1, report.train_loss[-1],
                 f"{report.val_accuracy[-1]:.3f}" if report.val_accuracy else "-")
        if ckpt is not None:
            train_state = {"epoch": epoch + 1, "rng": rng.bit_generator.state, "best_acc": best_acc,
                           "report": report.to_dict(), "total_epochs": total_epochs}
            save_checkpoint(ckpt, model, opt, {"train_state": train_state, "train_config": config.to_dict()},
                            extra_arrays={f"best/{k}": v for k, v in best_state.items()})

    report.wall_clock += time.perf_counter() - t0
    if select_best:
        model.load_state_arrays(best_state)
    return model, report


def fit(train_ds: Dataset, config: TrainConfig, pool: ShapeletPool | None = None,
        test: Dataset | None = None) -> tuple[ShapeFormer, RunReport]:
    """Full protocol: select the epoch count on an 80/20 split, then (if
    ``config.refit``) retrain on the whole training set for that many epochs.

    Inputs are expected to be normalised already.
    """
    if pool is None:
        pool = discover(train_ds, config.shapelets_per_class, npip_ratio=config.npip_ratio,
                        n_jobs=config.n_jobs)
    model, report = train(train_ds, config, pool)
    if config.refit:
        t0 = time.perf_counter()
        model, refit_report = train(train_ds, config, pool, val=False, epochs=report.best_epoch)
        report.refit_epochs = report.best_epoch
        report.wall_clock += time.perf_counter() - t0
    if test is not None:
        report.test_accuracy = evaluate(model, test).accuracy
    return model, report


def run_experiment(train_raw: Dataset, test_raw: Dataset, config: TrainConfig,
                   pool: ShapeletPool | None = None):
    """Normalise with train statistics, discover shapelets, fit and test."""
    train_ds, stats = normalize(train_raw)
    test_ds, _ = normalize(test_raw, stats)
    if pool is None:
        pool = discover(train_ds, config.shapelets_per_class, npip_ratio=config.npip_ratio,
                        n_jobs=config.n_jobs)
    model, report = fit(train_ds, config, pool, test=test_ds)
    return model, report, pool, stats


# ---------------------------------------------------------------------------
# window tuning


def top_gain_sum(gains: np.ndarray, top: int = 100) -> float:
    if gains.size == 0:
        return 0.0
    k = min(top, gains.size)
    return float(np.sort(gains)[::-1][:k].sum())


def tune_window(dataset: Dataset, candidate_windows=WINDOW_CHOICES, npip_ratio: float = 0.2,
                top: int = 100, n_jobs: int = 1) -> int:
    """Window whose windowed-PSD scoring gives the largest sum of the
    ``top`` best candidate gains. Ties go to the smaller window."""
    windows = sorted(set(int(w) for w in candidate_windows))
    if not windows:
        raise ContractViolation("no candidate windows given")
    if len(windows) == 1:
        return windows[0]
    candidates = extract_candidates(dataset, default_npip(dataset.series_length, npip_ratio))
    best_w, best_score = windows[0], -np.inf
    for w in windows:
        gains, _ = score_candidates(candidates, dataset, window=w, n_jobs=n_jobs)
        score = top_gain_sum(gains, top)
        log.info("window %d: top-%d gain sum %.4f", w, top, score)
        if score > best_score + 1e-12:
            best_w, best_score = w, score
    return best_w


def save_report(report: RunReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")


def load_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = ["TrainConfig", "RunReport", "EvalResult", "train", "fit", "run_experiment", "evaluate",
           "tune_window", "save_checkpoint", "load_checkpoint", "checkpoint_digest", "NormStats",
           "WINDOW_CHOICES", "SHAPELET_CHOICES", "no_grad"]
