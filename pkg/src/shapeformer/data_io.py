"""Loading, normalising and splitting multivariate time-series datasets.

Two on-disk layouts are understood:

* the UEA/sktime ``.ts`` text format (``@`` metadata lines, then one
  instance per line with dimensions separated by ``:`` and the class label
  after the final ``:``);
* a wide CSV layout with one row per (instance, variable)::

      instance,variable,label,t0,t1,...
      inst-0,0,walking,0.1,0.3,...

Missing values (``?``, ``NaN`` or empty CSV cells) are linearly interpolated
inside their channel; series shorter than the dataset maximum are right-padded
with the channel's last observed value.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractViolation, DataError, InputError, ParseError

log = logging.getLogger(__name__)

MISSING_TOKENS = {"?", "nan", "NaN", "NAN", ""}


@dataclass(frozen=True, eq=False)
class TimeSeries:
    values: np.ndarray  # (V, T)
    id: str

    @property
    def num_variables(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labelled collection of equal-shape multivariate series.

    ``X`` has shape ``(M, V, T)`` and is read-only; ``y`` holds 0-based class
    indices into ``classes``. ``split`` is a provenance tag ("train", "val",
    "test", ...) that the trainer checks before touching the data.
    """

    X: np.ndarray
    y: np.ndarray
    classes: tuple[str, ...]
    ids: tuple[str, ...]
    name: str = ""
    split: str = "train"
    lengths: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 3:
            raise ContractViolation(f"Dataset.X must be (M, V, T), got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ContractViolation(f"label vector shape {y.shape} does not match {X.shape[0]} instances")
        if len(self.ids) != X.shape[0]:
            raise ContractViolation("one id per instance required")
        if y.size and (y.min() < 0 or y.max() >= len(self.classes)):
            raise ContractViolation("label index outside the class vocabulary")
        if np.isnan(X).any():
            raise ContractViolation("Dataset values must not contain NaN")
        X = X.copy() if X.flags.writeable else X
        X.flags.writeable = False
        y = y.copy()
        y.flags.writeable = False
        lengths = self.lengths
        if lengths is None:
            lengths = np.full(X.shape[0], X.shape[2], dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        lengths.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "lengths", lengths)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def num_variables(self) -> int:
        return self.X.shape[1]

    @property
    def series_length(self) -> int:
        return self.X.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def instances(self) -> list[tuple[TimeSeries, str]]:
        return list(self)

    def __iter__(self) -> Iterator[tuple[TimeSeries, str]]:
        for i in range(len(self)):
            yield TimeSeries(self.X[i], self.ids[i]), self.classes[self.y[i]]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, index: Sequence[int], split: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            X=self.X[index],
            y=self.y[index],
            classes=self.classes,
            ids=tuple(self.ids[i] for i in index),
            name=self.name,
            split=self.split if split is None else split,
            lengths=self.lengths[index],
        )

    def with_split(self, split: str) -> "Dataset":
        return replace(self, split=split)


# ---------------------------------------------------------------------------
# channel repair


def _impute(channel: np.ndarray) -> np.ndarray:
    """Linear interpolation over NaNs; edges take the nearest observed value."""
    missing = np.isnan(channel)
    if not missing.any():
        return channel
    observed = np.flatnonzero(~missing)
    if observed.size == 0:
        warnings.warn("channel has no observed values; filled with zeros", stacklevel=3)
        return np.zeros_like(channel)
    out = channel.copy()
    out[missing] = np.interp(np.flatnonzero(missing), observed, channel[observed])
    return out


def _assemble(raw: list[list[np.ndarray]], labels: list[int], ids: list[str],
              classes: Sequence[str], name: str, split: str) -> Dataset:
    """Impute, pad to a common length and stack ``raw[i][v]`` channels."""
    if not raw:
        raise DataError("dataset contains no instances")
    V = len(raw[0])
    T = max(len(ch) for inst in raw for ch in inst)
    X = np.empty((len(raw), V, T), dtype=np.float64)
    lengths = np.empty(len(raw), dtype=np.int64)
    for i, inst in enumerate(raw):
        if len(inst) != V:
            raise DataError(f"instance {ids[i]} has {len(inst)} variables, expected {V}")
        lengths[i] = max(len(ch) for ch in inst)
        for v, ch in enumerate(inst):
            if len(ch) == 0:
                raise DataError(f"instance {ids[i]} variable {v} is empty")
            filled = _impute(np.asarray(ch, dtype=np.float64))
            X[i, v, : len(filled)] = filled
            X[i, v, len(filled):] = filled[-1]
    return Dataset(X=X, y=np.asarray(labels), classes=tuple(classes), ids=tuple(ids),
                   name=name, split=split, lengths=lengths)


def _parse_value(token: str, line_no: int, path) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"cannot parse value {token!r}", line=line_no, path=path) from None


# ---------------------------------------------------------------------------
# .ts format


def _parse_bool(value: str, key: str, line_no: int, path) -> bool:
    v = value.strip().lower()
    if v in ("true", "false"):
        return v == "true"
    raise ParseError(f"@{key} expects true/false, got {value!r}", line=line_no, path=path)


def _parse_int(value: str, key: str, line_no: int, path) -> int:
    try:
        n = int(value.strip())
    except ValueError:
        raise ParseError(f"@{key} expects an integer, got {value!r}", line=line_no, path=path) from None
    if n <= 0:
        raise ParseError(f"@{key} must be positive, got {n}", line=line_no, path=path)
    return n


def parse_ts_file(path, split: str | None = None, fmt: str | None = None) -> Dataset:
    """Read a labelled dataset from ``path``.

    ``fmt`` is ``"ts"`` or ``"csv"``; by default it is taken from the file
    suffix. ``split`` defaults to "test" when the file name contains ``TEST``
    and "train" otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "ts"
    if split is None:
        split = "test" if "TEST" in path.stem.upper() else "train"
    if fmt == "csv":
        return _parse_csv(path, split)
    if fmt != "ts":
        raise InputError(f"unknown dataset format {fmt!r}")

    header: dict[str, object] = {}
    classes: list[str] | None = None
    in_data = False
    raw: list[list[np.ndarray]] = []
    labels: list[int] = []
    ids: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if not line.startswith("@"):
                    raise ParseError("data line before @data", line=line_no, path=path)
                key, _, value = line[1:].partition(" ")
                key = key.lower()
                if key == "data":
                    if classes is None:
                        raise ParseError("header does not declare @classLabel", line=line_no, path=path)
                    if header.get("timestamps"):
                        raise ParseError("timestamped series are not supported", line=line_no, path=path)
                    in_data = True
                elif key == "problemname":
                    header["problemname"] = value.strip()
                elif key in ("timestamps", "missing", "univariate", "equallength"):
                    header[key] = _parse_bool(value, key, line_no, path)
                elif key in ("dimensions", "serieslength"):
                    header[key] = _parse_int(value, key, line_no, path)
                elif key == "classlabel":
                    parts = value.split()
                    if not parts:
                        raise ParseError("@classLabel needs true/false", line=line_no, path=path)
                    if not _parse_bool(parts[0], key, line_no, path):
                        raise ParseError("unlabelled datasets are not supported", line=line_no, path=path)
                    if len(parts) < 2:
                        raise ParseError("@classLabel true lists no labels", line=line_no, path=path)
                    classes = parts[1:]
                    if len(set(classes)) != len(classes):
                        raise ParseError("duplicate class label in header", line=line_no, path=path)
                else:
                    log.debug("ignoring header key @%s", key)
                continue

            *dims, label = line.split(":")
            if not dims:
                raise ParseError("instance has no dimensions", line=line_no, path=path)
            label = label.strip()
            n_dims = header.get("dimensions")
            if n_dims is None:
                n_dims = 1 if header.get("univariate") else len(dims)
                header["dimensions"] = n_dims
            if len(dims) != n_dims:
                raise ParseError(f"expected {n_dims} dimensions, found {len(dims)}", line=line_no, path=path)
            if label not in classes:
                raise DataError(f"{path}:{line_no}: unknown class label {label!r}")
            channels = [np.array([_parse_value(tok, line_no, path) for tok in d.split(",")])
                        for d in dims]
            raw.append(channels)
            labels.append(classes.index(label))
            ids.append(str(len(ids)))
    if not in_data:
        raise ParseError("missing @data section", path=path)
    name = str(header.get("problemname") or path.stem.split("_")[0])
    return _assemble(raw, labels, ids, classes, name, split)


def write_ts_file(dataset: Dataset, path) -> None:
    """Write ``dataset`` in ``.ts`` format with round-trip float precision."""
    path = Path(path)
    lines = [
        f"@problemName {dataset.name or path.stem}",
        "@timeStamps false",
        "@missing false",
        f"@univariate {'true' if dataset.num_variables == 1 else 'false'}",
        f"@dimensions {dataset.num_variables}",
        "@equalLength true",
        f"@seriesLength {dataset.series_length}",
        "@classLabel true " + " ".join(dataset.classes),
        "@data",
    ]
    for x, label in zip(dataset.X, dataset.y):
        dims = [",".join(repr(float(v)) for v in ch) for ch in x]
        lines.append(":".join(dims) + ":" + dataset.classes[label])
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# wide CSV format


def _parse_csv(path: Path, split: str) -> Dataset:
    rows: dict[str, dict[int, np.ndarray]] = {}
    inst_label: dict[str, str] = {}
    classes: list[str] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["instance", "variable", "label"]:
            raise ParseError("CSV header must start with instance,variable,label", line=1, path=path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ParseError("row has no values", line=line_no, path=path)
            inst, var, label = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                v = int(var)
            except ValueError:
                raise ParseError(f"variable index {var!r} is not an integer", line=line_no, path=path) from None
            values = [_parse_value(tok, line_no, path) for tok in row[3:]]
            while values and math.isnan(values[-1]) and row[3 + len(values) - 1].strip() == "":
                values.pop()  # ragged rows: trailing empty cells are padding
            if inst in inst_label and inst_label[inst] != label:
                raise DataError(f"{path}:{line_no}: instance {inst} has conflicting labels")
            inst_label[inst] = label
            if label not in classes:
                classes.append(label)
            rows.setdefault(inst, {})[v] = np.array(values)
    if not rows:
        raise DataError(f"{path}: no instances")
    V = max(max(chs) for chs in rows.values()) + 1
    raw, labels = [], []
    for inst, chs in rows.items():
        if sorted(chs) != list(range(V)):
            raise DataError(f"{path}: instance {inst} does not cover variables 0..{V - 1}")
        raw.append([chs[v] for v in range(V)])
        labels.append(classes.index(inst_label[inst]))
    return _assemble(raw, labels, list(rows), classes, path.stem.split("_")[0], split)


def write_csv_file(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "variable", "label"] + [f"t{t}" for t in range(dataset.series_length)])
        for i in range(len(dataset)):
            for v in range(dataset.num_variables):
                w.writerow([dataset.ids[i], v, dataset.classes[dataset.y[i]]]
                           + [repr(float(x)) for x in dataset.X[i, v]])


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def normalize(dataset: Dataset, stats: NormStats | None = None) -> tuple[Dataset, NormStats]:
    """Per-variable z-score. Pass the training stats back in for test data.

    A zero-variance channel is only centred and its std is recorded as 0.
    """
    if stats is None:
        mean = dataset.X.mean(axis=(0, 2))
        std = dataset.X.std(axis=(0, 2))
        stats = NormStats(mean, std)
    elif len(stats.mean) != dataset.num_variables or len(stats.std) != dataset.num_variables:
        raise ContractViolation(
            f"stats cover {len(stats.mean)} variables, dataset has {dataset.num_variables}")
    scale = np.where(stats.std > 0, stats.std, 1.0)
    X = (dataset.X - stats.mean[None, :, None]) / scale[None, :, None]
    return replace(dataset, X=X), stats


def split_train_val(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified random split; ``fraction`` of every class goes to train."""
    if not 0.0 < fraction < 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        if members.size == 1:
            warnings.warn(f"class {dataset.classes[c]!r} has a single instance; kept in train",
                          stacklevel=2)
            train_idx.extend(members.tolist())
            continue
        n_val = int(round((1.0 - fraction) * members.size + 1e-9))
        n_val = min(max(n_val, 1), members.size - 1)
        val_idx.extend(members[:n_val].tolist())
        train_idx.extend(members[n_val:].tolist())
    train_idx.sort()
    val_idx.sort()
    return dataset.subset(train_idx, split="train"), dataset.subset(val_idx, split="val")
