"""Offline shapelet discovery.

Candidates are cut between consecutive perceptually important points (PIPs)
of every variable of every training instance, scored by the information gain
of their PSD to all training instances, and the best ``per_class`` of each
class are kept in a :class:`ShapeletPool`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data_io import Dataset
from .errors import ArtifactMismatch, ContractViolation, InputError
from .metrics import batch_psd, complexity_estimate, information_gain, reconstruction_distances

log = logging.getLogger(__name__)

POOL_FORMAT = "shapeformer-pool"
POOL_VERSION = 1


@dataclass(frozen=True, eq=False)
class Shapelet:
    values: np.ndarray
    variable: int
    start: int
    end: int  # exclusive
    class_label: str
    gain: float
    source_instance: str

    @property
    def length(self) -> int:
        return self.end - self.start

    def __eq__(self, other):
        if not isinstance(other, Shapelet):
            return NotImplemented
        return (np.array_equal(self.values, other.values) and self.variable == other.variable
                and self.start == other.start and self.end == other.end
                and self.class_label == other.class_label and self.gain == other.gain
                and self.source_instance == other.source_instance)

    def to_dict(self) -> dict:
        return {
            "values": [float(v) for v in self.values],
            "variable": self.variable,
            "start": self.start,
            "end": self.end,
            "class": self.class_label,
            "gain": float(self.gain),
            "source": self.source_instance,
        }


@dataclass(eq=False)
class ShapeletPool:
    shapelets: list[Shapelet]
    per_class_count: int
    classes: tuple[str, ...]
    num_variables: int
    series_length: int
    discovery_config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.shapelets)

    def __iter__(self):
        return iter(self.shapelets)

    def __getitem__(self, i):
        return self.shapelets[i]

    def __eq__(self, other):
        if not isinstance(other, ShapeletPool):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        return {
            "format": POOL_FORMAT,
            "version": POOL_VERSION,
            "classes": list(self.classes),
            "num_variables": self.num_variables,
            "series_length": self.series_length,
            "per_class_count": self.per_class_count,
            "discovery_config": self.discovery_config,
            "shapelets": [s.to_dict() for s in self.shapelets],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def per_class(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for s in self.shapelets:
            counts[s.class_label] += 1
        return counts


@dataclass(frozen=True)
class Candidate:
    instance: int
    variable: int
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


def default_npip(series_length: int, ratio: float = 0.2) -> int:
    return min(series_length, max(3, int(round(ratio * series_length))))


def pip_insertion_order(series, npip: int) -> list[int]:
    """PIP indices in the order they are chosen (endpoints first)."""
    series = np.asarray(series, dtype=np.float64)
    T = series.size
    if npip < 2:
        raise ContractViolation(f"npip must be >= 2, got {npip}")
    if T < 2:
        raise ContractViolation("series must have at least two points")
    if npip > T:
        warnings.warn(f"npip={npip} exceeds series length {T}; clipped", stacklevel=2)
        npip = T
    order = [0, T - 1]
    selected = np.array(order)
    for _ in range(npip - 2):
        dist = reconstruction_distances(series, selected)
        p = int(np.argmax(dist))  # first maximum -> smallest index on ties
        order.append(p)
        selected = np.sort(np.append(selected, p))
    return order


def extract_pips(series, npip: int) -> list[int]:
    return sorted(pip_insertion_order(series, npip))


def candidate_spans(series, npip: int) -> list[tuple[int, int]]:
    """Half-open spans of the PIP triples created by each PIP insertion.

    After inserting a point at sorted position ``idx`` the triples
    ``P[idx-z], P[idx+1-z], P[idx+2-z]`` (z = 0, 1, 2) that exist are emitted;
    the span runs from the first to the last point of the triple inclusive.
    """
    order = pip_insertion_order(series, npip)
    P = sorted(order[:2])
    spans = []
    for p in order[2:]:
        idx = int(np.searchsorted(P, p))
        P.insert(idx, p)
        for z in range(3):
            if idx - z >= 0 and idx + 2 - z <= len(P) - 1:
                start, end = P[idx - z], P[idx + 2 - z] + 1
                if end - start >= 3:
                    spans.append((start, end))
    return spans


def extract_candidates(dataset: Dataset, npip: int) -> list[Candidate]:
    if len(dataset) == 0:
        raise ContractViolation("cannot extract candidates from an empty dataset")
    out: list[Candidate] = []
    for i in range(len(dataset)):
        for v in range(dataset.num_variables):
            seen = set()
            for start, end in candidate_spans(dataset.X[i, v], npip):
                if (start, end) in seen:
                    continue
                seen.add((start, end))
                out.append(Candidate(i, v, start, end))
    return out


def scan_offsets(start: int, length: int, series_length: int, window: int | None) -> tuple[int, int]:
    """Inclusive range of window starts searched around ``start``."""
    last = series_length - length
    if window is None:
        return 0, last
    if window < 0:
        raise ContractViolation(f"window must be >= 0, got {window}")
    lo = min(max(0, start - window), last)
    hi = max(min(last, start + window), lo)
    return lo, hi


def _score_chunk(X, y, chunk, window, ratio):
    """Return (gain, threshold) for every candidate in ``chunk``."""
    M, V, T = X.shape
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    gains = np.empty(len(chunk))
    thresholds = np.empty(len(chunk))
    for k, c in enumerate(chunk):
        key = (c.variable, c.length)
        if key not in cache:
            win = sliding_window_view(X[:, c.variable, :], c.length, axis=1)
            cache[key] = (win, complexity_estimate(win))
        win, ce = cache[key]
        mask = None
        if window is not None:
            lo, hi = scan_offsets(c.start, c.length, T, window)
            mask = slice(lo, hi + 1)
        values = X[c.instance, c.variable, c.start:c.end]
        if mask is None:
            dist = batch_psd(win, ce, values)
        else:
            dist = batch_psd(win[:, mask], ce[:, mask], values)
        gains[k], thresholds[k] = information_gain(dist, y == y[c.instance], ratio=ratio)
    return gains, thresholds


def score_candidates(candidates: list[Candidate], dataset: Dataset, window: int | None = None,
                     ratio: bool = False, n_jobs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Information gain and threshold of every candidate, in candidate order.

    ``window=None`` scans every offset; an integer limits the PSD scan to
    ``start ± window`` of each candidate.
    """
    if not candidates:
        return np.empty(0), np.empty(0)
    if dataset.num_classes < 2 or np.count_nonzero(dataset.class_counts()) < 2:
        raise ContractViolation("shapelet scoring needs instances of at least two classes")
    X, y = np.asarray(dataset.X), np.asarray(dataset.y)
    if n_jobs <= 1:
        return _score_chunk(X, y, candidates, window, ratio)
    # chunk by (variable, length) locality so window caches stay useful
    order = sorted(range(len(candidates)), key=lambda k: (candidates[k].variable, candidates[k].length))
    chunks = np.array_split(np.array(order), n_jobs)
    gains = np.empty(len(candidates))
    thresholds = np.empty(len(candidates))
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        futures = [ex.submit(_score_chunk, X, y, [candidates[k] for k in ch], window, ratio) for ch in chunks]
        for ch, fut in zip(chunks, futures):
            g, t = fut.result()
            gains[ch] = g
            thresholds[ch] = t
    return gains, thresholds


def select_shapelets(candidates: list[Candidate], dataset: Dataset, per_class: int,
                     window: int | None = None, ratio: bool = False, n_jobs: int = 1,
                     gains: np.ndarray | None = None) -> ShapeletPool:
    """Keep the ``per_class`` highest-gain candidates of every class.

    Precomputed ``gains`` (aligned with ``candidates``) skip the scoring pass.
    """
    if per_class < 1:
        raise ContractViolation(f"per_class must be >= 1, got {per_class}")
    if gains is None:
        gains, _ = score_candidates(candidates, dataset, window=window, ratio=ratio, n_jobs=n_jobs)

    by_class: dict[int, list[int]] = {c: [] for c in range(dataset.num_classes)}
    for k, cand in enumerate(candidates):
        by_class[int(dataset.y[cand.instance])].append(k)

    def rank_key(k):
        c = candidates[k]
        return (-gains[k], c.length, c.start, c.instance, c.variable)

    chosen: list[tuple[int, int]] = []
    short_classes = {}
    for cls, ks in by_class.items():
        ks.sort(key=rank_key)
        if len(ks) < per_class:
            short_classes[dataset.classes[cls]] = len(ks)
            if not ks:
                log.warning("class %s produced no candidates", dataset.classes[cls])
        chosen.extend((cls, k) for k in ks[:per_class])
    chosen.sort(key=lambda ck: (-gains[ck[1]], candidates[ck[1]].length, candidates[ck[1]].start,
                                ck[0], candidates[ck[1]].variable, candidates[ck[1]].instance))

    shapelets = []
    for cls, k in chosen:
        c = candidates[k]
        shapelets.append(Shapelet(
            values=np.array(dataset.X[c.instance, c.variable, c.start:c.end], dtype=np.float64),
            variable=c.variable, start=c.start, end=c.end,
            class_label=dataset.classes[cls], gain=float(gains[k]),
            source_instance=dataset.ids[c.instance],
        ))
    config = {
        "window": window,
        "gain_ratio": ratio,
        "num_candidates": len(candidates),
        "candidates_per_class": {dataset.classes[c]: len(ks) for c, ks in by_class.items()},
        "short_classes": short_classes,
    }
    return ShapeletPool(shapelets, per_class, dataset.classes, dataset.num_variables,
                        dataset.series_length, config)


def discover(dataset: Dataset, per_class: int, npip_ratio: float = 0.2, npip: int | None = None,
             n_jobs: int = 1, ratio: bool = False) -> ShapeletPool:
    """Candidate extraction followed by selection with unrestricted PSD."""
    if npip is None:
        npip = default_npip(dataset.series_length, npip_ratio)
    candidates = extract_candidates(dataset, npip)
    log.info("extracted %d candidates (npip=%d)", len(candidates), npip)
    pool = select_shapelets(candidates, dataset, per_class, n_jobs=n_jobs, ratio=ratio)
    pool.discovery_config.update({"npip": npip, "npip_ratio": npip_ratio, "per_class": per_class})
    return pool


def discovery_stats(pool: ShapeletPool, bins: int = 10) -> dict:
    gains = np.array([s.gain for s in pool.shapelets])
    hist, edges = np.histogram(gains, bins=bins, range=(0.0, max(1.0, float(gains.max(initial=0.0)))))
    return {
        "num_candidates": pool.discovery_config.get("num_candidates"),
        "candidates_per_class": pool.discovery_config.get("candidates_per_class"),
        "shapelets_per_class": pool.per_class(),
        "gain_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
    }


# ---------------------------------------------------------------------------
# persistence


def _validate_pool(pool: ShapeletPool) -> None:
    prev = np.inf
    for i, s in enumerate(pool.shapelets):
        if not 0 <= s.start < s.end <= pool.series_length:
            raise ContractViolation(f"shapelet {i}: invalid span [{s.start}, {s.end})")
        if s.end - s.start != len(s.values):
            raise ContractViolation(f"shapelet {i}: span length {s.end - s.start} != {len(s.values)} values")
        if len(s.values) < 2:
            raise ContractViolation(f"shapelet {i}: shorter than 2 points")
        if not 0 <= s.variable < pool.num_variables:
            raise ContractViolation(f"shapelet {i}: variable {s.variable} out of range")
        if s.class_label not in pool.classes:
            raise ContractViolation(f"shapelet {i}: unknown class {s.class_label!r}")
        if s.gain > prev:
            raise ContractViolation(f"shapelet {i}: pool not sorted by gain")
        prev = s.gain


def save_pool(pool: ShapeletPool, path) -> str:
    """Write the pool as JSON; returns its digest."""
    _validate_pool(pool)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(pool.to_dict(), indent=1), encoding="utf-8")
    tmp.replace(path)
    return pool.digest()


def pool_from_dict(doc: dict) -> ShapeletPool:
    if doc.get("format") != POOL_FORMAT:
        raise ArtifactMismatch(f"not a shapelet pool document (format={doc.get('format')!r})")
    if doc.get("version") != POOL_VERSION:
        raise ArtifactMismatch(
            f"pool version mismatch: expected {POOL_VERSION}, found {doc.get('version')}")
    try:
        shapelets = [
            Shapelet(values=np.asarray(s["values"], dtype=np.float64), variable=int(s["variable"]),
                     start=int(s["start"]), end=int(s["end"]), class_label=str(s["class"]),
                     gain=float(s["gain"]), source_instance=str(s["source"]))
            for s in doc["shapelets"]
        ]
        pool = ShapeletPool(shapelets, int(doc["per_class_count"]), tuple(doc["classes"]),
                            int(doc["num_variables"]), int(doc["series_length"]),
                            dict(doc.get("discovery_config", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed pool document: {exc}") from exc
    _validate_pool(pool)
    return pool


def load_pool(path) -> ShapeletPool:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    return pool_from_dict(doc)
