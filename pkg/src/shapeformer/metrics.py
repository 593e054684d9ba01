"""Distance and information-theoretic primitives.

All functions here are pure and operate in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

#: Cap on the complexity correction factor. Keeps CID finite when exactly
#: one of the two inputs is flat.
CID_MAX_FACTOR = 1e6

#: Two gains closer than this are considered tied.
GAIN_TIE_TOL = 1e-12


def complexity_estimate(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.sqrt(np.sum(np.diff(x, axis=axis) ** 2, axis=axis))


def correction_factor(ce_a, ce_b):
    """max/min complexity ratio; 1 if both are flat, CID_MAX_FACTOR if one is."""
    ce_a = np.asarray(ce_a, dtype=np.float64)
    ce_b = np.asarray(ce_b, dtype=np.float64)
    hi = np.maximum(ce_a, ce_b)
    lo = np.minimum(ce_a, ce_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = hi / lo
    ratio = np.where(lo > 0, ratio, np.where(hi > 0, CID_MAX_FACTOR, 1.0))
    return np.minimum(ratio, CID_MAX_FACTOR)


def cid(a, b) -> float:
    """Complexity-invariant distance between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ContractViolation(f"cid needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ContractViolation("cid needs vectors of length >= 2")
    ed = np.sqrt(np.sum((a - b) ** 2))
    return float(ed * correction_factor(complexity_estimate(a), complexity_estimate(b)))


@dataclass(frozen=True)
class DistanceProfile:
    values: np.ndarray
    offsets: np.ndarray

    def argmin(self) -> int:
        """Offset of the smallest distance (first one on ties)."""
        return int(self.offsets[int(np.argmin(self.values))])


def distance_profile(series, subseq, offsets=None) -> DistanceProfile:
    """CID between ``subseq`` and each window of ``series``.

    ``offsets`` restricts the scan to the given window starts.
    """
    series = np.asarray(series, dtype=np.float64)
    subseq = np.asarray(subseq, dtype=np.float64)
    l = subseq.size
    if series.ndim != 1 or subseq.ndim != 1:
        raise ContractViolation("distance_profile expects 1-D inputs")
    if l < 2:
        raise ContractViolation("subsequence must have length >= 2")
    if l > series.size:
        raise ContractViolation(f"subsequence length {l} exceeds series length {series.size}")
    windows = sliding_window_view(series, l)
    if offsets is None:
        offsets = np.arange(windows.shape[0])
    else:
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets.size == 0:
            raise ContractViolation("empty scan range")
        windows = windows[offsets]
    ed = np.sqrt(np.sum((windows - subseq) ** 2, axis=1))
    factor = correction_factor(complexity_estimate(windows), complexity_estimate(subseq))
    return DistanceProfile(ed * factor, offsets)


def psd(series, subseq) -> float:
    """Perceptual subsequence distance: the minimum CID over all windows."""
    return float(distance_profile(series, subseq).values.min())


def batch_psd(windows: np.ndarray, window_ce: np.ndarray, subseq: np.ndarray,
              offset_mask: np.ndarray | None = None) -> np.ndarray:
    """PSD of ``subseq`` to many series at once.

    ``windows`` is ``(M, n_offsets, l)`` (pre-sliced windows of M series),
    ``window_ce`` their complexity estimates ``(M, n_offsets)``. ``offset_mask``
    (``n_offsets`` booleans) limits the scan to a subset of offsets.
    """
    if offset_mask is not None:
        windows = windows[:, offset_mask]
        window_ce = window_ce[:, offset_mask]
    ed = np.sqrt(np.sum((windows - subseq) ** 2, axis=2))
    factor = correction_factor(window_ce, complexity_estimate(subseq))
    return (ed * factor).min(axis=1)


def reconstruction_distance(series, selected, candidate: int) -> float:
    """Perpendicular distance from ``(candidate, series[candidate])`` to the line
    through the nearest selected points on either side."""
    series = np.asarray(series, dtype=np.float64)
    selected = np.sort(np.asarray(selected, dtype=np.int64))
    if candidate in selected:
        raise ContractViolation(f"candidate {candidate} is already selected")
    if selected.size < 2 or not selected[0] < candidate < selected[-1]:
        raise ContractViolation(f"candidate {candidate} is not bracketed by the selection")
    pos = np.searchsorted(selected, candidate)
    left, right = selected[pos - 1], selected[pos]
    return float(_perpendicular(series, np.array([left]), np.array([right]), np.array([candidate]))[0])


def _perpendicular(series, left, right, points):
    x1, y1 = left.astype(np.float64), series[left]
    x2, y2 = right.astype(np.float64), series[right]
    x0, y0 = points.astype(np.float64), series[points]
    dy = y2 - y1
    dx = x2 - x1
    return np.abs(dy * (x0 - x1) - dx * (y0 - y1)) / np.sqrt(dy * dy + dx * dx)


def reconstruction_distances(series: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Reconstruction distance of every index; selected indices get -1.

    ``selected`` must be sorted and contain both endpoints.
    """
    T = series.size
    out = np.full(T, -1.0)
    points = np.setdiff1d(np.arange(T), selected, assume_unique=True)
    if points.size:
        pos = np.searchsorted(selected, points)
        out[points] = _perpendicular(series, selected[pos - 1], selected[pos], points)
    return out


def entropy(n_pos, n_neg):
    """Binary entropy in bits of a split with the given class counts."""
    n_pos = np.asarray(n_pos, dtype=np.float64)
    n_neg = np.asarray(n_neg, dtype=np.float64)
    n = n_pos + n_neg
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n > 0, n_pos / n, 0.0)
        q = 1.0 - p
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(q > 0, q * np.log2(q), 0.0))
    return np.where(n > 0, h, 0.0)


def information_gain(distances, is_target, ratio: bool = False) -> tuple[float, float]:
    """Best one-vs-rest information gain over thresholds on ``distances``.

    Thresholds are midpoints between consecutive distinct sorted distances;
    instances with ``distance < threshold`` go left. Gains within
    ``GAIN_TIE_TOL`` are tied and resolved by the larger gap between the mean
    distances of the two sides, then by the smaller threshold. With
    ``ratio=True`` the gain is divided by the split entropy (gain ratio).

    Returns ``(gain, threshold)`` with gain in bits.
    """
    d = np.asarray(distances, dtype=np.float64)
    t = np.asarray(is_target, dtype=bool)
    if d.ndim != 1 or d.shape != t.shape:
        raise ContractViolation("distances and labels must be equal-length vectors")
    if d.size < 2:
        raise ContractViolation("information gain needs at least two instances")
    n_target = int(t.sum())
    if n_target == 0 or n_target == d.size:
        raise ContractViolation("need at least one target and one non-target instance")

    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    t_sorted = t[order]
    cuts = np.flatnonzero(np.diff(d_sorted) > 0)  # split after position cut
    if cuts.size == 0:
        return 0.0, float(d_sorted[0])

    n = d.size
    n_left = cuts + 1
    n_right = n - n_left
    left_pos = np.cumsum(t_sorted)[cuts]
    left_neg = n_left - left_pos
    right_pos = n_target - left_pos
    right_neg = n_right - right_pos
    parent = entropy(n_target, n - n_target)
    gain = parent - (n_left / n) * entropy(left_pos, left_neg) - (n_right / n) * entropy(right_pos, right_neg)
    if ratio:
        gain = gain / entropy(n_left, n_right)

    csum = np.cumsum(d_sorted)[cuts]
    margin = (d_sorted.sum() - csum) / n_right - csum / n_left
    thresholds = (d_sorted[cuts] + d_sorted[cuts + 1]) / 2.0

    best = gain.max()
    tied = np.flatnonzero(gain >= best - GAIN_TIE_TOL)
    m = margin[tied]
    widest = np.flatnonzero(m >= m.max() - GAIN_TIE_TOL * max(1.0, abs(m.max())))
    pick = tied[widest[0]]  # smallest threshold among equal margins
    return float(gain[pick]), float(thresholds[pick])
