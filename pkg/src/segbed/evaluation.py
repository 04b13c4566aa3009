"""Reference annotations and trimmed boundary hit-rate metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import GapError, OverlapError, ParseError

TRIM_RADIUS = 0.5
_EPS = 1e-9


@dataclass(frozen=True)
class AnnotationSet:
    """Contiguous labeled intervals ``(start, end, label)`` in seconds."""

    intervals: tuple
    duration_sec: float

    @property
    def boundaries_sec(self) -> np.ndarray:
        edges = [s for s, _, _ in self.intervals] + [self.intervals[-1][1]]
        return np.array(edges, dtype=np.float64)

    @property
    def labels(self) -> list[str]:
        return [lab for _, _, lab in self.intervals]


def parse_annotations(path: str | Path, tol: float = 1e-6) -> AnnotationSet:
    """Read a ``start<TAB>end<TAB>label`` file.

    Blank lines and ``#`` comments are skipped. Intervals must start at 0 and
    tile the track without gaps or overlaps (up to ``tol`` seconds).

    Raises
    ------
    ParseError
        Malformed line, non-numeric time, empty file or ``end <= start``.
    OverlapError, GapError
        Consecutive intervals overlap, or leave a hole.
    """
    intervals = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                parts = line.split()
            if len(parts) < 2:
                raise ParseError(f"{path}:{n}: expected start, end, label")
            try:
                start, end = float(parts[0]), float(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{n}: {exc}") from None
            label = parts[2].strip() if len(parts) > 2 else ""
            if not (math.isfinite(start) and math.isfinite(end)) or end <= start:
                raise ParseError(f"{path}:{n}: bad interval [{start}, {end}]")
            intervals.append((start, end, label))
    if not intervals:
        raise ParseError(f"{path}: no intervals")
    intervals.sort(key=lambda iv: iv[0])
    if abs(intervals[0][0]) > tol:
        raise GapError(f"{path}: first interval starts at {intervals[0][0]}, not 0")
    for (s0, e0, _), (s1, _, _) in zip(intervals, intervals[1:]):
        if s1 < e0 - tol:
            raise OverlapError(f"{path}: [{s0}, {e0}] overlaps interval starting at {s1}")
        if s1 > e0 + tol:
            raise GapError(f"{path}: gap between {e0} and {s1}")
    return AnnotationSet(tuple(intervals), intervals[-1][1])


def write_annotations(path: str | Path, intervals) -> None:
    with open(path, "w") as fh:
        for s, e, lab in intervals:
            fh.write(f"{s:.6f}\t{e:.6f}\t{lab}\n")


def trim(boundaries, duration: float, radius: float = TRIM_RADIUS) -> np.ndarray:
    """Drop boundaries within ``radius`` seconds of the track start or end."""
    b = np.asarray(boundaries, dtype=np.float64)
    keep = (b > radius + _EPS) & (b < duration - radius - _EPS)
    return b[keep]


@dataclass(frozen=True)
class BoundaryMetrics:
    f_measure: float
    precision: float
    recall: float
    window_sec: float
    n_hits: int
    n_est: int
    n_ref: int


def match_boundaries(est, ref, window: float = 3.0) -> list[tuple[int, int]]:
    """Maximum matching of pairs with ``|est - ref| <= window``.

    Every estimate owns the interval ``[e - w, e + w]``; with equal widths,
    sweeping estimates in time order and giving each the earliest free
    reference it can reach is optimal. Returns index pairs into the sorted
    inputs.
    """
    e = np.sort(np.asarray(est, dtype=np.float64))
    r = np.sort(np.asarray(ref, dtype=np.float64))
    pairs = []
    j = 0
    for i, t in enumerate(e):
        while j < r.size and r[j] < t - window - _EPS:
            j += 1
        if j < r.size and r[j] <= t + window + _EPS:
            pairs.append((i, j))
            j += 1
    return pairs


def hit_rate(est, ref, window: float = 3.0) -> BoundaryMetrics:
    """Precision, recall and F-measure of boundary hits within ``window``."""
    n_est, n_ref = len(est), len(ref)
    hits = len(match_boundaries(est, ref, window))
    p = hits / n_est if n_est else 0.0
    r = hits / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return BoundaryMetrics(f, p, r, float(window), hits, n_est, n_ref)


def evaluate_track(est, annotations: AnnotationSet, window: float = 3.0) -> BoundaryMetrics:
    dur = annotations.duration_sec
    return hit_rate(trim(np.sort(est), dur), trim(annotations.boundaries_sec, dur), window)


@dataclass
class CorpusReport:
    window_sec: float
    per_track: list  # [{"id", "f", "p", "r"}]
    mean_f: float
    std_f: float
    mean_p: float
    std_p: float
    mean_r: float
    std_r: float
    errors: list | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if not d["errors"]:
            d.pop("errors")
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CorpusReport":
        return cls(**json.loads(text))


def evaluate_corpus(pairs, window: float = 3.0, ids=None) -> CorpusReport:
    """Per-track metrics plus mean and population std of F, P and R.

    Parameters
    ----------
    pairs : sequence of (est, ref, duration)
        Untrimmed boundary times in seconds. Trimming happens here.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one track")
    ids = list(ids) if ids is not None else [str(k) for k in range(len(pairs))]
    rows = []
    for tid, (est, ref, dur) in zip(ids, pairs):
        m = hit_rate(trim(np.sort(est), dur), trim(np.sort(ref), dur), window)
        rows.append({"id": tid, "f": m.f_measure, "p": m.precision, "r": m.recall})
    stats = {}
    for k in "fpr":
        v = np.array([row[k] for row in rows])
        stats[f"mean_{k}"] = float(v.mean())
        stats[f"std_{k}"] = float(v.std())
    return CorpusReport(float(window), rows, **stats)
