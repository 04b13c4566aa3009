"""Boundary detection on per-beat features.

Pairwise squared distances form a self-similarity matrix (SSM), which is
median filtered and then correlated along its diagonal with a Gaussian
checkerboard kernel. Because the SSM holds *distances*, boundaries show up
as minima of the raw correlation; the novelty curve used for peak picking
is its negated, rectified version.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import pdist, squareform

from .dsp import BeatGrid


@dataclass(frozen=True)
class SegmentParams:
    sigma: float = 18.5
    kappa: int = 40
    median_window: int = 8
    peak_window: int = 10  # T
    tau: float = 1.35
    balanced_kernel: bool = True

    def validate(self) -> None:
        if self.kappa < 2 or self.sigma <= 0:
            raise ValueError("need kappa >= 2 and sigma > 0")
        if self.median_window < 1 or self.peak_window < 1 or self.tau <= 0:
            raise ValueError("need median_window >= 1, peak_window >= 1, tau > 0")


@dataclass(frozen=True)
class SelfSimilarityMatrix:
    values: np.ndarray
    filtered: bool = False

    @property
    def L(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CheckerboardKernel:
    values: np.ndarray  # (2 kappa + 1) square, indexed by offset + kappa
    kappa: int
    sigma: float

    def at(self, i: int, j: int) -> float:
        return float(self.values[i + self.kappa, j + self.kappa])


@dataclass(frozen=True)
class BoundarySet:
    beat_indices: np.ndarray
    times_sec: np.ndarray | None = None


def compute_ssm(emb) -> SelfSimilarityMatrix:
    """Squared Euclidean distances between all pairs of rows."""
    x = np.asarray(getattr(emb, "vectors", emb), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an L x D array with L >= 2, got {x.shape}")
    return SelfSimilarityMatrix(squareform(pdist(x, "sqeuclidean")))


def median_filter(ssm: SelfSimilarityMatrix, window: int = 8) -> SelfSimilarityMatrix:
    """Two-dimensional median over a ``window x window`` neighbourhood.

    Cell (i, j) takes rows ``i - ceil(w/2) + 1 .. i + floor(w/2)`` (columns
    likewise); windows shrink at the matrix edges. Even counts average the
    two middle values.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    S = np.asarray(ssm.values, dtype=np.float64)
    if window == 1:
        return SelfSimilarityMatrix(S.copy(), filtered=True)
    before = -(-window // 2) - 1
    after = window // 2
    P = np.pad(S, ((before, after), (before, after)), constant_values=np.nan)
    views = sliding_window_view(P, (window, window))
    out = np.empty_like(S)
    step = max(1, 2**22 // (S.shape[1] * window * window))
    for r in range(0, S.shape[0], step):
        block = views[r : r + step]
        out[r : r + step] = np.nanmedian(block.reshape(*block.shape[:2], -1), axis=-1)
    return SelfSimilarityMatrix(out, filtered=True)


def build_kernel(kappa: int = 40, sigma: float = 18.5, balanced: bool = True) -> CheckerboardKernel:
    """Gaussian checkerboard ``sgn(i) sgn(j) exp(-(i-j)^2 / sigma)``.

    Rows and columns with ``|i| <= 1`` or ``|j| <= 1`` are zero. The
    same-sign quadrants carry far more mass than the cross quadrants, so by
    default they are scaled down to make the kernel sum to zero; the cross
    quadrants keep their literal values.
    """
    if kappa < 2 or sigma <= 0:
        raise ValueError("need kappa >= 2 and sigma > 0")
    o = np.arange(-kappa, kappa + 1)
    I, J = np.meshgrid(o, o, indexing="ij")
    g = np.sign(I) * np.sign(J) * np.exp(-((I - J) ** 2) / sigma)
    g[(np.abs(I) <= 1) | (np.abs(J) <= 1)] = 0.0
    if balanced:
        pos = g > 0
        g[pos] *= -g[g < 0].sum() / g[pos].sum()
        # re-symmetrize so rounding cannot break g[i,j] == g[j,i] == g[-i,-j]
        g = 0.25 * (g + g.T + g[::-1, ::-1] + g[::-1, ::-1].T)
    return CheckerboardKernel(g, kappa, float(sigma))


def raw_novelty(ssm: SelfSimilarityMatrix, kernel: CheckerboardKernel) -> np.ndarray:
    """Kernel correlated along the SSM diagonal, with edge-replicated padding."""
    k = kernel.kappa
    P = np.pad(np.asarray(ssm.values, dtype=np.float64), k, mode="edge")
    L = ssm.L
    size = 2 * k + 1
    # diagonal windows P[v:v+size, v:v+size]
    s0, s1 = P.strides
    windows = np.lib.stride_tricks.as_strided(P, (L, size, size), (s0 + s1, s0, s1), writeable=False)
    return np.einsum("vij,ij->v", windows, kernel.values)


def novelty(ssm: SelfSimilarityMatrix, kernel: CheckerboardKernel) -> np.ndarray:
    """Boundary novelty ``max(-eta, 0)`` (distance SSM: boundaries are minima of eta)."""
    return np.maximum(-raw_novelty(ssm, kernel), 0.0)


def pick_peaks(curve, T: int = 10, tau: float = 1.35) -> BoundarySet:
    """Strict local maxima whose peak-to-mean ratio over ``+-T`` exceeds ``tau``.

    A plateau counts once, at its middle index (lower middle for even
    lengths), if both neighbouring values are lower. The first and last
    samples are never peaks. The mean window is clipped at the curve ends;
    an all-zero window yields no peak.
    """
    if T < 1 or tau <= 0:
        raise ValueError("need T >= 1 and tau > 0")
    x = np.asarray(curve, dtype=np.float64)
    n = x.size
    peaks = []
    csum = np.concatenate([[0.0], np.cumsum(x)])
    v = 1
    while v < n - 1:
        end = v
        while end + 1 < n and x[end + 1] == x[v]:
            end += 1
        if end < n - 1 and x[v] > x[v - 1] and x[v] > x[end + 1]:
            mid = v + (end - v) // 2
            lo, hi = max(0, mid - T), min(n, mid + T + 1)
            total = csum[hi] - csum[lo]
            if total > 0 and (hi - lo) * x[mid] / total > tau:
                peaks.append(mid)
        v = end + 1
    return BoundarySet(np.array(peaks, dtype=np.int64))


def boundaries_to_times(bounds, beats: BeatGrid) -> np.ndarray:
    idx = np.asarray(getattr(bounds, "beat_indices", bounds), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= beats.L):
        raise IndexError("boundary index outside the beat grid")
    return beats.beat_times[idx]


def times_to_indices(times, beats: BeatGrid) -> np.ndarray:
    """Nearest-beat index for each time."""
    t = np.asarray(times, dtype=np.float64)
    b = beats.beat_times
    pos = np.clip(np.searchsorted(b, t), 1, len(b) - 1)
    left = b[pos - 1]
    right = b[pos]
    return np.where(np.abs(t - left) <= np.abs(right - t), pos - 1, pos)


@dataclass(frozen=True)
class SegmentationResult:
    boundaries: BoundarySet
    ssm: SelfSimilarityMatrix
    ssm_filtered: SelfSimilarityMatrix
    novelty: np.ndarray


def segment_features(features, beats: BeatGrid | None = None, params: SegmentParams = SegmentParams()):
    """Run the full detector on an L x D feature sequence."""
    params.validate()
    ssm = compute_ssm(features)
    filt = median_filter(ssm, params.median_window)
    curve = novelty(filt, build_kernel(params.kappa, params.sigma, params.balanced_kernel))
    bounds = pick_peaks(curve, params.peak_window, params.tau)
    if beats is not None:
        bounds = BoundarySet(bounds.beat_indices, boundaries_to_times(bounds, beats))
    return SegmentationResult(bounds, ssm, filt, curve)


def pooled_patch_features(store) -> np.ndarray:
    """Raw baseline features: every beat's log-CQT patch averaged over time."""
    out = [store.patches(np.arange(s, min(store.L, s + 256))).mean(axis=1) for s in range(0, store.L, 256)]
    return np.concatenate(out).astype(np.float64)


# --- exports ---------------------------------------------------------------


def write_boundaries_csv(path: str | Path, bounds: BoundarySet) -> None:
    times = bounds.times_sec if bounds.times_sec is not None else np.full(len(bounds.beat_indices), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beat_index", "time_sec"])
        for i, t in zip(bounds.beat_indices, times):
            w.writerow([int(i), f"{t:.6f}"])


def read_boundaries_csv(path: str | Path) -> BoundarySet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return BoundarySet(
        np.array([int(r["beat_index"]) for r in rows], dtype=np.int64),
        np.array([float(r["time_sec"]) for r in rows]),
    )


def write_ssm(path: str | Path, ssm: SelfSimilarityMatrix) -> None:
    """Raw little-endian float32 matrix plus a ``.json`` sidecar."""
    path = Path(path)
    np.asarray(ssm.values, dtype="<f4").tofile(path)
    sidecar = {"L": ssm.L, "filtered": ssm.filtered, "dtype": "float32", "byte_order": "little"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_ssm(path: str | Path) -> SelfSimilarityMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    L = int(meta["L"])
    values = np.fromfile(path, dtype="<f4").reshape(L, L).astype(np.float64)
    return SelfSimilarityMatrix(values, bool(meta["filtered"]))
