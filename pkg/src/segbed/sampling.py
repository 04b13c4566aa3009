"""Time-proximity triplet sampling and its false positive/negative statistics.

Anchors are drawn uniformly over beat indices. Positives come from a window
of +-``delta_p`` beats around the anchor; negatives from the two bands at
``delta_n_min..delta_n_max`` beats before and after it (clipped at the
track edges). The biased variant compares 2D Fourier magnitude features of
short excerpts on either side of the anchor and draws the positive from the
more similar side and the negative from the other one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dsp import twodfft_feature
from .errors import EmptyNegativeRegion

BEFORE, AFTER = "before", "after"
_SIDE_CODE = {None: 0, BEFORE: -1, AFTER: 1}

# probe offsets (beats) and excerpt length for the 2D-FFT side comparison
PROBE_OFFSETS = (4, 16)
PROBE_BEATS = 8


@dataclass(frozen=True)
class SamplingParams:
    delta_p: int = 16
    delta_n_min: int = 1
    delta_n_max: int = 96

    def validate(self) -> None:
        if self.delta_p < 1:
            raise ValueError("delta_p must be >= 1")
        if not 0 <= self.delta_n_min < self.delta_n_max:
            raise ValueError("need 0 <= delta_n_min < delta_n_max")


@dataclass(frozen=True)
class TripletIndices:
    i_a: int
    i_p: int
    i_n: int


@dataclass(frozen=True)
class SegmentTimeline:
    """Contiguous labeled segments in beat units covering ``[0, L)``."""

    segments: tuple  # ((start, end, label), ...)
    L: int

    def __post_init__(self):
        segs = tuple((int(s), int(e), str(lab)) for s, e, lab in self.segments)
        if not segs:
            raise ValueError("timeline needs at least one segment")
        pos = 0
        for s, e, _ in segs:
            if s != pos or e - s < 1:
                raise ValueError(f"segments must be contiguous and nonempty, got {segs}")
            pos = e
        if pos != self.L:
            raise ValueError(f"segments cover [0, {pos}) but L={self.L}")
        object.__setattr__(self, "segments", segs)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e - s for s, e, _ in self.segments])

    @property
    def labels(self) -> list[str]:
        return [lab for _, _, lab in self.segments]

    def instance_ids(self) -> np.ndarray:
        """Segment index of every beat."""
        return np.repeat(np.arange(len(self.segments)), self.lengths)

    def label_ids(self) -> np.ndarray:
        names = {lab: j for j, lab in enumerate(dict.fromkeys(self.labels))}
        return np.repeat([names[lab] for lab in self.labels], self.lengths)

    def l_sep(self) -> float:
        """Fewest beats separating two segments with the same label (inf if none)."""
        best = np.inf
        segs = self.segments
        for a in range(len(segs)):
            for b in range(a + 1, len(segs)):
                if segs[a][2] == segs[b][2]:
                    best = min(best, segs[b][0] - segs[a][1])
        return best


# --- index regions ---------------------------------------------------------


def positive_window(i_a, L, delta_p):
    return np.maximum(i_a - delta_p, 0), np.minimum(i_a + delta_p, L - 1)


def negative_bands(i_a, L, params: SamplingParams):
    """Inclusive ``(lo1, hi1, lo2, hi2)`` of the before and after bands."""
    lo1 = np.maximum(i_a - params.delta_n_max, 0)
    hi1 = np.maximum(i_a - params.delta_n_min, 0)
    lo2 = np.minimum(i_a + params.delta_n_min, L - 1)
    hi2 = np.minimum(i_a + params.delta_n_max, L - 1)
    return lo1, hi1, lo2, hi2


def negative_candidates(i_a: int, L: int, params: SamplingParams) -> np.ndarray:
    """Sorted, de-duplicated union of both negative bands."""
    lo1, hi1, lo2, hi2 = negative_bands(i_a, L, params)
    return np.union1d(np.arange(lo1, hi1 + 1), np.arange(lo2, hi2 + 1))


def _uniform_int(rng: np.random.Generator, lo, hi):
    """Uniform integers on inclusive ranges, vectorized."""
    lo = np.asarray(lo)
    return lo + np.floor(rng.random(lo.shape) * (np.asarray(hi) - lo + 1)).astype(np.int64)


def _draw_union(rng, lo1, hi1, lo2, hi2):
    # bands are ordered (lo1 <= lo2, hi1 <= hi2); drop the overlap from band 2
    lo2 = np.maximum(lo2, hi1 + 1)
    n1 = hi1 - lo1 + 1
    n2 = np.maximum(hi2 - lo2 + 1, 0)
    k = np.floor(rng.random(np.shape(lo1)) * (n1 + n2)).astype(np.int64)
    return np.where(k < n1, lo1 + k, lo2 + (k - n1))


def draw_given_anchors(i_a, L: int, params: SamplingParams, rng, sides=None):
    """Draw positives and negatives for an array of anchors.

    ``sides`` holds -1 (before), +1 (after) or 0 (unbiased) per anchor. A
    restricted region with no index strictly on its side falls back to the
    unbiased region.
    """
    i_a = np.asarray(i_a, dtype=np.int64)
    sides = np.zeros_like(i_a) if sides is None else np.asarray(sides, dtype=np.int64)
    p_lo, p_hi = positive_window(i_a, L, params.delta_p)
    lo1, hi1, lo2, hi2 = negative_bands(i_a, L, params)

    before = (sides == -1) & (p_lo < i_a)
    after = (sides == 1) & (p_hi > i_a)
    p_hi = np.where(before, i_a, p_hi)
    p_lo = np.where(after, i_a, p_lo)
    i_p = _uniform_int(rng, p_lo, p_hi)

    # negative from the side opposite the positive
    neg_after = (sides == -1) & (hi2 > i_a)
    neg_before = (sides == 1) & (lo1 < i_a)
    n_lo1 = np.where(neg_after, lo2, lo1)
    n_hi1 = np.where(neg_after, hi2, hi1)
    n_lo2 = np.where(neg_before, lo1, lo2)
    n_hi2 = np.where(neg_before, hi1, hi2)
    i_n = _draw_union(rng, n_lo1, n_hi1, n_lo2, n_hi2)
    return i_p, i_n


def _check(L: int, params: SamplingParams) -> None:
    params.validate()
    if L < 2 * params.delta_n_min + 1:
        raise EmptyNegativeRegion(
            f"L={L} too short for delta_n_min={params.delta_n_min} (need L >= {2 * params.delta_n_min + 1})"
        )


def sample_triplet(
    L: int, params: SamplingParams, rng: np.random.Generator, i_a: Optional[int] = None
) -> TripletIndices:
    """One unbiased triplet; ``i_a`` pins the anchor instead of drawing it."""
    _check(L, params)
    a = int(rng.integers(L)) if i_a is None else int(i_a)
    i_p, i_n = draw_given_anchors(np.array([a]), L, params, rng)
    return TripletIndices(a, int(i_p[0]), int(i_n[0]))


def sample_triplets(
    L: int, params: SamplingParams, rng: np.random.Generator, n: int, sides_fn=None
) -> np.ndarray:
    """``n`` triplets as an ``(n, 3)`` array of (i_a, i_p, i_n).

    ``sides_fn`` maps an anchor index to ``"before"``, ``"after"`` or None.
    """
    _check(L, params)
    i_a = rng.integers(L, size=n)
    sides = None
    if sides_fn is not None:
        sides = np.array([_SIDE_CODE[sides_fn(int(a))] for a in i_a])
    i_p, i_n = draw_given_anchors(i_a, L, params, rng, sides)
    return np.stack([i_a, i_p, i_n], axis=1)


# --- 2D-FFT biased side selection -----------------------------------------


def biased_side(store, i_a: int) -> Optional[str]:
    """Side of the anchor whose excerpts look more like the anchor's own.

    Returns None when the +-16 beat probes would leave the track, in which
    case the caller samples without bias. Ties go to ``"after"``.
    """
    far = max(PROBE_OFFSETS)
    if i_a - far < 0 or i_a + far > store.L - 1:
        return None

    def feat(center):
        return twodfft_feature(store.segment(center, PROBE_BEATS))

    ref = feat(i_a)
    score = {}
    for side, sign in ((BEFORE, -1), (AFTER, 1)):
        score[side] = sum(np.linalg.norm(feat(i_a + sign * off) - ref) for off in PROBE_OFFSETS)
    return BEFORE if score[BEFORE] < score[AFTER] else AFTER


def sample_triplet_biased(
    store, params: SamplingParams, rng: np.random.Generator, i_a: Optional[int] = None
) -> TripletIndices:
    _check(store.L, params)
    a = int(rng.integers(store.L)) if i_a is None else int(i_a)
    side = biased_side(store, a)
    i_p, i_n = draw_given_anchors(np.array([a]), store.L, params, rng, np.array([_SIDE_CODE[side]]))
    return TripletIndices(a, int(i_p[0]), int(i_n[0]))


def oracle_side(timeline: SegmentTimeline) -> Callable[[int], Optional[str]]:
    """Side chooser for audio-free timelines: prefer the side whose +-4/+-16
    probes fall in the anchor's own segment."""
    inst = timeline.instance_ids()
    L = timeline.L
    far = max(PROBE_OFFSETS)

    def choose(i_a: int) -> Optional[str]:
        if i_a - far < 0 or i_a + far > L - 1:
            return None
        before = sum(inst[i_a - o] == inst[i_a] for o in PROBE_OFFSETS)
        after = sum(inst[i_a + o] == inst[i_a] for o in PROBE_OFFSETS)
        return BEFORE if before > after else AFTER

    return choose


# --- closed forms and Monte Carlo -----------------------------------------


def fp_probability(l: float, delta_p: float, clamp: bool = False) -> float:
    """Closed-form false-positive probability for an anchor in a segment of
    length ``l``, evaluated exactly as published (values can leave [0, 1])."""
    l, d = float(l), float(delta_p)
    if l <= d:
        p = (2 * d - l) / l
    elif l < 2 * d:
        p = d**2 / (2 * l**2) - 3 * d / (4 * l) + 0.5
    else:
        p = d / (4 * l)
    return float(np.clip(p, 0.0, 1.0)) if clamp else p


def fn_probability(
    timeline: SegmentTimeline, anchor_segment: int, params: SamplingParams, clamp: bool = False
) -> float:
    """Closed-form false-negative probability for an anchor in segment
    ``anchor_segment``: the label's share of the track minus
    ``1 - fp_probability(l, delta_n_min)``."""
    s, e, label = timeline.segments[anchor_segment]
    share = sum(b - a for a, b, lab in timeline.segments if lab == label) / timeline.L
    p = share - (1.0 - fp_probability(e - s, params.delta_n_min))
    return float(np.clip(p, 0.0, 1.0)) if clamp else p


def fp_exact(l: int, delta_p: int) -> float:
    """False-positive rate of the positive window for an anchor uniform in an
    interior segment of length ``l``, by enumeration of anchor and offset."""
    x = np.arange(l)[:, None] + np.arange(-delta_p, delta_p + 1)[None, :]
    return float(np.mean((x < 0) | (x >= l)))


def monte_carlo_rates(
    timeline: SegmentTimeline,
    params: SamplingParams,
    biased: bool = False,
    trials: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    anchor_range: Optional[Sequence[int]] = None,
) -> tuple[float, float]:
    """Empirical (FP, FN) rates of the sampler on a labeled timeline.

    FP counts positives from another segment instance; FN counts negatives
    carrying the anchor's label. ``anchor_range`` (inclusive) confines the
    anchors, e.g. away from the track edges.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    L = timeline.L
    params.validate()
    lo, hi = (0, L - 1) if anchor_range is None else anchor_range
    i_a = rng.integers(lo, hi + 1, size=trials)
    sides = None
    if biased:
        choose = oracle_side(timeline)
        sides = np.array([_SIDE_CODE[choose(int(a))] for a in i_a])
    i_p, i_n = draw_given_anchors(i_a, L, params, rng, sides)
    inst, lab = timeline.instance_ids(), timeline.label_ids()
    fp = float(np.mean(inst[i_p] != inst[i_a]))
    fn = float(np.mean(lab[i_n] == lab[i_a]))
    return fp, fn


def synth_timeline(
    n_segments: int,
    length_dist: tuple[int, int],
    n_labels: int,
    rng: Optional[np.random.Generator] = None,
    label_mode: str = "cycle",
) -> SegmentTimeline:
    """Random contiguous timeline; labels cycle A, B, ... or are drawn at random."""
    if n_segments < 1 or n_labels < 1:
        raise ValueError("need n_segments >= 1 and n_labels >= 1")
    rng = np.random.default_rng() if rng is None else rng
    lo, hi = length_dist
    lengths = rng.integers(lo, hi + 1, size=n_segments)
    if label_mode == "cycle":
        lab_idx = np.arange(n_segments) % n_labels
    elif label_mode == "random":
        lab_idx = rng.integers(n_labels, size=n_segments)
    else:
        raise ValueError(f"unknown label_mode {label_mode!r}")
    names = [_label_name(j) for j in range(n_labels)]
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    segs = tuple((int(bounds[j]), int(bounds[j + 1]), names[lab_idx[j]]) for j in range(n_segments))
    return SegmentTimeline(segs, int(bounds[-1]))


def _label_name(j: int) -> str:
    name = ""
    j += 1
    while j:
        j, r = divmod(j - 1, 26)
        name = chr(65 + r) + name
    return name
