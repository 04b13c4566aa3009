"""Constant-Q analysis, beat tracking and the 2D Fourier magnitude feature."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import stft

from .audio import ANALYSIS_RATE, AudioBuffer
from .errors import CenterOutOfRange, ShapeMismatch

LOG_EPS = 1e-6
# bytes of gathered frames per CQT chunk
_CHUNK_BYTES = 48 * 2**20


@dataclass(frozen=True)
class CqtParams:
    f_min: float = 40.0
    bins_per_octave: int = 12
    n_octaves: int = 6
    q_factor: float = 1.0 / (2.0 ** (1.0 / 12.0) - 1.0)

    @property
    def K(self) -> int:
        return self.bins_per_octave * self.n_octaves

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.K) / self.bins_per_octave)

    def validate(self, sample_rate: int) -> None:
        if self.f_min <= 0 or self.bins_per_octave < 1 or self.n_octaves < 1 or self.q_factor <= 0:
            raise ValueError(f"invalid CQT parameters {self}")
        if self.frequencies()[-1] >= sample_rate / 2:
            raise ValueError(
                f"top CQT bin {self.frequencies()[-1]:.1f} Hz is above Nyquist for {sample_rate} Hz"
            )


@dataclass(frozen=True)
class CqtMatrix:
    magnitudes: np.ndarray  # frames x K
    frame_centers: np.ndarray  # seconds

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def log(self) -> np.ndarray:
        return log_compress(self.magnitudes)


@dataclass(frozen=True)
class BeatGrid:
    beat_times: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.beat_times, dtype=np.float64)
        if t.ndim != 1:
            raise ValueError("beat_times must be one-dimensional")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("beat_times must be strictly increasing")
        object.__setattr__(self, "beat_times", t)

    @property
    def L(self) -> int:
        return len(self.beat_times)

    def __len__(self) -> int:
        return self.L


def log_compress(mag: np.ndarray) -> np.ndarray:
    return np.log(np.asarray(mag) + LOG_EPS)


def _kernel(freq: float, params: CqtParams, sample_rate: int) -> tuple[np.ndarray, int]:
    """Hann-windowed complex exponential as an (N, 2) real array [cos, -sin]."""
    n_len = int(round(params.q_factor * sample_rate / freq))
    half = n_len // 2
    n = np.arange(-half, half + 1)
    win = 0.5 + 0.5 * np.cos(np.pi * n / (half + 1))
    win /= win.sum()
    phase = 2.0 * np.pi * freq * n / sample_rate
    return np.stack([win * np.cos(phase), -win * np.sin(phase)], axis=1), half


def cqt_at_times(audio: AudioBuffer, params: CqtParams, centers) -> CqtMatrix:
    """Constant-Q magnitudes with one frame per requested center time.

    Each bin is the magnitude of the inner product between the signal and a
    Hann-windowed complex exponential of length ``q_factor * sr / f``
    centered on the (rounded) center sample. Samples outside the signal are
    treated as zeros.
    """
    sr = audio.sample_rate
    params.validate(sr)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 1:
        raise ValueError("centers must be one-dimensional")
    duration = audio.duration_sec
    if centers.size and (centers.min() < 0 or centers.max() > duration + 1e-9):
        raise CenterOutOfRange(
            f"centers span [{centers.min():.3f}, {centers.max():.3f}] s, audio is {duration:.3f} s"
        )
    if centers.size > 1 and np.any(np.diff(centers) < 0):
        raise ValueError("centers must be sorted ascending")

    freqs = params.frequencies()
    max_half = int(round(params.q_factor * sr / freqs[0])) // 2
    padded = np.concatenate([np.zeros(max_half), audio.samples, np.zeros(max_half + 1)])
    idx = np.round(centers * sr).astype(np.int64) + max_half

    out = np.zeros((centers.size, len(freqs)))
    for k, f in enumerate(freqs):
        kern, half = _kernel(f, params, sr)
        frames = sliding_window_view(padded, 2 * half + 1)
        step = max(1, _CHUNK_BYTES // (8 * (2 * half + 1)))
        for s in range(0, centers.size, step):
            block = frames[idx[s : s + step] - half]
            re_im = block @ kern
            out[s : s + step, k] = np.hypot(re_im[:, 0], re_im[:, 1])
    return CqtMatrix(out, centers)


# 3.6 ms rounded to whole samples at the analysis rate (3.583 ms)
UNSYNC_HOP_SEC = 79 / ANALYSIS_RATE


def fixed_hop_centers(duration: float, hop_sec: float) -> np.ndarray:
    if hop_sec <= 0:
        raise ValueError("hop_sec must be positive")
    n = int(np.floor(duration / hop_sec + 1e-9)) + 1
    return np.arange(n) * hop_sec


def cqt_fixed_hop(audio: AudioBuffer, params: CqtParams, hop_sec: float) -> CqtMatrix:
    """CQT frames at 0, hop, 2*hop, ... up to the track duration."""
    return cqt_at_times(audio, params, fixed_hop_centers(audio.duration_sec, hop_sec))


# --- beat tracking ---------------------------------------------------------

_BT_NFFT = 2048
_BT_HOP = 256
_BT_TIGHTNESS = 100.0


def onset_envelope(audio: AudioBuffer) -> tuple[np.ndarray, float]:
    """Spectral-flux onset strength and its frame rate."""
    sr = audio.sample_rate
    _, _, spec = stft(
        audio.samples,
        fs=sr,
        window="hann",
        nperseg=_BT_NFFT,
        noverlap=_BT_NFFT - _BT_HOP,
        boundary="zeros",
        padded=True,
    )
    logmag = np.log1p(1000.0 * np.abs(spec))
    flux = np.maximum(np.diff(logmag, axis=1), 0.0).sum(axis=0)
    env = np.concatenate([[0.0], flux])
    # remove slow trends so the DP sees onsets, not loudness
    win = int(round(sr / _BT_HOP))  # ~1 s
    if env.size > win:
        trend = np.convolve(env, np.ones(win) / win, mode="same")
        env = np.maximum(env - trend, 0.0)
    return env, sr / _BT_HOP


def estimate_period(env: np.ndarray, frame_rate: float, bpm_range=(60.0, 180.0)) -> float:
    """Beat period in frames from the onset autocorrelation.

    A weak log-normal prior centered at 120 BPM breaks octave ties.
    """
    x = env - env.mean()
    n = x.size
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    ac = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    lo = int(np.floor(frame_rate * 60.0 / bpm_range[1]))
    hi = int(np.ceil(frame_rate * 60.0 / bpm_range[0]))
    hi = min(hi, n - 2)
    if hi <= lo:
        return frame_rate * 0.5
    lags = np.arange(lo, hi + 1)
    bpm = 60.0 * frame_rate / lags
    prior = np.exp(-0.5 * (np.log2(bpm / 120.0) / 1.0) ** 2)
    score = ac[lo : hi + 1] * prior
    j = int(np.argmax(score))
    lag = float(lags[j])
    if 0 < j < len(score) - 1:
        a, b, c = score[j - 1], score[j], score[j + 1]
        denom = a - 2 * b + c
        if denom < 0:
            lag += 0.5 * (a - c) / denom
    return lag


def _dp_beats(env: np.ndarray, period: float) -> np.ndarray:
    """Dynamic-programming beat sequence (onset strength vs tempo penalty)."""
    std = env.std()
    norm = env / (std + 1e-12)
    p = max(int(round(period)), 2)
    width = np.arange(-p, p + 1)
    local = np.convolve(norm, np.exp(-0.5 * (width * 32.0 / p) ** 2), mode="same")

    n = local.size
    cum = np.zeros(n)
    back = np.full(n, -1, dtype=np.int64)
    offsets = np.arange(int(round(p / 2)), 2 * p + 1)
    penalty = -_BT_TIGHTNESS * np.log(offsets / period) ** 2
    thresh = 0.01 * local.max()
    started = False
    for i in range(n):
        cand = i - offsets
        ok = cand >= 0
        if ok.any():
            scores = cum[cand[ok]] + penalty[ok]
            j = int(np.argmax(scores))
            cum[i] = local[i] + scores[j]
            best = int(cand[ok][j])
        else:
            cum[i] = local[i]
            best = -1
        if not started and local[i] < thresh:
            back[i] = -1
        else:
            back[i] = best
            started = True

    # last beat: final local max of cumscore above half the median local max
    is_max = np.zeros(n, dtype=bool)
    is_max[1:-1] = (cum[1:-1] > cum[:-2]) & (cum[1:-1] >= cum[2:])
    if not is_max.any():
        return np.array([], dtype=np.int64)
    thr = 0.5 * np.median(cum[is_max])
    tail = int(np.nonzero(is_max & (cum >= thr))[0][-1])
    beats = []
    while tail >= 0:
        beats.append(tail)
        tail = int(back[tail])
    beats = np.array(beats[::-1], dtype=np.int64)

    # trim weak leading/trailing beats
    strength = local[beats]
    smooth = np.convolve(strength, np.hanning(5), mode="same")
    cut = 0.5 * np.sqrt(np.mean(smooth**2))
    keep = np.nonzero(strength > cut)[0]
    if keep.size == 0:
        return beats
    return beats[keep[0] : keep[-1] + 1]


def uniform_grid(duration: float, period: float = 0.5) -> BeatGrid:
    n = int(np.floor(duration / period + 1e-9)) + 1
    return BeatGrid(np.arange(max(n, 1)) * period)


def track_beats(audio: AudioBuffer) -> BeatGrid:
    """Estimate beat times.

    Spectral-flux onset envelope, autocorrelation tempo over 60-180 BPM, then
    a dynamic program trading onset strength against log-tempo deviation.
    Silent or unbeatable input yields a uniform 120 BPM grid.
    """
    if audio.samples.size == 0:
        raise ValueError("empty audio")
    duration = audio.duration_sec
    env, rate = onset_envelope(audio)
    if env.max() <= 1e-8 or env.size < 8:
        return uniform_grid(duration)
    period = estimate_period(env, rate)
    frames = _dp_beats(env, period)
    times = frames / rate
    times = times[(times >= 0) & (times <= duration)]
    if times.size < 2:
        return uniform_grid(duration)
    return BeatGrid(extend_grid(np.unique(times), duration))


def extend_grid(times: np.ndarray, duration: float) -> np.ndarray:
    """Continue a beat sequence at its median period to cover ``[0, duration]``.

    The tracker drops weak beats at the ends, which would leave quiet intro
    or outro sections without any frames.
    """
    period = float(np.median(np.diff(times)))
    head = times[0] - period * np.arange(int(np.floor(times[0] / period + 1e-9)), 0, -1)
    n_tail = int(np.floor((duration - times[-1]) / period + 1e-9))
    tail = times[-1] + period * np.arange(1, n_tail + 1)
    return np.concatenate([head, times, tail])


def read_beat_file(path: str | Path) -> BeatGrid:
    """One beat time in seconds per line; blank lines and ``#`` comments ignored."""
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            values.append(float(line.split()[0]))
    return BeatGrid(np.array(values))


def write_beat_file(path: str | Path, beats: BeatGrid) -> None:
    Path(path).write_text("".join(f"{t:.6f}\n" for t in beats.beat_times))


# --- 2D Fourier magnitude -------------------------------------------------


def twodfft_feature(segment: np.ndarray, expected_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Flattened ``log(|DFT2(segment)| + 1e-6)``.

    ``segment`` is a log-magnitude (frequency x time) excerpt. No window and
    no fftshift are applied, so the result is invariant to circular shifts
    of the input along either axis.
    """
    seg = np.asarray(segment, dtype=np.float64)
    if seg.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D segment, got shape {seg.shape}")
    if expected_shape is not None and seg.shape != tuple(expected_shape):
        raise ShapeMismatch(f"expected {tuple(expected_shape)}, got {seg.shape}")
    return np.log(np.abs(np.fft.fft2(seg)) + LOG_EPS).ravel()
