"""Procedural multi-section test tracks with exact section annotations.

Each track runs at one fixed tempo and concatenates 4 to 8 sections. A
section plays a *texture*: a looped four-chord progression rendered with its
own timbre, register, rhythm pattern and optional noise percussion. Labels
name textures, so a texture may return later in the track (A B A C ...), but
neighbouring sections always differ.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import ANALYSIS_RATE, write_wav
from .dsp import BeatGrid, write_beat_file
from .evaluation import write_annotations

_STEPS = 4  # rhythm grid: sixteenth notes
_PROGRESSION_DEGREES = (0, 1, 2, 3, 4, 5)  # I ii iii IV V vi
_MAJOR = (0, 2, 4, 5, 7, 9, 11)


@dataclass(frozen=True)
class SynthConfig:
    duration_sec: float = 180.0
    min_segments: int = 4
    max_segments: int = 8
    n_textures: int = 4
    min_bars: int = 6
    tempo_range: tuple = (90.0, 130.0)
    sample_rate: int = ANALYSIS_RATE
    noise_db: float = -45.0

    def validate(self) -> None:
        if not 1 <= self.min_segments <= self.max_segments:
            raise ValueError("need 1 <= min_segments <= max_segments")
        if self.n_textures < 2 and self.max_segments > 1:
            raise ValueError("need at least 2 textures so neighbouring sections differ")
        if self.duration_sec <= 0 or self.min_bars < 1:
            raise ValueError("duration_sec and min_bars must be positive")


@dataclass(frozen=True)
class Texture:
    chords: tuple  # four triads of MIDI pitches
    harmonics: np.ndarray  # partial amplitudes
    decay: float  # seconds, amplitude e-folding time
    attack: float
    pattern: np.ndarray  # bool, one bar of sixteenths
    bass_pattern: np.ndarray
    arpeggio: bool
    hat_pattern: np.ndarray | None
    gain: float


@dataclass(frozen=True)
class SynthTrack:
    track_id: str
    samples: np.ndarray
    sample_rate: int
    tempo_bpm: float
    beat_times: np.ndarray
    intervals: tuple  # ((start_sec, end_sec, label), ...)


def random_texture(rng: np.random.Generator) -> Texture:
    key = int(rng.integers(12))
    register = int(rng.choice([36, 43, 50, 57, 64]))
    degrees = rng.choice(_PROGRESSION_DEGREES, size=4, replace=True)
    chords = []
    for d in degrees:
        tones = [_MAJOR[(d + k) % 7] + 12 * ((d + k) // 7) for k in (0, 2, 4)]
        chords.append(tuple(register + key + t for t in tones))
    n_harm = int(rng.integers(1, 11))
    slope = rng.uniform(0.3, 0.95)
    h = slope ** np.arange(n_harm)
    if rng.random() < 0.4:
        h[1::2] *= rng.uniform(0.0, 0.2)  # hollow, clarinet-like
    density = rng.uniform(0.2, 0.7)
    pattern = rng.random(4 * _STEPS) < density
    pattern[0] = True
    bass = np.zeros(4 * _STEPS, bool)
    bass[:: int(rng.choice([4, 8, 16]))] = True
    hats = None
    if rng.random() < 0.6:
        hats = rng.random(4 * _STEPS) < rng.uniform(0.2, 0.8)
    return Texture(
        chords=tuple(chords),
        harmonics=h / h.sum(),
        decay=float(rng.choice([0.08, 0.2, 0.5, 1.5])),
        attack=float(rng.choice([0.002, 0.01, 0.06])),
        pattern=pattern,
        bass_pattern=bass,
        arpeggio=bool(rng.random() < 0.5),
        hat_pattern=hats,
        gain=float(rng.uniform(0.6, 1.0)),
    )


def _midi_hz(m: float) -> float:
    return 440.0 * 2.0 ** ((m - 69) / 12)


class _NoteCache:
    """Rendered single notes keyed by (texture id, pitch, length)."""

    def __init__(self, sr: int):
        self.sr = sr
        self._cache: dict = {}

    def note(self, tex_id: int, tex: Texture, pitch: int, n: int) -> np.ndarray:
        key = (tex_id, pitch, n)
        if key not in self._cache:
            t = np.arange(n) / self.sr
            f0 = _midi_hz(pitch)
            k = np.arange(1, tex.harmonics.size + 1)
            keep = k * f0 < 0.45 * self.sr
            phase = 2 * np.pi * f0 * np.outer(k[keep], t)
            wave = tex.harmonics[keep] @ np.sin(phase)
            env = np.minimum(1.0, t / tex.attack) * np.exp(-t / tex.decay)
            fade = min(n, int(0.005 * self.sr))
            env[n - fade :] *= np.linspace(1.0, 0.0, fade)
            self._cache[key] = wave * env
        return self._cache[key]


def _hat(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    x = np.diff(rng.standard_normal(n + 1))  # crude high-pass
    return 0.15 * x * np.exp(-np.arange(n) / (0.02 * sr))


def _split_bars(total: int, n_seg: int, min_bars: int, rng: np.random.Generator) -> np.ndarray:
    spare = total - n_seg * min_bars
    if spare < 0:
        raise ValueError("track too short for the requested number of sections")
    cuts = np.sort(rng.integers(0, spare + 1, size=n_seg - 1))
    extra = np.diff(np.concatenate([[0], cuts, [spare]]))
    return extra + min_bars


def _labels(n_seg: int, n_tex: int, rng: np.random.Generator) -> list[int]:
    seq = [0]
    for _ in range(n_seg - 1):
        # fresh texture while any remain unused, else any different one
        unused = [t for t in range(n_tex) if t not in seq]
        pool = unused if unused and rng.random() < 0.7 else [t for t in range(n_tex) if t != seq[-1]]
        seq.append(int(rng.choice(pool)))
    return seq


def _label_name(j: int) -> str:
    return string.ascii_uppercase[j % 26] + ("" if j < 26 else str(j // 26))


def render_track(track_id: str, rng: np.random.Generator, config: SynthConfig = SynthConfig()) -> SynthTrack:
    """Render one track; all randomness comes from ``rng``."""
    config.validate()
    sr = config.sample_rate
    bpm = float(rng.uniform(*config.tempo_range))
    beat = 60.0 / bpm
    n_bars = max(1, int(round(config.duration_sec / (4 * beat))))
    n_seg = int(rng.integers(config.min_segments, config.max_segments + 1))
    n_seg = min(n_seg, max(1, n_bars // config.min_bars))
    bars = _split_bars(n_bars, n_seg, config.min_bars, rng)
    n_tex = max(config.n_textures, 2)
    textures = [random_texture(rng) for _ in range(n_tex)]
    labels = _labels(n_seg, n_tex, rng)

    step = beat / _STEPS
    total_beats = 4 * n_bars
    n_out = int(np.ceil(total_beats * beat * sr)) + 1
    out = np.zeros(n_out + int(4 * beat * sr) + 1)
    cache = _NoteCache(sr)

    def add(x, start):
        s = int(round(start * sr))
        seg = out[s : s + x.size]
        seg += x[: seg.size]

    bar0 = 0
    intervals = []
    for seg_bars, lab in zip(bars, labels):
        tex = textures[lab]
        t_start = bar0 * 4 * beat
        intervals.append((float(t_start), float((bar0 + seg_bars) * 4 * beat), _label_name(lab)))
        for b in range(seg_bars):
            chord = tex.chords[(bar0 + b) % 4]
            bar_t = (bar0 + b) * 4 * beat
            for s in np.flatnonzero(tex.pattern):
                vel = tex.gain * rng.uniform(0.7, 1.0)
                n = int(min(4 * tex.decay, 4 * beat) * sr)
                tones = [chord[s % 3]] if tex.arpeggio else chord
                for p in tones:
                    add(vel * cache.note(lab, tex, p, n), bar_t + s * step)
            for s in np.flatnonzero(tex.bass_pattern):
                n = int(min(2 * beat, 1.0) * sr)
                root = chord[0] - 12 if chord[0] >= 52 else chord[0]
                add(0.8 * tex.gain * cache.note(lab, tex, root, n), bar_t + s * step)
            if tex.hat_pattern is not None:
                for s in np.flatnonzero(tex.hat_pattern):
                    add(_hat(rng, int(0.1 * sr), sr), bar_t + s * step)
        bar0 += seg_bars

    end = total_beats * beat
    out = out[: int(round(end * sr))]
    out += 10 ** (config.noise_db / 20) * rng.standard_normal(out.size)
    out *= 0.9 / max(np.max(np.abs(out)), 1e-9)
    beats = np.arange(total_beats) * beat
    return SynthTrack(track_id, out.astype(np.float32), sr, bpm, beats, tuple(intervals))


def generate_corpus(
    out_dir: str | Path,
    n_tracks: int,
    seed: int = 0,
    config: SynthConfig = SynthConfig(),
    beats_dir: str | Path | None = None,
) -> list[str]:
    """Write ``<id>.wav`` and ``<id>.tsv`` per track (plus ``<id>.txt`` beats).

    Track ``k`` depends only on ``seed`` and ``k``, so corpora of different
    sizes share their common prefix.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if beats_dir is not None:
        Path(beats_dir).mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_tracks)
    ids = []
    for k, child in enumerate(children):
        tid = f"synth_{k:03d}"
        tr = render_track(tid, np.random.default_rng(child), config)
        write_wav(out_dir / f"{tid}.wav", tr.samples, tr.sample_rate)
        write_annotations(out_dir / f"{tid}.tsv", tr.intervals)
        if beats_dir is not None:
            write_beat_file(Path(beats_dir) / f"{tid}.txt", BeatGrid(tr.beat_times))
        ids.append(tid)
    return ids
