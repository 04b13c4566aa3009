"""WAV ingestion: decode, downmix, resample to the analysis rate."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import EmptyAudio, UnsupportedFormat

ANALYSIS_RATE = 22050


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration_sec(self) -> float:
        return len(self.samples) / self.sample_rate


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise UnsupportedFormat(f"unsupported sample type {data.dtype}; need PCM16 or float32")


def resample(x: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling (Kaiser window)."""
    if orig_rate == target_rate:
        return x
    g = gcd(int(orig_rate), int(target_rate))
    return resample_poly(x, target_rate // g, orig_rate // g)


def load_audio(path: str | Path, target_rate: int = ANALYSIS_RATE) -> AudioBuffer:
    """Load a WAV file as a mono buffer at ``target_rate``.

    Stereo is downmixed by averaging channels. The result is peak-normalized
    only when some sample exceeds unit magnitude.

    Raises
    ------
    UnsupportedFormat
        Not a RIFF/WAV file, or a sample type other than PCM16/float32.
    EmptyAudio
        The file decodes to zero samples.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    x = _to_float(data)
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise UnsupportedFormat(f"{path}: {x.shape[1]} channels")
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyAudio(str(path))
    x = resample(x, rate, target_rate)
    if x.size == 0:
        raise EmptyAudio(str(path))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return AudioBuffer(np.ascontiguousarray(x), int(target_rate))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples in [-1, 1] as PCM16."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), int(sample_rate), pcm)
