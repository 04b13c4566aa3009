import numpy as np
import pytest

from segbed.audio import AudioBuffer
from segbed.dsp import BeatGrid
from segbed.features import FeatureStore, PatchConfig

SR = 22050


def sine(freq, dur, sr=SR, amp=1.0):
    t = np.arange(int(round(dur * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def click_track(bpm, dur, sr=SR, offset=0.0):
    x = np.zeros(int(round(dur * sr)))
    burst = np.hanning(64) * np.sin(2 * np.pi * 2000 * np.arange(64) / sr)
    for t in np.arange(offset, dur - 0.01, 60.0 / bpm):
        s = int(round(t * sr))
        x[s : s + 64] += burst[: x.size - s]
    return AudioBuffer(x, sr)


def make_store(L=40, config=PatchConfig(B=4, R=2, K=6), rng=None, rows=None, track_id="t"):
    rng = np.random.default_rng(0) if rng is None else rng
    if rows is None:
        rows = rng.standard_normal((L * config.R, config.K))
    return FeatureStore(track_id, rows, BeatGrid(np.arange(L) * 0.5), config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed in the terminal summary
_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
