"""Beat-synchronized CQT patches and the on-disk feature store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .dsp import BeatGrid, CqtMatrix, CqtParams, cqt_at_times, log_compress
from .errors import CorruptManifest, IndexOutOfRange, ShapeMismatch, TooFewBeats

MANIFEST = "manifest.json"
TENSOR = "cqt.f32"


@dataclass(frozen=True)
class PatchConfig:
    B: int = 16
    R: int = 8
    K: int = 72

    @property
    def Q(self) -> int:
        return self.B * self.R

    def validate(self) -> None:
        if self.B < 2 or self.B % 2 or self.R < 1 or self.K < 1:
            raise ValueError(f"invalid patch config {self}; B must be even and >= 2")


@dataclass(frozen=True)
class Patch:
    values: np.ndarray  # Q x K
    center_beat: int


def subdivision_centers(beats: BeatGrid, R: int) -> np.ndarray:
    """``R`` evenly spaced analysis times per inter-beat interval.

    The final beat gets ``R`` times extrapolated with the last interval, so
    the result always has ``L * R`` entries.
    """
    b = np.asarray(beats.beat_times, dtype=np.float64)
    if b.size < 2:
        raise TooFewBeats(f"need at least 2 beats, got {b.size}")
    ext = np.append(b, b[-1] + (b[-1] - b[-2]))
    frac = np.arange(R) / R
    return (ext[:-1, None] + frac[None, :] * np.diff(ext)[:, None]).ravel()


def _patch_rows(rows: np.ndarray, i: int, config: PatchConfig) -> np.ndarray:
    n_rows = rows.shape[0]
    L = n_rows // config.R
    if not 0 <= i < L:
        raise IndexOutOfRange(f"beat index {i} outside [0, {L})")
    start = (i - config.B // 2) * config.R
    idx = np.clip(np.arange(start, start + config.Q), 0, n_rows - 1)
    return rows[idx]


def extract_patch(cqt: CqtMatrix, beat_index: int, config: PatchConfig) -> Patch:
    """Log-magnitude patch spanning beats ``[i - B/2, i + B/2)``.

    ``cqt`` must hold one frame per subdivision center. Rows outside the
    track are filled by replicating the nearest edge row.
    """
    if cqt.magnitudes.shape[1] != config.K:
        raise ShapeMismatch(f"CQT has {cqt.magnitudes.shape[1]} bins, config wants {config.K}")
    return Patch(_patch_rows(log_compress(cqt.magnitudes), beat_index, config), beat_index)


@dataclass
class FeatureStore:
    """Per-track log-CQT rows at beat subdivisions; patches are sliced on demand."""

    track_id: str
    rows: np.ndarray  # (L*R) x K, float32 log-magnitudes
    beat_grid: BeatGrid
    config: PatchConfig

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[1] != self.config.K:
            raise ShapeMismatch(f"rows shape {self.rows.shape} does not match K={self.config.K}")
        if self.rows.shape[0] != self.beat_grid.L * self.config.R:
            raise ShapeMismatch(
                f"{self.rows.shape[0]} rows for L={self.beat_grid.L}, R={self.config.R}"
            )

    @property
    def L(self) -> int:
        return self.beat_grid.L

    def patch(self, i: int) -> Patch:
        return Patch(_patch_rows(self.rows, i, self.config), i)

    def patches(self, indices) -> np.ndarray:
        """Stack of patches, shape ``(n, Q, K)``."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.L):
            raise IndexOutOfRange(f"beat indices outside [0, {self.L})")
        R, n_rows = self.config.R, self.rows.shape[0]
        offs = np.arange(self.config.Q) - (self.config.B // 2) * R
        idx = np.clip(indices[:, None] * R + offs[None, :], 0, n_rows - 1)
        return self.rows[idx]

    def segment(self, center_beat: int, n_beats: int = 8) -> np.ndarray:
        """Log-CQT excerpt of ``n_beats`` beats centered on a beat, as (K, n_beats*R)."""
        R, n_rows = self.config.R, self.rows.shape[0]
        start = (center_beat - n_beats // 2) * R
        idx = np.clip(np.arange(start, start + n_beats * R), 0, n_rows - 1)
        return self.rows[idx].T


def build_store(
    audio: AudioBuffer,
    beats: BeatGrid,
    track_id: str,
    cqt_params: CqtParams = CqtParams(),
    config: PatchConfig = PatchConfig(),
) -> FeatureStore:
    if cqt_params.K != config.K:
        raise ShapeMismatch(f"CQT K={cqt_params.K} but patch K={config.K}")
    centers = subdivision_centers(beats, config.R)
    # extrapolated tail may run past the end of the audio
    centers = np.clip(centers, 0.0, audio.duration_sec)
    cqt = cqt_at_times(audio, cqt_params, centers)
    return FeatureStore(track_id, log_compress(cqt.magnitudes), beats, config)


def save_store(store: FeatureStore, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "track_id": store.track_id,
        "L": store.L,
        "K": store.config.K,
        "Q": store.config.Q,
        "B": store.config.B,
        "R": store.config.R,
        "beat_times": [float(t) for t in store.beat_grid.beat_times],
        "dtype": "float32",
        "byte_order": "little",
    }
    store.rows.astype("<f4").tofile(directory / TENSOR)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_store(directory: str | Path) -> FeatureStore:
    directory = Path(directory)
    try:
        m = json.loads((directory / MANIFEST).read_text())
        config = PatchConfig(B=int(m["B"]), R=int(m["R"]), K=int(m["K"]))
        L = int(m["L"])
        beat_times = np.array(m["beat_times"], dtype=np.float64)
        track_id = str(m["track_id"])
        q = int(m["Q"])
        dtype, order = m["dtype"], m["byte_order"]
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifest(f"{directory}: {exc}") from exc
    if q != config.Q or len(beat_times) != L or dtype != "float32" or order != "little":
        raise CorruptManifest(f"{directory}: inconsistent manifest")
    raw = np.fromfile(directory / TENSOR, dtype="<f4")
    expected = L * config.R * config.K
    if raw.size != expected:
        raise ShapeMismatch(
            f"{directory}: tensor has {raw.size} values, manifest implies {L * config.R}x{config.K}"
        )
    rows = raw.reshape(L * config.R, config.K)
    return FeatureStore(track_id, rows, BeatGrid(beat_times), config)


def save_to_dataset(store: FeatureStore, root: str | Path) -> Path:
    return save_store(store, Path(root) / store.track_id)


def load_dataset(root: str | Path) -> dict[str, FeatureStore]:
    """All stores under ``root`` (one subdirectory each), keyed by track id."""
    out = {}
    for sub in sorted(Path(root).iterdir()):
        if (sub / MANIFEST).is_file():
            store = load_store(sub)
            out[store.track_id] = store
    return out
