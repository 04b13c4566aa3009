"""Pipeline configuration as a flat ``section.key = value`` text file."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .audio import ANALYSIS_RATE
from .dsp import CqtParams
from .embedding import ArchConfig, TrainConfig
from .errors import ConfigError
from .features import PatchConfig
from .sampling import SamplingParams
from .segmentation import SegmentParams

_SECTION = "segbed"


@dataclass(frozen=True)
class EvalConfig:
    window_sec: float = 3.0


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = ANALYSIS_RATE


@dataclass(frozen=True)
class PipelineConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    cqt: CqtParams = field(default_factory=CqtParams)
    patch: PatchConfig = field(default_factory=PatchConfig)
    sampling: SamplingParams = field(default_factory=SamplingParams)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    segment: SegmentParams = field(default_factory=SegmentParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # K and the network input shape follow from the CQT and patch settings
        K = self.cqt.K
        if self.patch.K != K:
            object.__setattr__(self, "patch", dataclasses.replace(self.patch, K=K))
        shape = (self.patch.Q, K)
        if tuple(self.arch.input_shape) != shape:
            object.__setattr__(self, "arch", dataclasses.replace(self.arch, input_shape=shape))

    def validate(self) -> None:
        try:
            self.cqt.validate(self.audio.sample_rate)
            self.patch.validate()
            self.sampling.validate()
            self.segment.validate()
            self.arch.param_shapes()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.eval.window_sec <= 0:
            raise ConfigError("eval.window_sec must be > 0")
        t = self.train
        if t.margin <= 0 or t.lr <= 0 or t.epochs < 1 or t.batches_per_epoch < 1:
            raise ConfigError("train: margin, lr, epochs and batches_per_epoch must be positive")
        if t.tracks_per_batch < 1 or t.triplets_per_track < 1:
            raise ConfigError("train: tracks_per_batch and triplets_per_track must be >= 1")


# keys that are derived rather than set
_DERIVED = {("patch", "K"), ("arch", "input_shape")}


def _items(cfg: PipelineConfig):
    for sec in dataclasses.fields(cfg):
        sub = getattr(cfg, sec.name)
        for f in dataclasses.fields(sub):
            if (sec.name, f.name) not in _DERIVED:
                yield sec.name, f.name, getattr(sub, f.name)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("true", "yes", "on", "1"):
        return True
    if s in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_like(text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in (x.strip() for x in text.split(",")) if p]
        kind = type(default[0]) if default else int
        return tuple(_parse_like(p, kind()) for p in parts)
    return text.strip()


def dumps(cfg: PipelineConfig | None = None) -> str:
    cfg = cfg or PipelineConfig()
    lines = ["# segbed pipeline configuration", ""]
    last = None
    for sec, key, val in _items(cfg):
        if sec != last and last is not None:
            lines.append("")
        last = sec
        lines.append(f"{sec}.{key} = {_fmt(val)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> PipelineConfig:
    """Parse config text; unset keys keep their defaults.

    Raises
    ------
    ConfigError
        Unknown or duplicated key, unparsable value, or a value that fails
        validation.
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if parser.sections() != [_SECTION]:
        raise ConfigError("config must be flat key = value lines without [sections]")
    base = PipelineConfig()
    known = {(s, k): v for s, k, v in _items(base)}
    updates: dict[str, dict] = {}
    for full, raw in parser.items(_SECTION):
        sec, _, key = full.partition(".")
        if (sec, key) not in known:
            raise ConfigError(f"unknown config key {full!r}")
        try:
            updates.setdefault(sec, {})[key] = _parse_like(raw, known[(sec, key)])
        except ValueError as exc:
            raise ConfigError(f"{full}: {exc}") from None
    subs = {}
    for sec in dataclasses.fields(base):
        sub = getattr(base, sec.name)
        if sec.name in updates:
            try:
                sub = dataclasses.replace(sub, **updates[sec.name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sec.name}: {exc}") from None
        subs[sec.name] = sub
    try:
        cfg = PipelineConfig(**subs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def load(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return loads(Path(path).read_text())
