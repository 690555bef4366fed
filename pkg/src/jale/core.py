"""Shared domain types and the versioned config document."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

log = logging.getLogger(__name__)

CONFIG_VERSION = "jale-config/1"

# x265 preset names keyed by speed rank, 0 = fastest.
PRESET_NAMES = {
    0: "ultrafast",
    1: "superfast",
    2: "veryfast",
    3: "faster",
    4: "fast",
    5: "medium",
    6: "slow",
    7: "slower",
    8: "veryslow",
    9: "placebo",
}

HLS_HEIGHTS = (360, 432, 540, 540, 540, 720, 720, 1080, 1080, 1440, 2160, 2160)
HLS_BITRATES = (0.145, 0.300, 0.600, 0.900, 1.600, 2.400, 3.400, 4.500, 5.800, 8.100, 11.600, 16.800)


class JaleError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(JaleError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def preset_name(preset: int) -> str:
    return PRESET_NAMES.get(preset, f"preset{preset}")


@dataclass(frozen=True)
class Representation:
    height: int
    bitrate: float  # Mbps
    index: int  # 1-based rung position

    def __post_init__(self):
        if self.height <= 0:
            raise ConfigError("height", f"must be positive, got {self.height}")
        if not self.bitrate > 0 or not math.isfinite(self.bitrate):
            raise ConfigError("bitrate", f"must be positive, got {self.bitrate}")

    @property
    def key(self) -> tuple[int, float]:
        return (self.height, self.bitrate)


@dataclass(frozen=True, order=True)
class ThreadPresetPair:
    threads: int
    preset: int

    def __str__(self) -> str:
        return f"({self.threads},{preset_name(self.preset)})"


@dataclass(frozen=True)
class SegmentFeatures:
    """DCT-energy complexity of one segment (luma only)."""

    texture_energy: float
    temporal_gradient: float
    luminescence: float
    frame_count: int = 1
    block_size: int = 32

    def __post_init__(self):
        for name in ("texture_energy", "temporal_gradient", "luminescence"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def as_vector(self) -> tuple[float, float, float]:
        return (self.texture_energy, self.temporal_gradient, self.luminescence)

    def to_dict(self) -> dict:
        return {
            "E_Y": self.texture_energy,
            "h": self.temporal_gradient,
            "L_Y": self.luminescence,
            "frame_count": self.frame_count,
            "block_size": self.block_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentFeatures":
        return cls(
            float(d["E_Y"]),
            float(d["h"]),
            float(d["L_Y"]),
            int(d.get("frame_count", 1)),
            int(d.get("block_size", 32)),
        )


@dataclass(frozen=True)
class JaleConfig:
    ladder: tuple[Representation, ...]
    presets: tuple[int, ...]  # slowest first
    threads: tuple[int, ...]  # ascending
    total_threads: int
    target_speed: float
    jnd: float
    vmaf_cap: float
    vmaf_cap_override: bool = False
    frame_rate: float = 30.0
    forest: Mapping[str, Any] = field(default_factory=dict)
    simulator: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        validate_config(self)

    @property
    def q(self) -> int:
        return len(self.ladder)

    def with_jnd(self, jnd: float) -> "JaleConfig":
        """Copy with a new JND and the matching cap (overrides are dropped)."""
        return replace(self, jnd=jnd, vmaf_cap=100.0 - jnd, vmaf_cap_override=False)

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "ladder": [{"height": r.height, "bitrate": r.bitrate} for r in self.ladder],
            "presets": list(self.presets),
            "threads": list(self.threads),
            "total_threads": self.total_threads,
            "target_speed": self.target_speed,
            "frame_rate": self.frame_rate,
            "jnd": self.jnd,
        }
        if self.vmaf_cap_override:
            d["vmaf_cap"] = self.vmaf_cap
            d["vmaf_cap_override"] = True
        if self.forest:
            d["forest"] = dict(self.forest)
        if self.simulator:
            d["simulator"] = dict(self.simulator)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def validate_config(cfg: JaleConfig) -> None:
    if not cfg.ladder:
        raise ConfigError("ladder", "must not be empty")
    for k, rep in enumerate(cfg.ladder):
        if rep.index != k + 1:
            raise ConfigError(f"ladder[{k}].index", f"expected {k + 1}, got {rep.index}")
        if k and rep.bitrate <= cfg.ladder[k - 1].bitrate:
            raise ConfigError(f"ladder[{k}].bitrate", "bitrates must strictly increase")
    if not cfg.presets:
        raise ConfigError("presets", "must not be empty")
    if len(set(cfg.presets)) != len(cfg.presets):
        raise ConfigError("presets", "duplicate preset")
    if any(p < 0 for p in cfg.presets):
        raise ConfigError("presets", "preset identifiers are non-negative")
    if list(cfg.presets) != sorted(cfg.presets, reverse=True):
        raise ConfigError("presets", "must be ordered slowest to fastest")
    if not cfg.threads:
        raise ConfigError("threads", "must not be empty")
    if list(cfg.threads) != sorted(set(cfg.threads)) or cfg.threads[0] <= 0:
        raise ConfigError("threads", "must be positive and strictly ascending")
    if cfg.total_threads <= 0:
        raise ConfigError("total_threads", "must be positive")
    for k, n in enumerate(cfg.threads):
        if n > cfg.total_threads:
            raise ConfigError(f"threads[{k}]", f"{n} exceeds total_threads={cfg.total_threads}")
    if not cfg.target_speed > 0:
        raise ConfigError("target_speed", "must be positive")
    if not 0 <= cfg.jnd <= 100:
        raise ConfigError("jnd", "must lie in [0, 100]")
    if not 0 <= cfg.vmaf_cap <= 100:
        raise ConfigError("vmaf_cap", "must lie in [0, 100]")
    if not cfg.vmaf_cap_override and not math.isclose(cfg.jnd + cfg.vmaf_cap, 100.0, abs_tol=1e-9):
        raise ConfigError("vmaf_cap", "must equal 100 - jnd unless vmaf_cap_override is set")


def make_ladder(heights: Sequence[int], bitrates: Sequence[float]) -> tuple[Representation, ...]:
    if len(heights) != len(bitrates):
        raise ConfigError("ladder", "heights and bitrates differ in length")
    return tuple(Representation(int(h), float(b), k + 1) for k, (h, b) in enumerate(zip(heights, bitrates)))


def default_hls_ladder() -> JaleConfig:
    """HLS ladder on x265, presets medium..ultrafast, 4-24 threads, 96 total."""
    return JaleConfig(
        ladder=make_ladder(HLS_HEIGHTS, HLS_BITRATES),
        presets=(5, 4, 3, 2, 1, 0),
        threads=(4, 8, 12, 16, 20, 24),
        total_threads=96,
        target_speed=30.0,
        jnd=6.0,
        vmaf_cap=94.0,
    )


def _need(doc: Mapping, key: str, path: str = ""):
    if key not in doc:
        raise ConfigError(f"{path}{key}", "missing")
    return doc[key]


def config_from_dict(doc: Mapping) -> JaleConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("", "config document must be a mapping")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError("version", f"expected {CONFIG_VERSION!r}, got {version!r}")
    raw_ladder = _need(doc, "ladder")
    if not isinstance(raw_ladder, list) or not raw_ladder:
        raise ConfigError("ladder", "must be a non-empty list")
    ladder = []
    for k, rung in enumerate(raw_ladder):
        try:
            ladder.append(Representation(int(_need(rung, "height")), float(_need(rung, "bitrate")), k + 1))
        except ConfigError as exc:
            raise ConfigError(f"ladder[{k}].{exc.path}", str(exc).split(": ", 1)[-1]) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"ladder[{k}]", str(exc)) from None

    try:
        presets = tuple(int(p) for p in _need(doc, "presets"))
        threads = tuple(int(n) for n in _need(doc, "threads"))
        total = int(_need(doc, "total_threads"))
        target = float(_need(doc, "target_speed"))
        jnd = float(_need(doc, "jnd"))
        override = bool(doc.get("vmaf_cap_override", False))
        cap = float(doc["vmaf_cap"]) if "vmaf_cap" in doc else 100.0 - jnd
        frame_rate = float(doc.get("frame_rate", 30.0))
    except (TypeError, ValueError) as exc:
        raise ConfigError("", f"malformed field: {exc}") from None

    cfg = JaleConfig(
        ladder=tuple(ladder),
        presets=presets,
        threads=threads,
        total_threads=total,
        target_speed=target,
        jnd=jnd,
        vmaf_cap=cap,
        vmaf_cap_override=override,
        frame_rate=frame_rate,
        forest=dict(doc.get("forest") or {}),
        simulator=dict(doc.get("simulator") or {}),
    )
    if override:
        log.warning("vmaf_cap=%s overrides 100 - jnd = %s", cap, 100.0 - jnd)
    return cfg


def load_config(source: str) -> JaleConfig:
    """Parse a YAML (or JSON) config document and validate it."""
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"parse failure: {exc}") from None
    return config_from_dict(doc)


def read_config(path: str | Path) -> JaleConfig:
    return load_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: JaleConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


@dataclass(frozen=True)
class PlanEntry:
    representation: Representation
    pair: ThreadPresetPair
    predicted_speed: float
    predicted_vmaf: float
    retained: bool = True
    feasible: bool = True

    def to_dict(self) -> dict:
        return {
            "height": self.representation.height,
            "bitrate": self.representation.bitrate,
            "threads": self.pair.threads,
            "preset": self.pair.preset,
            "preset_name": preset_name(self.pair.preset),
            "predicted_speed": self.predicted_speed,
            "predicted_vmaf": self.predicted_vmaf,
            "feasible": self.feasible,
            "retained": self.retained,
        }


@dataclass(frozen=True)
class LadderPlan:
    entries: tuple[PlanEntry, ...]
    total_threads_budget: int
    segment_id: str = ""
    features: SegmentFeatures | None = None

    @property
    def retained(self) -> tuple[PlanEntry, ...]:
        return tuple(e for e in self.entries if e.retained)

    @property
    def total_threads_used(self) -> int:
        return sum(e.pair.threads for e in self.entries if e.retained)

    @property
    def budget_exceeded(self) -> bool:
        return self.total_threads_used > self.total_threads_budget

    @property
    def all_feasible(self) -> bool:
        return all(e.feasible for e in self.retained)

    def to_dict(self) -> dict:
        return {
            "segment": self.segment_id,
            "features": self.features.to_dict() if self.features else None,
            "total_threads_budget": self.total_threads_budget,
            "total_threads_used": self.total_threads_used,
            "budget_exceeded": self.budget_exceeded,
            "all_feasible": self.all_feasible,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LadderPlan":
        entries = []
        for k, e in enumerate(d["entries"]):
            entries.append(
                PlanEntry(
                    Representation(int(e["height"]), float(e["bitrate"]), k + 1),
                    ThreadPresetPair(int(e["threads"]), int(e["preset"])),
                    float(e["predicted_speed"]),
                    float(e["predicted_vmaf"]),
                    bool(e["retained"]),
                    bool(e["feasible"]),
                )
            )
        feats = d.get("features")
        return cls(
            tuple(entries),
            int(d["total_threads_budget"]),
            str(d.get("segment", "")),
            SegmentFeatures.from_dict(feats) if feats else None,
        )


@dataclass(frozen=True)
class EncodeRecord:
    segment_id: str
    representation: Representation
    pair: ThreadPresetPair
    achieved_bitrate: float
    achieved_speed: float
    psnr: float | None
    vmaf: float | None
    wall_time: float
    energy_joules: float | None = None

    def __post_init__(self):
        if not self.achieved_speed > 0:
            raise ValueError(f"achieved_speed must be positive, got {self.achieved_speed}")
        if self.vmaf is not None and not 0 <= self.vmaf <= 100:
            raise ValueError(f"vmaf outside [0, 100]: {self.vmaf}")

    def to_dict(self) -> dict:
        return {
            "segment": self.segment_id,
            "height": self.representation.height,
            "bitrate": self.representation.bitrate,
            "index": self.representation.index,
            "threads": self.pair.threads,
            "preset": self.pair.preset,
            "achieved_bitrate": self.achieved_bitrate,
            "speed": self.achieved_speed,
            "psnr": self.psnr,
            "vmaf": self.vmaf,
            "wall_time": self.wall_time,
            "energy_joules": self.energy_joules,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncodeRecord":
        opt = lambda k: None if d.get(k) is None else float(d[k])  # noqa: E731
        return cls(
            str(d["segment"]),
            Representation(int(d["height"]), float(d["bitrate"]), int(d["index"])),
            ThreadPresetPair(int(d["threads"]), int(d["preset"])),
            float(d["achieved_bitrate"]),
            float(d["speed"]),
            opt("psnr"),
            opt("vmaf"),
            float(d["wall_time"]),
            opt("energy_joules"),
        )
