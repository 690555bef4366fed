"""Encoder backends, dataset generation and budget-aware plan execution."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import shutil
import subprocess
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from scipy import ndimage

from .complexity import analyze_file, analyze_segment
from .core import (
    EncodeRecord,
    JaleError,
    LadderPlan,
    Representation,
    SegmentFeatures,
    ThreadPresetPair,
    preset_name,
)

log = logging.getLogger(__name__)

DATASET_HEADER = ("E_Y", "h", "L_Y", "r", "b", "n", "p", "achieved_bitrate", "speed", "psnr", "vmaf")


class EncodeError(JaleError):
    pass


class CapabilityError(EncodeError):
    pass


@dataclass(frozen=True)
class Segment:
    id: str
    features: SegmentFeatures
    path: Path | None = None
    frame_count: int = 120
    fps: float = 30.0


@dataclass(frozen=True)
class Capabilities:
    presets: tuple[int, ...]
    max_threads: int
    rate_control: tuple[str, ...] = ("cbr",)

    def check(self, pair: ThreadPresetPair) -> None:
        if pair.preset not in self.presets:
            raise CapabilityError(f"preset {pair.preset} not supported")
        if not 1 <= pair.threads <= self.max_threads:
            raise CapabilityError(f"{pair.threads} threads outside 1..{self.max_threads}")


class EncoderBackend:
    """Encodes one segment at one rung with one (threads, preset) pair."""

    capabilities: Capabilities

    def encode(self, segment: Segment, rep: Representation, pair: ThreadPresetPair) -> EncodeRecord:
        raise NotImplementedError


# -- simulator ---------------------------------------------------------------


@dataclass(frozen=True)
class SimulatorParams:
    """Closed-form ground truth the simulator samples from.

    speed = T(p) * (n/4)**alpha / ((r/1080)**2 * (1 + delta*b) * (1 + beta*E/E_ref) * (1 + gamma*h/h_ref))
    vmaf  = 100 / (1 + exp(-k(p) * (ln b - m))),  m = m0 + cE*E/E_ref + ch*h/h_ref - cp*p + cr*ln(1080/r)
    """

    base_throughput: Mapping[int, float] = field(
        default_factory=lambda: {0: 90.0, 1: 66.0, 2: 48.0, 3: 34.0, 4: 24.0, 5: 15.0}
    )
    thread_exponent: float = 0.8
    bitrate_penalty: float = 0.015
    texture_penalty: float = 0.35
    motion_penalty: float = 0.25
    texture_ref: float = 20.0
    motion_ref: float = 1.0
    vmaf_slope: float = 1.3
    vmaf_slope_per_preset: float = 0.02
    vmaf_midpoint: float = -1.5
    vmaf_texture_shift: float = 0.6
    vmaf_motion_shift: float = 0.3
    vmaf_preset_shift: float = 0.035
    vmaf_resolution_shift: float = 0.05
    psnr_base: float = 36.0
    psnr_slope: float = 4.5
    speed_noise: float = 0.03
    bitrate_noise: float = 0.01
    vmaf_noise: float = 0.5
    psnr_noise: float = 0.1
    watts_per_thread: float = 3.0

    def __post_init__(self):
        if not 0 < self.thread_exponent <= 1:
            raise ValueError("thread_exponent must lie in (0, 1]")
        tp = sorted(self.base_throughput.items())
        if any(v1 >= v0 for (_, v0), (_, v1) in zip(tp, tp[1:])):
            raise ValueError("base_throughput must strictly decrease as presets get slower")

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "SimulatorParams":
        m = dict(m or {})
        if "base_throughput" in m:
            m["base_throughput"] = {int(k): float(v) for k, v in m["base_throughput"].items()}
        names = {f.name for f in fields(cls)}
        unknown = set(m) - names
        if unknown:
            raise ValueError(f"unknown simulator parameters: {sorted(unknown)}")
        return cls(**m)


class SimulatorBackend(EncoderBackend):
    """Deterministic stand-in for a real encoder: closed-form laws plus seeded noise."""

    def __init__(self, params: SimulatorParams | None = None, seed: int = 0, max_threads: int = 256):
        self.params = params or SimulatorParams()
        self.seed = seed
        self.capabilities = Capabilities(tuple(sorted(self.params.base_throughput)), max_threads)

    def true_speed(self, f: SegmentFeatures, height: int, bitrate: float, threads: int, preset: int) -> float:
        sp = self.params
        pixel = (height / 1080.0) ** 2
        load = (
            pixel
            * (1.0 + sp.bitrate_penalty * bitrate)
            * (1.0 + sp.texture_penalty * f.texture_energy / sp.texture_ref)
            * (1.0 + sp.motion_penalty * f.temporal_gradient / sp.motion_ref)
        )
        return sp.base_throughput[preset] * (threads / 4.0) ** sp.thread_exponent / load

    def _midpoint(self, f: SegmentFeatures, height: int, preset: int) -> float:
        sp = self.params
        return (
            sp.vmaf_midpoint
            + sp.vmaf_texture_shift * f.texture_energy / sp.texture_ref
            + sp.vmaf_motion_shift * f.temporal_gradient / sp.motion_ref
            - sp.vmaf_preset_shift * preset
            + sp.vmaf_resolution_shift * math.log(1080.0 / height)
        )

    def true_vmaf(self, f: SegmentFeatures, height: int, bitrate: float, preset: int) -> float:
        sp = self.params
        k = sp.vmaf_slope + sp.vmaf_slope_per_preset * preset
        return 100.0 / (1.0 + math.exp(-k * (math.log(bitrate) - self._midpoint(f, height, preset))))

    def true_psnr(self, f: SegmentFeatures, height: int, bitrate: float, preset: int) -> float:
        sp = self.params
        return sp.psnr_base + sp.psnr_slope * (math.log(bitrate) - self._midpoint(f, height, preset))

    def _rng(self, segment: Segment, rep: Representation, pair: ThreadPresetPair) -> np.random.Generator:
        key = f"{self.seed}|{segment.id}|{rep.height}|{rep.bitrate!r}|{pair.threads}|{pair.preset}"
        digest = hashlib.blake2b(key.encode(), digest_size=16).digest()
        return np.random.default_rng(int.from_bytes(digest, "little"))

    def encode(self, segment: Segment, rep: Representation, pair: ThreadPresetPair) -> EncodeRecord:
        self.capabilities.check(pair)
        sp = self.params
        f = segment.features
        rng = self._rng(segment, rep, pair)
        z = [float(v) for v in rng.standard_normal(4)]
        speed = self.true_speed(f, rep.height, rep.bitrate, pair.threads, pair.preset) * math.exp(sp.speed_noise * z[0])
        vmaf = self.true_vmaf(f, rep.height, rep.bitrate, pair.preset) + sp.vmaf_noise * z[2]
        wall = segment.frame_count / speed
        return EncodeRecord(
            segment_id=segment.id,
            representation=rep,
            pair=pair,
            achieved_bitrate=rep.bitrate * math.exp(sp.bitrate_noise * z[1]),
            achieved_speed=speed,
            psnr=self.true_psnr(f, rep.height, rep.bitrate, pair.preset) + sp.psnr_noise * z[3],
            vmaf=min(100.0, max(0.0, vmaf)),
            wall_time=wall,
            energy_joules=wall * pair.threads * sp.watts_per_thread,
        )


# -- external encoder ----------------------------------------------------------

# Placeholders are filled per encode; kbps values are integers.
X265_TEMPLATE = (
    "{x265}",
    "--input", "{input}",
    "--output", "{output}",
    "--preset", "{preset}",
    "--bitrate", "{kbps}",
    "--vbv-maxrate", "{kbps}",
    "--vbv-bufsize", "{kbps}",
    "--strict-cbr",
    "--pools", "{threads}",
    "--fps", "{fps}",
    "--no-progress",
)

_X265_SUMMARY = re.compile(
    r"encoded\s+(?P<frames>\d+)\s+frames\s+in\s+(?P<secs>[\d.]+)s\s+\((?P<fps>[\d.]+)\s+fps\),\s+(?P<kbps>[\d.]+)\s+kb/s"
)


def build_x265_command(
    x265: str, input_path: str, output_path: str, bitrate_mbps: float, threads: int, preset: int, fps: int = 30
) -> list[str]:
    values = {
        "x265": x265,
        "input": input_path,
        "output": output_path,
        "preset": preset_name(preset),
        "kbps": str(int(round(bitrate_mbps * 1000))),
        "threads": str(threads),
        "fps": str(fps),
    }
    return [tok.format(**values) for tok in X265_TEMPLATE]


def parse_x265_output(text: str) -> dict:
    """Frame count, seconds, fps and kb/s from x265's closing summary line."""
    m = None
    for m in _X265_SUMMARY.finditer(text):
        pass
    if m is None:
        raise EncodeError("x265 output lacks an 'encoded N frames' summary")
    return {
        "frames": int(m["frames"]),
        "seconds": float(m["secs"]),
        "fps": float(m["fps"]),
        "kbps": float(m["kbps"]),
    }


def parse_vmaf_log(doc: str | Mapping) -> tuple[float | None, float | None]:
    """Pooled (vmaf, psnr_y) means from a libvmaf JSON log."""
    d = json.loads(doc) if isinstance(doc, str) else doc
    pooled = d.get("pooled_metrics", {})
    vmaf = pooled.get("vmaf", {}).get("mean")
    psnr = pooled.get("psnr_y", pooled.get("psnr", {})).get("mean")
    return (None if vmaf is None else float(vmaf), None if psnr is None else float(psnr))


class ExternalBackend(EncoderBackend):
    """Runs x265 as a subprocess and scores the result with ffmpeg/libvmaf.

    Binary paths come from ``JALE_X265`` and ``JALE_FFMPEG``. Without ffmpeg the
    records carry speed and bitrate only.
    """

    def __init__(self, x265: str | None = None, ffmpeg: str | None = None, workdir: str | Path | None = None,
                 presets: Sequence[int] = tuple(range(10)), max_threads: int = 256, runner=subprocess.run):
        self.x265 = x265 or os.environ.get("JALE_X265", "x265")
        self.ffmpeg = ffmpeg or os.environ.get("JALE_FFMPEG", "ffmpeg")
        self.workdir = Path(workdir) if workdir else Path(tempfile.gettempdir())
        self.capabilities = Capabilities(tuple(presets), max_threads)
        self._run = runner

    def _have_ffmpeg(self) -> bool:
        return shutil.which(self.ffmpeg) is not None or Path(self.ffmpeg).exists()

    def _scaled_input(self, segment: Segment, height: int, tag: str) -> Path:
        out = self.workdir / f"{tag}_src.y4m"
        cmd = [self.ffmpeg, "-y", "-loglevel", "error", "-i", str(segment.path), "-vf", f"scale=-2:{height}",
               "-pix_fmt", "yuv420p", str(out)]
        self._call(cmd)
        return out

    def _call(self, cmd: list[str]) -> subprocess.CompletedProcess:
        try:
            proc = self._run(cmd, capture_output=True, text=True, check=False)
        except OSError as exc:
            raise EncodeError(f"cannot launch {cmd[0]}: {exc}") from None
        if proc.returncode != 0:
            raise EncodeError(f"{Path(cmd[0]).name} exited with {proc.returncode}: {proc.stderr[-500:]}")
        return proc

    def _measure(self, segment: Segment, bitstream: Path, tag: str) -> tuple[float | None, float | None]:
        log_path = self.workdir / f"{tag}_vmaf.json"
        # scale2ref upsamples the decoded rung to the source geometry
        graph = f"[0:v][1:v]scale2ref=flags=bicubic[d][r];[d][r]libvmaf=log_fmt=json:log_path={log_path}:feature=name=psnr"
        cmd = [self.ffmpeg, "-loglevel", "error", "-i", str(bitstream), "-i", str(segment.path),
               "-lavfi", graph, "-f", "null", "-"]
        try:
            self._call(cmd)
            return parse_vmaf_log(log_path.read_text())
        except (EncodeError, OSError, ValueError) as exc:
            log.warning("quality measurement failed, keeping speed-only record: %s", exc)
            return None, None

    def encode(self, segment: Segment, rep: Representation, pair: ThreadPresetPair) -> EncodeRecord:
        self.capabilities.check(pair)
        if segment.path is None:
            raise EncodeError(f"segment {segment.id} has no source file")
        tag = f"{segment.id}_{rep.index}_{pair.threads}_{pair.preset}"
        source = self._scaled_input(segment, rep.height, tag) if self._have_ffmpeg() else segment.path
        out = self.workdir / f"{tag}.hevc"
        cmd = build_x265_command(self.x265, str(source), str(out), rep.bitrate, pair.threads, pair.preset,
                                 int(round(segment.fps)))
        t0 = time.perf_counter()
        proc = self._call(cmd)
        wall = time.perf_counter() - t0
        stats = parse_x265_output(proc.stderr + proc.stdout)
        vmaf = psnr = None
        if self._have_ffmpeg():
            vmaf, psnr = self._measure(segment, out, tag)
        return EncodeRecord(
            segment_id=segment.id,
            representation=rep,
            pair=pair,
            achieved_bitrate=stats["kbps"] / 1000.0,
            achieved_speed=stats["fps"],
            psnr=psnr,
            vmaf=vmaf,
            wall_time=wall,
        )


# -- dataset generation ----------------------------------------------------------


def cross_product_ladder(heights: Sequence[int], bitrates: Sequence[float]) -> list[Representation]:
    """Every (height, bitrate) combination, for grids that are not a paired ladder."""
    reps = [(h, b) for h in heights for b in bitrates]
    return [Representation(h, b, k + 1) for k, (h, b) in enumerate(reps)]


def _cell(v) -> str:
    if v is None:
        return ""
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


@dataclass
class DatasetResult:
    rows: list[dict]
    errors: list[dict]

    def to_csv(self, out: TextIO | None = None) -> str:
        buf = out or io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(DATASET_HEADER)
        for row in self.rows:
            writer.writerow([_cell(row[k]) for k in DATASET_HEADER])
        return buf.getvalue() if out is None else ""


def record_row(features: SegmentFeatures, rec: EncodeRecord) -> dict:
    return {
        "E_Y": features.texture_energy,
        "h": features.temporal_gradient,
        "L_Y": features.luminescence,
        "r": rec.representation.height,
        "b": rec.representation.bitrate,
        "n": rec.pair.threads,
        "p": rec.pair.preset,
        "achieved_bitrate": rec.achieved_bitrate,
        "speed": rec.achieved_speed,
        "psnr": rec.psnr,
        "vmaf": rec.vmaf,
    }


def generate_dataset(
    backend: EncoderBackend,
    segments: Iterable[Segment],
    representations: Sequence[Representation],
    threads: Sequence[int],
    presets: Sequence[int],
) -> DatasetResult:
    """One row per (segment, rung, threads, preset). Failed encodes are logged, not fatal."""
    if not representations or not threads or not presets:
        raise ValueError("representation, thread and preset sets must be non-empty")
    rows, errors = [], []
    for seg in segments:
        f = seg.features
        for rep in representations:
            for n in threads:
                for p in presets:
                    pair = ThreadPresetPair(n, p)
                    try:
                        rec = backend.encode(seg, rep, pair)
                    except (EncodeError, ValueError) as exc:
                        errors.append({"segment": seg.id, "r": rep.height, "b": rep.bitrate, "n": n, "p": p,
                                       "error": str(exc)})
                        continue
                    rows.append(record_row(f, rec))
    return DatasetResult(rows, errors)


def read_dataset(source: str | Path | TextIO) -> list[dict]:
    """Parse a dataset CSV; empty metric cells become None."""
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DATASET_HEADER:
            raise ValueError(f"unexpected dataset header {reader.fieldnames}")
        out = []
        for line in reader:
            row = {}
            for k in DATASET_HEADER:
                v = line[k]
                row[k] = None if v == "" else (int(v) if k in ("r", "n", "p") else float(v))
            out.append(row)
        return out
    finally:
        if fh is not source:
            fh.close()


# -- synthetic content -------------------------------------------------------------


def synthetic_frames(
    rng: np.random.Generator,
    size: int = 128,
    n_frames: int = 4,
    texture: float = 20.0,
    motion: float = 2.0,
    brightness: float = 128.0,
) -> list[np.ndarray]:
    """Luma planes of smoothed noise texture drifting by ``motion`` px per frame."""
    pad = int(math.ceil(abs(motion) * n_frames)) + 2
    base = ndimage.gaussian_filter(rng.standard_normal((size + 2 * pad, size + 2 * pad)), 1.2)
    base *= texture / max(base.std(), 1e-12)
    y, x = np.mgrid[0:size, 0:size] / size
    ramp = 12.0 * (x - 0.5) + 6.0 * (y - 0.5)
    frames = []
    for t in range(n_frames):
        shift = ndimage.shift(base, (0.0, motion * t), order=1, mode="nearest")
        innov = rng.standard_normal((size, size)) * (0.6 * abs(motion))
        frame = brightness + ramp + shift[pad:pad + size, pad:pad + size] + innov
        frames.append(np.clip(frame, 0.0, 255.0))
    return frames


def synthetic_segment(seed: int, index: int, size: int = 128, n_frames: int = 4, block_size: int = 32) -> Segment:
    """Random content drawn from a fixed family; features come from the analyzer."""
    rng = np.random.default_rng([seed, index])
    texture = float(rng.uniform(4.0, 30.0))
    motion = float(rng.uniform(0.0, 4.0))
    brightness = float(rng.uniform(60.0, 190.0))
    frames = synthetic_frames(rng, size, n_frames, texture, motion, brightness)
    return Segment(f"syn{seed}_{index:04d}", analyze_segment(frames, block_size))


def segment_from_file(path: str | Path, block_size: int = 32, **raw) -> Segment:
    path = Path(path)
    return Segment(path.stem, analyze_file(path, block_size, **raw), path=path)


# -- plan execution ----------------------------------------------------------------


class BudgetTrace:
    """Records in-flight thread totals as encodes actually start and finish."""

    def __init__(self):
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.max_jobs = 0
        self._jobs = 0
        self.events: list[tuple[str, int, int]] = []  # (start|end, rung index, in-flight threads)

    def start(self, index: int, threads: int) -> None:
        with self._lock:
            self.in_flight += threads
            self._jobs += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.max_jobs = max(self.max_jobs, self._jobs)
            self.events.append(("start", index, self.in_flight))

    def end(self, index: int, threads: int) -> None:
        with self._lock:
            self.in_flight -= threads
            self._jobs -= 1
            self.events.append(("end", index, self.in_flight))


@dataclass(frozen=True)
class EncodeFailure:
    representation: Representation
    pair: ThreadPresetPair
    error: str


def run_plan(
    backend: EncoderBackend,
    plan: LadderPlan,
    segment: Segment,
    total_threads: int,
    trace: BudgetTrace | None = None,
    entries: Sequence | None = None,
) -> list[EncodeRecord | EncodeFailure]:
    """Encode retained rungs concurrently under a thread budget.

    Admission is greedy in ladder order: the next rung starts once its thread
    count fits in what is left of ``total_threads``. A rung larger than the
    whole budget runs alone. Results come back in ladder order.
    """
    todo = list(entries if entries is not None else plan.retained)
    if total_threads <= 0:
        raise ValueError("total_threads must be positive")
    results: list[EncodeRecord | EncodeFailure | None] = [None] * len(todo)
    cond = threading.Condition()
    admitted = 0

    def job(k, entry):
        nonlocal admitted
        w = entry.pair.threads
        if trace:
            trace.start(entry.representation.index, w)
        try:
            results[k] = backend.encode(segment, entry.representation, entry.pair)
        except Exception as exc:  # one failed rung must not stop the rest
            log.error("encode of rung %d failed: %s", entry.representation.index, exc)
            results[k] = EncodeFailure(entry.representation, entry.pair, str(exc))
        finally:
            if trace:
                trace.end(entry.representation.index, w)
            with cond:
                admitted -= w
                cond.notify_all()

    with ThreadPoolExecutor(max_workers=max(1, len(todo))) as pool:
        for k, entry in enumerate(todo):
            w = entry.pair.threads
            with cond:
                while admitted > 0 and admitted + w > total_threads:
                    cond.wait()
                admitted += w
            pool.submit(job, k, entry)
    return results  # type: ignore[return-value]
