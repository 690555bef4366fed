"""DCT-energy complexity features of a video segment.

Three luma-only features are produced per segment:

* texture energy ``E_Y``: exponentially weighted sum of AC coefficient
  magnitudes per block, divided by ``w**2`` and averaged over blocks and frames;
* temporal gradient ``h``: mean absolute difference of co-located block
  energies between consecutive frames;
* luminescence ``L_Y``: mean of ``sqrt(|DC|) / w`` over blocks and frames.
"""

from __future__ import annotations

import math
import re
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np
from scipy import fft

from .core import JaleError, SegmentFeatures

SUPPORTED_BLOCK_SIZES = (8, 16, 32)
DEFAULT_BLOCK_SIZE = 32


class AnalysisError(JaleError):
    pass


def _check_block_size(w: int) -> None:
    if w not in SUPPORTED_BLOCK_SIZES:
        raise AnalysisError(f"unsupported block size {w}; expected one of {SUPPORTED_BLOCK_SIZES}")


def dct2d(block: np.ndarray) -> np.ndarray:
    """Orthonormal type-II 2D DCT of a square block; ``[0, 0]`` is DC."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise AnalysisError(f"expected a square block, got shape {block.shape}")
    _check_block_size(block.shape[0])
    if not np.all(np.isfinite(block)):
        raise AnalysisError("block contains non-finite samples")
    return fft.dctn(block, type=2, norm="ortho")


_WEIGHTS: dict[int, np.ndarray] = {}


def texture_weights(w: int) -> np.ndarray:
    """``exp(|((i*j)/w^2)^2 - 1|)`` with the DC weight zeroed."""
    if w not in _WEIGHTS:
        i = np.arange(w, dtype=np.float64)
        ij = np.outer(i, i) / float(w * w)
        wt = np.exp(np.abs(ij * ij - 1.0))
        wt[0, 0] = 0.0
        wt.setflags(write=False)
        _WEIGHTS[w] = wt
    return _WEIGHTS[w]


def block_texture_energy(coefficients: np.ndarray) -> float:
    c = np.asarray(coefficients, dtype=np.float64)
    w = c.shape[0]
    return float(np.sum(texture_weights(w) * np.abs(c)))


def _blocks(frame: np.ndarray, w: int) -> np.ndarray:
    """Split a plane into (K, w, w) blocks, edge-replicating ragged borders."""
    hgt, wid = frame.shape
    pad_y, pad_x = (-hgt) % w, (-wid) % w
    if pad_y or pad_x:
        frame = np.pad(frame, ((0, pad_y), (0, pad_x)), mode="edge")
    ny, nx = frame.shape[0] // w, frame.shape[1] // w
    return frame.reshape(ny, w, nx, w).swapaxes(1, 2).reshape(ny * nx, w, w)


def frame_block_stats(frame: np.ndarray, w: int = DEFAULT_BLOCK_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Per-block texture energy ``H/w^2`` and DC coefficient of one luma plane."""
    _check_block_size(w)
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.size == 0:
        raise AnalysisError(f"expected a non-empty 2D luma plane, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise AnalysisError("frame contains non-finite samples")
    coefs = fft.dctn(_blocks(frame, w), type=2, norm="ortho", axes=(1, 2))
    energy = np.einsum("kij,ij->k", np.abs(coefs), texture_weights(w)) / float(w * w)
    return energy, coefs[:, 0, 0].copy()


def analyze_segment(frames: Iterable[np.ndarray], block_size: int = DEFAULT_BLOCK_SIZE) -> SegmentFeatures:
    _check_block_size(block_size)
    w = block_size
    energy_means: list[float] = []
    grad_means: list[float] = []
    lum_means: list[float] = []
    prev = None
    shape = None
    for frame in frames:
        frame = np.asarray(frame)
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise AnalysisError(f"frame shape {frame.shape} differs from first frame {shape}")
        energy, dc = frame_block_stats(frame, w)
        energy_means.append(float(np.mean(energy)))
        lum_means.append(float(np.mean(np.sqrt(np.abs(dc)))) / w)
        if prev is not None:
            grad_means.append(float(np.mean(np.abs(energy - prev))))
        prev = energy
    if shape is None:
        raise AnalysisError("segment has no frames")
    n = len(energy_means)
    # fsum makes the cross-frame reduction independent of frame order
    return SegmentFeatures(
        texture_energy=math.fsum(energy_means) / n,
        temporal_gradient=math.fsum(grad_means) / len(grad_means) if grad_means else 0.0,
        luminescence=math.fsum(lum_means) / n,
        frame_count=n,
        block_size=w,
    )


# -- readers ---------------------------------------------------------------

_CHROMA_DIV = {"420": (2, 2), "422": (1, 2), "444": (1, 1), "400": None, "mono": None}


def _plane_sizes(width: int, height: int, chroma: str) -> tuple[int, int]:
    if chroma not in _CHROMA_DIV:
        raise AnalysisError(f"unsupported chroma format {chroma!r}")
    div = _CHROMA_DIV[chroma]
    if div is None:
        return width * height, 0
    cw = -(-width // div[1])
    ch = -(-height // div[0])
    return width * height, 2 * cw * ch


def _to_luma(buf: bytes, width: int, height: int, bit_depth: int) -> np.ndarray:
    if bit_depth == 8:
        y = np.frombuffer(buf, dtype=np.uint8).astype(np.float64)
    elif bit_depth == 10:
        y = np.frombuffer(buf, dtype="<u2").astype(np.float64) / 4.0
    else:
        raise AnalysisError(f"unsupported bit depth {bit_depth}")
    return y.reshape(height, width)


def read_raw_yuv(
    path: str | Path, width: int, height: int, bit_depth: int = 8, chroma: str = "420"
) -> Iterator[np.ndarray]:
    """Yield luma planes from planar raw YUV; 10-bit is rescaled to 8-bit range."""
    if width <= 0 or height <= 0:
        raise AnalysisError("width and height must be positive")
    bps = 1 if bit_depth == 8 else 2
    luma, chroma_n = _plane_sizes(width, height, chroma)
    frame_bytes = (luma + chroma_n) * bps
    with open(path, "rb") as fh:
        while True:
            buf = fh.read(frame_bytes)
            if not buf:
                return
            if len(buf) != frame_bytes:
                raise AnalysisError(f"truncated frame in {path}")
            yield _to_luma(buf[: luma * bps], width, height, bit_depth)


_Y4M_CHROMA = {
    "420jpeg": ("420", 8),
    "420paldv": ("420", 8),
    "420mpeg2": ("420", 8),
    "420": ("420", 8),
    "422": ("422", 8),
    "444": ("444", 8),
    "mono": ("400", 8),
    "420p10": ("420", 10),
    "422p10": ("422", 10),
    "444p10": ("444", 10),
    "mono10": ("400", 10),
}


def parse_y4m_header(line: bytes) -> dict:
    parts = line.decode("ascii").split()
    if not parts or parts[0] != "YUV4MPEG2":
        raise AnalysisError("not a YUV4MPEG2 stream")
    hdr = {"chroma": "420", "bit_depth": 8, "fps": None}
    for tok in parts[1:]:
        tag, val = tok[0], tok[1:]
        if tag == "W":
            hdr["width"] = int(val)
        elif tag == "H":
            hdr["height"] = int(val)
        elif tag == "F":
            num, den = val.split(":")
            hdr["fps"] = int(num) / int(den)
        elif tag == "C":
            if val not in _Y4M_CHROMA:
                raise AnalysisError(f"unsupported Y4M colorspace C{val}")
            hdr["chroma"], hdr["bit_depth"] = _Y4M_CHROMA[val]
    if "width" not in hdr or "height" not in hdr:
        raise AnalysisError("Y4M header lacks W/H")
    return hdr


def _iter_y4m(fh: BinaryIO, hdr: dict) -> Iterator[np.ndarray]:
    w, h, depth = hdr["width"], hdr["height"], hdr["bit_depth"]
    bps = 1 if depth == 8 else 2
    luma, chroma_n = _plane_sizes(w, h, hdr["chroma"])
    while True:
        marker = fh.readline()
        if not marker:
            return
        if not marker.startswith(b"FRAME"):
            raise AnalysisError("corrupt Y4M stream: missing FRAME marker")
        buf = fh.read((luma + chroma_n) * bps)
        if len(buf) != (luma + chroma_n) * bps:
            raise AnalysisError("truncated Y4M frame")
        yield _to_luma(buf[: luma * bps], w, h, depth)


def read_y4m(path: str | Path) -> Iterator[np.ndarray]:
    with open(path, "rb") as fh:
        hdr = parse_y4m_header(fh.readline())
        yield from _iter_y4m(fh, hdr)


def write_y4m(path: str | Path, frames: Iterable[np.ndarray], fps: int = 30) -> None:
    """Write 8-bit luma planes as 4:2:0 Y4M with neutral chroma."""
    frames = [np.clip(np.rint(f), 0, 255).astype(np.uint8) for f in frames]
    if not frames:
        raise AnalysisError("no frames to write")
    h, w = frames[0].shape
    _, chroma_n = _plane_sizes(w, h, "420")
    grey = bytes([128]) * chroma_n
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 C420jpeg\n".encode())
        for f in frames:
            fh.write(b"FRAME\n")
            fh.write(f.tobytes())
            fh.write(grey)


_RAW_NAME = re.compile(r"(\d+)x(\d+)")


def analyze_file(
    path: str | Path,
    block_size: int = DEFAULT_BLOCK_SIZE,
    width: int | None = None,
    height: int | None = None,
    bit_depth: int = 8,
    chroma: str = "420",
) -> SegmentFeatures:
    """Analyze a ``.y4m`` file, or raw planar YUV given explicit geometry."""
    path = Path(path)
    if path.suffix.lower() == ".y4m":
        return analyze_segment(read_y4m(path), block_size)
    if width is None or height is None:
        m = _RAW_NAME.search(path.name)
        if not m:
            raise AnalysisError("raw YUV input needs --width/--height")
        width, height = int(m.group(1)), int(m.group(2))
    return analyze_segment(read_raw_yuv(path, width, height, bit_depth, chroma), block_size)
