"""Bjontegaard deltas and relative resource deltas between encoding schemes.

Interpolation is monotone piecewise-cubic Hermite (PCHIP), integrated exactly
over the overlap of the two curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .core import JaleError


class MetricError(JaleError):
    pass


@dataclass(frozen=True)
class RdCurve:
    bitrates: tuple[float, ...]  # Mbps
    qualities: tuple[float, ...]  # dB or VMAF points

    def __post_init__(self):
        b, q = self.bitrates, self.qualities
        if len(b) != len(q):
            raise MetricError("bitrate and quality lists differ in length")
        if len(b) < 4:
            raise MetricError(f"need at least 4 points, got {len(b)}")
        if not all(math.isfinite(v) for v in (*b, *q)):
            raise MetricError("non-finite point")
        if any(v <= 0 for v in b):
            raise MetricError("bitrates must be positive")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise MetricError("bitrates must strictly increase")
        if any(q1 <= q0 for q0, q1 in zip(q, q[1:])):
            raise MetricError("quality must strictly increase with bitrate")

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]]) -> "RdCurve":
        pts = list(points)
        return cls(tuple(float(p[0]) for p in pts), tuple(float(p[1]) for p in pts))

    @property
    def log_rates(self) -> np.ndarray:
        return np.log10(np.asarray(self.bitrates))


def _mean_gap(x_ref, y_ref, x_test, y_test) -> float:
    lo = max(x_ref[0], x_test[0])
    hi = min(x_ref[-1], x_test[-1])
    if not hi > lo:
        raise MetricError("curves do not overlap")
    f_ref = PchipInterpolator(x_ref, y_ref)
    f_test = PchipInterpolator(x_test, y_test)
    return (f_test.integrate(lo, hi) - f_ref.integrate(lo, hi)) / (hi - lo)


def bd_rate(reference: RdCurve, test: RdCurve) -> float:
    """Average bitrate change (percent) of ``test`` at equal quality."""
    gap = _mean_gap(
        np.asarray(reference.qualities), reference.log_rates, np.asarray(test.qualities), test.log_rates
    )
    return (10.0**gap - 1.0) * 100.0


def bd_quality(reference: RdCurve, test: RdCurve) -> float:
    """Average quality change of ``test`` at equal bitrate."""
    return float(
        _mean_gap(reference.log_rates, np.asarray(reference.qualities), test.log_rates, np.asarray(test.qualities))
    )


def _ratio_minus_one(opt: Sequence[float], ref: Sequence[float], what: str) -> float:
    if not ref:
        raise MetricError(f"empty reference {what}")
    total = math.fsum(ref)
    if not total > 0:
        raise MetricError(f"reference {what} sum must be positive")
    return math.fsum(opt) / total - 1.0


def delta_storage(opt_bitrates: Sequence[float], ref_bitrates: Sequence[float]) -> float:
    return _ratio_minus_one(opt_bitrates, ref_bitrates, "bitrates")


def delta_threads(opt_threads: Sequence[int], ref_threads: Sequence[int]) -> float:
    return _ratio_minus_one(opt_threads, ref_threads, "threads")


def delta_energy(opt_joules: Sequence[float], ref_joules: Sequence[float]) -> float:
    return _ratio_minus_one(opt_joules, ref_joules, "energy")


@dataclass(frozen=True)
class BdReport:
    bdr_psnr: float | None
    bdr_vmaf: float | None
    bd_psnr: float | None
    bd_vmaf: float | None
    delta_storage: float | None = None
    delta_threads: float | None = None
    delta_energy: float | None = None
    delta_time: float | None = None

    COLUMNS = (
        ("BDR_P [%]", "bdr_psnr", 100.0),
        ("BDR_V [%]", "bdr_vmaf", 100.0),
        ("BD-PSNR [dB]", "bd_psnr", 1.0),
        ("BD-VMAF", "bd_vmaf", 1.0),
        ("dS [%]", "delta_storage", 100.0),
        ("dN [%]", "delta_threads", 100.0),
        ("dE [%]", "delta_energy", 100.0),
    )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for _, k, _ in self.COLUMNS} | {"delta_time": self.delta_time}

    def table(self) -> str:
        heads = [h for h, _, _ in self.COLUMNS]
        cells = []
        for _, key, _ in self.COLUMNS:
            v = getattr(self, key)
            if v is None:
                cells.append("n/a")
            elif key.startswith("delta"):
                cells.append(f"{100.0 * v:.2f}")
            else:
                cells.append(f"{v:.2f}")
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        row = lambda xs: " | ".join(x.rjust(w) for x, w in zip(xs, widths))  # noqa: E731
        return "\n".join([row(heads), "-+-".join("-" * w for w in widths), row(cells)])


def mean_report(reports: Sequence[BdReport]) -> BdReport:
    """Field-wise mean, skipping missing values."""

    def avg(key):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    return BdReport(*(avg(k) for k in BdReport.__dataclass_fields__))
