"""Quality and time-control metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError, ValidationError

PSNR_CAP = 100.0


@dataclass(frozen=True)
class RdPoint:
    bitrate: float  # kbps
    psnr: float  # dB

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValidationError(f"bitrate must be positive, got {self.bitrate}")
        if not np.isfinite(self.psnr):
            raise ValidationError("psnr must be finite")


def mse(reference, test) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValidationError(f"dimension mismatch: {ref.shape} vs {tst.shape}")
    return float(np.mean((ref - tst) ** 2))


def psnr_from_mse(value: float, max_value: float = 255.0) -> float:
    if value <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_value ** 2 / value)))


def psnr(reference, test, max_value: float = 255.0) -> float:
    """Y-PSNR in dB; identical inputs give the 100 dB cap."""
    return psnr_from_mse(mse(reference, test), max_value)


def delta_psnr(reference, before, after, max_value: float = 255.0) -> float:
    return psnr(reference, after, max_value) - psnr(reference, before, max_value)


def sequence_psnr(reference: Iterable, test: Iterable, max_value: float = 255.0) -> float:
    """Mean of per-frame PSNR values."""
    values = [psnr(r, t, max_value) for r, t in zip(reference, test)]
    if not values:
        raise ValidationError("empty sequence")
    return float(np.mean(values))


# --------------------------------------------------------------------------
# Bjontegaard delta rate


def _rd_arrays(points) -> tuple[np.ndarray, np.ndarray]:
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
    if len(pts) < 4:
        raise ValidationError(f"BD-rate needs at least 4 rate/PSNR points, got {len(pts)}")
    pts.sort(key=lambda p: p.bitrate)
    rate = np.array([p.bitrate for p in pts])
    qual = np.array([p.psnr for p in pts])
    if np.any(np.diff(qual) <= 0):
        raise ValidationError("PSNR must increase strictly with bitrate")
    return np.log10(rate), qual


def bd_rate(anchor: Sequence, test: Sequence) -> float:
    """Average bitrate difference (percent) of ``test`` vs ``anchor`` at equal PSNR.

    Each curve is fitted by a cubic log10(rate)(PSNR); the difference of the
    integrals over the shared PSNR range gives the mean log-rate offset.
    """
    log_a, q_a = _rd_arrays(anchor)
    log_t, q_t = _rd_arrays(test)
    lo = max(q_a.min(), q_t.min())
    hi = min(q_a.max(), q_t.max())
    if hi <= lo:
        raise ValidationError("rate-distortion curves do not overlap in PSNR")
    p_a = np.polyint(np.polyfit(q_a, log_a, 3))
    p_t = np.polyint(np.polyfit(q_t, log_t, 3))
    int_a = np.polyval(p_a, hi) - np.polyval(p_a, lo)
    int_t = np.polyval(p_t, hi) - np.polyval(p_t, lo)
    avg = (int_t - int_a) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


# --------------------------------------------------------------------------
# spread and control accuracy


def rsd(values) -> float:
    """Relative standard deviation in percent (population std / mean)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise UndefinedMetricError("RSD of an empty set")
    mean = v.mean()
    if mean == 0:
        raise UndefinedMetricError("RSD is undefined for zero mean")
    return float(100.0 * v.std() / mean)


def sequence_rsd(frames: Iterable[Sequence[float]]) -> float:
    """Average of per-frame RSDs."""
    vals = [rsd(f) for f in frames]
    if not vals:
        raise UndefinedMetricError("no frames")
    return float(np.mean(vals))


def time_control_mae(actual, target, t_max) -> float:
    """100 * |actual - target| / t_max, averaged if given arrays."""
    actual = np.asarray(actual, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    t_max = np.asarray(t_max, dtype=np.float64)
    if np.any(t_max <= 0):
        raise ValidationError("t_max must be positive")
    return float(np.mean(100.0 * np.abs(actual - target) / t_max))


# --------------------------------------------------------------------------
# report rows

REPORT_FIELDS = ("sequence", "qp", "frame_type", "psnr_before", "psnr_after", "delta_psnr",
                 "bd_rate", "mae_percent")


@dataclass
class ReportRow:
    sequence: str
    qp: int
    frame_type: str
    psnr_before: Optional[float] = None
    psnr_after: Optional[float] = None
    delta_psnr: Optional[float] = None
    bd_rate: Optional[float] = None
    mae_percent: Optional[float] = None


def rows_to_csv(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in asdict(row).items()})
    return buf.getvalue()


def rows_to_json(rows: Iterable[ReportRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)
