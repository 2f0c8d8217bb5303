"""Reconstruction-error and spectral-similarity metrics for hyperspectral cubes.

All metrics are evaluated in float64 whatever the input precision.
``truth`` is the reference cube and ``est`` the reconstruction, both (C, H, W).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

METRIC_NAMES = ("rmse1", "rmse2", "rrmse1", "rrmse2", "sam")


def _pair(truth, est) -> tuple[np.ndarray, np.ndarray]:
    h = np.asarray(truth, dtype=np.float64)
    e = np.asarray(est, dtype=np.float64)
    if h.shape != e.shape:
        raise ShapeError(f"shape mismatch: {h.shape} vs {e.shape}")
    if h.size == 0:
        raise ShapeError("empty inputs")
    return h, e


def rmse1(truth, est) -> float:
    """Mean absolute error over all elements."""
    h, e = _pair(truth, est)
    return float(np.mean(np.abs(h - e)))


def rmse2(truth, est) -> float:
    """Root of the mean squared error."""
    h, e = _pair(truth, est)
    return float(np.sqrt(np.mean((h - e) ** 2)))


def rrmse1(truth, est) -> float:
    """Mean of per-element absolute error relative to the true value."""
    h, e = _pair(truth, est)
    if np.any(h <= 0):
        raise DomainError("rrmse1 requires every ground-truth element to be positive")
    return float(np.mean(np.abs(h - e) / h))


def rrmse2(truth, est) -> float:
    """RMSE normalized by the mean of the ground truth."""
    h, e = _pair(truth, est)
    mean = h.mean()
    if mean == 0:
        raise DomainError("rrmse2 requires a non-zero ground-truth mean")
    return float(np.sqrt(np.mean((h - e) ** 2)) / abs(mean))


def spectral_angles(truth, est) -> np.ndarray:
    """Per-pixel angle in degrees between spectra along axis 0; shape (H, W)."""
    h, e = _pair(truth, est)
    nh = np.linalg.norm(h, axis=0)
    ne = np.linalg.norm(e, axis=0)
    if np.any(nh == 0) or np.any(ne == 0):
        raise DomainError("spectral angle undefined for a zero-norm spectrum")
    # half-angle form of arccos(<h,e>/|h||e|): exact zero for parallel spectra,
    # no loss of precision near 0 or 180 degrees
    uh, ue = h / nh, e / ne
    diff = np.linalg.norm(uh - ue, axis=0)
    summ = np.linalg.norm(uh + ue, axis=0)
    return np.degrees(2.0 * np.arctan2(diff, summ))


def sam(truth, est) -> float:
    """Mean spectral angle in degrees.

    Averages the per-pixel angles; taking arccos of the summed cosines is not
    an average angle and is not what is computed here.
    """
    return float(np.mean(spectral_angles(truth, est)))


@dataclass
class MetricReport:
    image: str
    rmse1: float
    rmse2: float
    rrmse1: float
    rrmse2: float
    sam: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in METRIC_NAMES)


def evaluate_all(truth, est, image: str = "") -> MetricReport:
    return MetricReport(
        image=image,
        rmse1=rmse1(truth, est),
        rmse2=rmse2(truth, est),
        rrmse1=rrmse1(truth, est),
        rrmse2=rrmse2(truth, est),
        sam=sam(truth, est),
    )


def average_report(reports: Sequence[MetricReport], image: str = "Average") -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(image, *(float(np.mean([getattr(r, n) for r in reports])) for n in METRIC_NAMES))


def write_report_csv(path: str | Path, rows: Iterable[tuple[str, MetricReport]]) -> None:
    """One row per (method, report); columns ``method, image, rmse1, ..., sam``."""
    cols = [f.name for f in fields(MetricReport)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *cols])
        for method, rep in rows:
            d = asdict(rep)
            w.writerow([method, *(d[c] if c == "image" else repr(d[c]) for c in cols)])


def read_report_csv(path: str | Path) -> list[tuple[str, MetricReport]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        (r["method"], MetricReport(r["image"], *(float(r[n]) for n in METRIC_NAMES)))
        for r in rows
    ]
