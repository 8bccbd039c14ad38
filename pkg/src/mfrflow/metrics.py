"""End-point error and outlier metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .flowfield import FlowField


class EmptyMaskError(ValueError):
    pass


def _arr(flow) -> np.ndarray:
    if isinstance(flow, FlowField):
        return flow.numpy()
    if hasattr(flow, "data") and not isinstance(flow, np.ndarray):
        return np.asarray(flow.data)
    return np.asarray(flow)


def _error_and_mask(pred, gt, valid_mask):
    p, g = _arr(pred).astype(np.float64), _arr(gt).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    chan = p.ndim - 3
    err = np.sqrt(((p - g) ** 2).sum(axis=chan))
    mag = np.sqrt((g**2).sum(axis=chan))
    mask = np.ones(err.shape, dtype=bool) if valid_mask is None else np.broadcast_to(np.asarray(valid_mask, dtype=bool), err.shape)
    return err, mag, mask


def epe(pred, gt, valid_mask=None, strict: bool = False) -> float:
    """Mean Euclidean distance between flows over valid pixels.

    An empty mask returns NaN, or raises :class:`EmptyMaskError` when ``strict``.
    """
    err, _, mask = _error_and_mask(pred, gt, valid_mask)
    if not mask.any():
        if strict:
            raise EmptyMaskError("EPE over an empty valid mask")
        return float("nan")
    return float(err[mask].mean())


def fl_all(pred, gt, valid_mask=None, abs_thresh: float = 3.0, rel_thresh: float = 0.05, strict: bool = False) -> float:
    """Percentage of valid pixels whose error exceeds 3 px and 5% of the true magnitude."""
    err, mag, mask = _error_and_mask(pred, gt, valid_mask)
    if not mask.any():
        if strict:
            raise EmptyMaskError("Fl over an empty valid mask")
        return float("nan")
    outlier = (err > abs_thresh) & (err > rel_thresh * mag)
    return float(100.0 * outlier[mask].mean())


@dataclass
class EvalReport:
    mean_epe: float
    fl_all: float
    rows: list[dict] = field(default_factory=list)
    nzr_baseline: list[float] = field(default_factory=list)  # per level
    nzr_recovered: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not math.isnan(self.mean_epe) and self.mean_epe < 0:
            raise ValueError("mean EPE must be non-negative")
        if not math.isnan(self.fl_all) and not 0.0 <= self.fl_all <= 100.0:
            raise ValueError("Fl must lie in [0, 100]")

    def write_csv(self, path) -> None:
        """Per-sample rows followed by a summary row with sample_id ``mean``."""
        levels = len(self.nzr_baseline)
        header = ["sample_id", "regime", "epe", "fl_all"]
        header += [f"nzr_baseline_l{l + 1}" for l in range(levels)]
        header += [f"nzr_recovered_l{l + 1}" for l in range(levels)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.rows:
                writer.writerow([row.get(h, "") if not isinstance(row.get(h), float) else _fmt(row[h]) for h in header])
            summary = ["mean", "", _fmt(self.mean_epe), _fmt(self.fl_all)]
            summary += [_fmt(v) for v in self.nzr_baseline] + [_fmt(v) for v in self.nzr_recovered]
            writer.writerow(summary)


def _fmt(x: float) -> str:
    return repr(float(x))
