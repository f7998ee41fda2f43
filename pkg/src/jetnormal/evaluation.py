"""Unoriented angular error metrics, AUC curves and coloured error maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_UNIT_TOL = 1e-6

#: colour ramp for error maps: blue at 0 degrees, linear to red at RAMP_MAX_DEG and above
RAMP_MAX_DEG = 60.0
RAMP_LOW = (0, 0, 255)
RAMP_HIGH = (255, 0, 0)

DEFAULT_AUC_THRESHOLDS = np.arange(0.0, 30.0 + 0.25, 0.5)


def _check_unit(v: np.ndarray, name: str):
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise ValueError(f"{name} must contain unit vectors")


def angle_error(pred, gt):
    """Angle in degrees between the lines spanned by ``pred`` and ``gt``.

    Works on single vectors or (N, 3) stacks; the result is in [0, 90].
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    _check_unit(pred, "pred")
    _check_unit(gt, "gt")
    # atan2 keeps full precision for tiny angles, where arccos of the dot does not
    dots = np.abs(np.sum(pred * gt, axis=-1))
    cross = np.linalg.norm(np.cross(pred, gt), axis=-1)
    err = np.degrees(np.arctan2(cross, dots))
    return float(err) if np.ndim(err) == 0 else err


def rmse(errors) -> float:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error vector")
    return float(np.sqrt(np.mean(e * e)))


def scene_averaged_rmse(per_scene_errors) -> float:
    """RMSE pooled within each scene, then averaged across scenes."""
    return float(np.mean([rmse(e) for e in per_scene_errors]))


@dataclass(frozen=True)
class AucCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def area(self) -> float:
        """Area under the curve normalised by the threshold span."""
        span = self.thresholds[-1] - self.thresholds[0]
        if span <= 0:
            return float(self.fractions[-1])
        return float(np.trapezoid(self.fractions, self.thresholds) / span)


def auc_curve(errors, thresholds=DEFAULT_AUC_THRESHOLDS) -> AucCurve:
    """Fraction of errors at or below each threshold."""
    e = np.sort(np.asarray(errors, dtype=float))
    t = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be ascending")
    if e.size == 0:
        return AucCurve(t, np.zeros_like(t))
    frac = np.searchsorted(e, t, side="right") / e.size
    return AucCurve(t, frac)


def error_colors(errors) -> np.ndarray:
    e = np.clip(np.asarray(errors, dtype=float) / RAMP_MAX_DEG, 0.0, 1.0)[:, None]
    lo = np.array(RAMP_LOW, dtype=float)
    hi = np.array(RAMP_HIGH, dtype=float)
    return np.rint(lo + e * (hi - lo)).astype(np.uint8)


def error_map_export(points, errors, path) -> Path:
    """Write a binary PLY with per-vertex colour and the error value."""
    from .fileio import write_ply

    pts = np.asarray(getattr(points, "points", points), dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(pts) != len(errors):
        raise ValueError(f"{len(pts)} points but {len(errors)} errors")
    return write_ply(path, pts, error_colors(errors), errors)
