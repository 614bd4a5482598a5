"""Shape completion of occluded fruit masks and the PAR / IoU metrics.

The built-in completer mirrors the visible mask about its major principal
axis, or optionally about a line fitted robustly through its row midpoints.
Externally completed masks (from any inpainting model) are read from disk and
merged with the visible pixels, so completion only ever adds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import siegelslopes

from .core import DepthRaster, RasterMask, load_mask
from .errors import AxisUndefinedError, BackfillError, ConsistencyError, DivisionUndefinedError, ValidationError

PAR_BAND = (0.85, 1.15)


class CompletionMethod(str, Enum):
    SYMMETRY = "symmetry"
    EXTERNAL = "external"
    NONE = "none"


class AxisMethod(str, Enum):
    """Mirror line of the symmetry completer.

    ``pca``: major principal axis through the pixel centroid.
    ``midline``: repeated-median line through the row midpoints.
    """
    PCA = "pca"
    MIDLINE = "midline"


class MetricMode(str, Enum):
    """How PAR is measured.

    ``fruit``: whole restored fruit against whole ground-truth fruit.
    ``region``: restored pixels against the pixels that were actually missing.
    """
    FRUIT = "fruit"
    REGION = "region"


@dataclass(frozen=True)
class CompletionResult:
    completed: RasterMask
    method: CompletionMethod


@dataclass(frozen=True)
class CompletionMetrics:
    par: float
    iou: float
    in_band: bool

    def to_dict(self) -> dict:
        return {"par": self.par, "iou": self.iou, "in_band": self.in_band}


def _require_same_shape(a: RasterMask, b: RasterMask) -> None:
    if a.shape != b.shape:
        raise ConsistencyError(f"mask shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- completers

_AXIS_PASSES = 3                  # midpoint line refits, each re-binning rows along the new direction
_AXIS_SNAP = math.radians(10.0)   # a principal axis this close to an image axis starts from that axis


def _row_midpoints(q: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates along ``d`` and midpoints across it of the pixel rows perpendicular to ``d``."""
    n = np.array([-d[1], d[0]])
    along = q @ d
    row = np.rint(along).astype(np.int64)
    row -= row.min()
    s = q @ n
    lo = np.full(row.max() + 1, np.inf)
    hi = np.full(row.max() + 1, -np.inf)
    np.minimum.at(lo, row, s)
    np.maximum.at(hi, row, s)
    seen = np.isfinite(lo)
    return np.flatnonzero(seen) + np.rint(along).min(), 0.5 * (lo[seen] + hi[seen])


def _window(fruit: np.ndarray) -> tuple[slice, slice]:
    """Frame window holding the fruit and any reflection of it about a line through its box."""
    v, u = np.nonzero(fruit)
    pad = int(math.ceil(math.hypot(v.max() - v.min(), u.max() - u.min()))) + 1
    h, w = fruit.shape
    return (slice(max(0, v.min() - pad), min(h, v.max() + pad + 1)),
            slice(max(0, u.min() - pad), min(w, u.max() + pad + 1)))


def _reflect_in(fruit: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Mirror image of ``fruit`` about the line through c along d, clipped to the array.

    Pulls each output pixel back through the (self-inverse) reflection, which
    leaves no holes for oblique axes.
    """
    h, w = fruit.shape
    vv, uu = np.mgrid[0:h, 0:w]
    du, dv = uu - c[0], vv - c[1]
    along = du * d[0] + dv * d[1]
    su = np.rint(c[0] + 2.0 * along * d[0] - du).astype(np.int64)
    sv = np.rint(c[1] + 2.0 * along * d[1] - dv).astype(np.int64)
    ok = (su >= 0) & (su < w) & (sv >= 0) & (sv < h)
    out = np.zeros_like(fruit)
    out[ok] = fruit[sv[ok], su[ok]]
    return out


def _reflect(fruit: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Frame-sized mirror image of ``fruit``; only a window around the fruit is resampled."""
    out = np.zeros_like(fruit)
    if not fruit.any():
        return out
    rows, cols = _window(fruit)
    origin = np.array([cols.start, rows.start], dtype=np.float64)
    out[rows, cols] = _reflect_in(fruit[rows, cols], np.asarray(c) - origin, d)
    return out


def symmetry_axis(fruit: np.ndarray, method: AxisMethod = AxisMethod.PCA) -> tuple[np.ndarray, np.ndarray]:
    """A point ``(u, v)`` on the mirror line and its unit direction.

    With ``midline`` rows of pixels are taken across the major principal axis,
    or across the image axis when that is within a few degrees of it, and a
    repeated-median line is fitted through their midpoints.  Intact rows have
    midpoints on the mirror line, so rows cut by an occluder do not move the
    fit while fewer than half of them are cut.
    """
    method = AxisMethod(method)
    v, u = np.nonzero(fruit)
    if len(u) < 2:
        raise AxisUndefinedError(f"{len(u)} fruit pixel(s) cannot define an axis")
    pts = np.column_stack([u, v]).astype(np.float64)
    c = pts.mean(axis=0)
    w, vecs = np.linalg.eigh(np.cov((pts - c).T))
    if w[1] <= 0:
        raise AxisUndefinedError("fruit pixels have zero spread")
    d = vecs[:, 1]
    if method is AxisMethod.PCA:
        return c, d
    k = int(np.argmax(np.abs(d)))
    if math.acos(min(1.0, abs(float(d[k])))) <= _AXIS_SNAP:
        d = np.eye(2)[k] * math.copysign(1.0, d[k])     # whole pixel rows bin without staircase error
    for _ in range(_AXIS_PASSES):
        n = np.array([-d[1], d[0]])
        along, mid = _row_midpoints(pts - c, d)
        if len(along) < 2:
            c = c + float(np.median(mid)) * n
            break
        slope, intercept = siegelslopes(mid, along)
        c = c + intercept * n
        d = d + slope * n
        d /= np.linalg.norm(d)
    return c, d


def complete_symmetry(occluded: RasterMask, axis: AxisMethod = AxisMethod.PCA) -> CompletionResult:
    """Union of the visible mask with its reflection about :func:`symmetry_axis`."""
    fruit = occluded.fruit
    c, d = symmetry_axis(fruit, axis)
    completed = fruit | _reflect(fruit, c, d)
    return CompletionResult(RasterMask.from_bool(completed), CompletionMethod.SYMMETRY)


def ingest_external(path, occluded: RasterMask) -> CompletionResult:
    """Read an externally completed mask and union it with the visible pixels."""
    ext = load_mask(Path(path))
    if ext.shape != occluded.shape:
        raise ConsistencyError(f"external mask {path} is {ext.shape}, expected {occluded.shape}")
    return CompletionResult(RasterMask.from_bool(ext.fruit | occluded.fruit), CompletionMethod.EXTERNAL)


def no_completion(occluded: RasterMask) -> CompletionResult:
    return CompletionResult(occluded, CompletionMethod.NONE)


# ---------------------------------------------------------------- metrics

def pixel_area_ratio(restored: RasterMask, truth: RasterMask, mode: MetricMode = MetricMode.FRUIT,
                     visible: Optional[RasterMask] = None) -> float:
    """Pixel area ratio of a restoration against ground truth.

    In ``region`` mode ``visible`` is required and both areas exclude the
    visible pixels.
    """
    _require_same_shape(restored, truth)
    mode = MetricMode(mode)
    r, t = restored.fruit, truth.fruit
    if mode is MetricMode.REGION:
        if visible is None:
            raise ValidationError("region mode needs the visible mask")
        _require_same_shape(visible, truth)
        r = r & ~visible.fruit
        t = t & ~visible.fruit
    denom = int(t.sum())
    if denom == 0:
        raise DivisionUndefinedError("ground-truth area is zero")
    return int(r.sum()) / denom


def iou(pred: RasterMask, truth: RasterMask) -> float:
    _require_same_shape(pred, truth)
    p, t = pred.fruit, truth.fruit
    union = int((p | t).sum())
    if union == 0:
        raise DivisionUndefinedError("both masks are empty")
    return int((p & t).sum()) / union


def band_classify(par: float, band: tuple[float, float] = PAR_BAND) -> bool:
    if par < 0:
        raise ValidationError(f"PAR must be non-negative, got {par}")
    return band[0] <= par <= band[1]


def completion_metrics(restored: RasterMask, truth: RasterMask, mode: MetricMode = MetricMode.FRUIT,
                       visible: Optional[RasterMask] = None) -> CompletionMetrics:
    par = pixel_area_ratio(restored, truth, mode, visible)
    return CompletionMetrics(par, iou(restored, truth), band_classify(par))


# ---------------------------------------------------------------- depth

def backfill_depth(completed: RasterMask, visible: RasterMask, depth: DepthRaster,
                   keep_valid: bool = False) -> DepthRaster:
    """Give restored pixels the mean valid depth of the visible fruit, in whole mm.

    Restored pixels are overwritten even if they carry a reading, since in
    the field that reading belongs to the occluder.  ``keep_valid`` instead
    leaves every valid reading untouched.
    """
    _require_same_shape(completed, visible)
    if depth.shape != visible.shape:
        raise ConsistencyError(f"depth {depth.shape} does not match mask {visible.shape}")
    vis = visible.fruit
    if np.any(vis & ~completed.fruit):
        raise ValidationError("visible mask is not contained in the completed mask")
    ok = vis & depth.valid
    if not ok.any():
        raise BackfillError("no valid depth on the visible fruit")
    restored = completed.fruit & ~vis
    if keep_valid:
        restored &= ~depth.valid
    if not restored.any():
        return depth
    mean_mm = int(np.rint(depth.values[ok].astype(np.float64).mean()))
    out = depth.values.copy()
    out[restored] = mean_mm
    return DepthRaster(out)
