"""Temporal smoothness from spatio-temporal (X-T) slices.

A slice stacks one pixel row of every frame over time (time down the first
axis).  Consistent motion draws straight diagonal streaks through the slice;
flicker and jumps bend them.  The score works on the streak directions:

1. 3x3 Sobel gradients over (space, time), replicate-edge padding.
2. Per pixel the edge direction is the gradient's perpendicular; of the two
   antiparallel candidates we keep the one pointing forward in time (edges
   with no forward component, i.e. purely spatial gradients, are dropped,
   as are pixels with negligible magnitude).
3. Per time row, the magnitude-weighted complex sum of the directions gives
   that row's dominant edge angle; empty rows carry the previous angle
   forward.
4. The angle sequence is unwrapped and second-differenced over time;
   roughness is the population std of those second differences and
   smoothness is exp(-roughness), so 1.0 means perfectly steady direction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageField
from .errors import DegenerateSliceError, InvalidShapeError

# Rows of a slice beyond this are ignored so scores stay comparable across
# clips of different lengths.
MAX_SLICE_FRAMES = 16

# Sobel magnitudes below this count as flat and are excluded from row sums.
MAGNITUDE_THRESHOLD = 1e-6

_REC601 = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class XTSlice:
    """Grayscale space-time slab, shape (T, W): time down, space across."""

    data: np.ndarray
    row: int | None = None

    def __post_init__(self) -> None:
        a = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if a.ndim != 2:
            raise InvalidShapeError(f"XTSlice must be 2-D, got shape {a.shape}")
        if a.shape[0] < 3:
            raise InvalidShapeError(
                f"XTSlice needs at least 3 time rows for a second difference, got {a.shape[0]}"
            )
        if not np.all(np.isfinite(a)):
            raise InvalidShapeError("XTSlice contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SliceScore:
    row: int | None
    roughness: float
    smoothness: float
    degenerate: bool = False


@dataclass(frozen=True)
class SmoothnessReport:
    """Per-slice roughness/smoothness plus the mean over usable slices."""

    slices: tuple[SliceScore, ...]
    mean_smoothness: float

    def as_dict(self) -> dict:
        return {
            "mean_smoothness": self.mean_smoothness,
            "slices": [
                {
                    "row": s.row,
                    "roughness": s.roughness,
                    "smoothness": s.smoothness,
                    "degenerate": s.degenerate,
                }
                for s in self.slices
            ],
        }


def luminance(img: ImageField) -> np.ndarray:
    """Rec.601 luma of an RGB image, float64 (H, W)."""
    return img.data.astype(np.float64) @ _REC601


def extract_slices(frames, rows) -> list[XTSlice]:
    """Stack the given pixel rows of every frame into X-T slices (earliest
    frame first).  Clips longer than :data:`MAX_SLICE_FRAMES` are truncated
    with a notice so scores stay on the standard protocol."""
    frames = list(frames)
    if len(frames) < 3:
        raise ValueError(f"need at least 3 frames, got {len(frames)}")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise InvalidShapeError(
                f"frame {i} has shape {f.shape}, expected {shape}"
            )
    if len(frames) > MAX_SLICE_FRAMES:
        warnings.warn(
            f"clip has {len(frames)} frames; slices use the first {MAX_SLICE_FRAMES}",
            RuntimeWarning,
            stacklevel=2,
        )
        frames = frames[:MAX_SLICE_FRAMES]
    H = shape[0]
    rows = [int(r) for r in rows]
    for r in rows:
        if not 0 <= r < H:
            raise IndexError(f"row {r} out of range [0, {H})")
    lumas = [luminance(f) for f in frames]
    return [XTSlice(np.stack([lum[r] for lum in lumas]), row=r) for r in rows]


def _edge_angles(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel magnitude and forward-time-folded edge angle per pixel; the
    returned weights are zero where the pixel is discarded."""
    gx = ndimage.sobel(data, axis=1, mode="nearest")  # d/dspace
    gt = ndimage.sobel(data, axis=0, mode="nearest")  # d/dtime
    mag = np.hypot(gx, gt)
    # Edge direction is perpendicular to the gradient; folding picks the
    # member with time component |gx| > 0.  gx == 0 means the edge runs
    # purely along space (instantaneous change) and is dropped.
    keep = (gx != 0) & (mag >= MAGNITUDE_THRESHOLD)
    theta = np.arctan2(-gt * np.sign(gx), np.abs(gx))
    weights = np.where(keep, mag, 0.0)
    return weights, theta


def slice_smoothness(s: XTSlice) -> tuple[float, float]:
    """Roughness and smoothness of one X-T slice (see module docstring).

    The first and last time rows see only half the temporal Sobel support
    (replicate padding), which skews their angles even for perfectly steady
    motion; the second differences touching those rows are therefore excluded
    from the std whenever enough rows remain (T >= 5).  Raises
    :class:`DegenerateSliceError` when no time row contains a usable edge.
    """
    weights, theta = _edge_angles(s.data)
    V = (weights * np.exp(1j * theta)).sum(axis=1)
    if not np.any(V != 0):
        raise DegenerateSliceError("no usable edges in any time row")
    phi = np.empty(s.frames, dtype=np.float64)
    prev = 0.0
    for t in range(s.frames):
        if V[t] != 0:
            prev = float(np.angle(V[t]))
        phi[t] = prev
    phi = np.unwrap(phi)
    second = phi[2:] - 2.0 * phi[1:-1] + phi[:-2]
    if s.frames >= 5:
        second = second[1:-1]
    roughness = float(second.std(ddof=0))
    return roughness, float(np.exp(-roughness))


def default_rows(height: int, count: int = 5) -> list[int]:
    """``count`` evenly spaced interior rows (the standard five-row protocol)."""
    return [int(r) for r in np.linspace(0, height - 1, count + 2).round()[1:-1]]


def video_smoothness(frames, rows=None) -> SmoothnessReport:
    """Mean temporal smoothness over X-T slices of a clip.

    ``rows`` defaults to five evenly spaced interior rows.  Degenerate slices
    are skipped with a warning and flagged in the report; if every slice is
    degenerate the error propagates.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    if rows is None:
        rows = default_rows(frames[0].height)
    scores: list[SliceScore] = []
    usable: list[float] = []
    for sl in extract_slices(frames, rows):
        try:
            rough, smooth = slice_smoothness(sl)
        except DegenerateSliceError:
            warnings.warn(
                f"slice at row {sl.row} has no usable edges; skipped",
                RuntimeWarning,
                stacklevel=2,
            )
            scores.append(SliceScore(row=sl.row, roughness=float("nan"),
                                     smoothness=float("nan"), degenerate=True))
            continue
        scores.append(SliceScore(row=sl.row, roughness=rough, smoothness=smooth))
        usable.append(smooth)
    if not usable:
        raise DegenerateSliceError("every slice is degenerate")
    return SmoothnessReport(slices=tuple(scores), mean_smoothness=float(np.mean(usable)))
