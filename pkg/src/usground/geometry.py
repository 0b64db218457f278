"""Box and mask geometry plus the overlap metrics used everywhere else.

Coordinate conventions, used consistently across the package:

* Origin is the top-left corner; x grows rightward (columns), y grows
  downward (rows).
* Boxes are half-open: a pixel at row r, col c occupies [c, c+1) x [r, r+1),
  so a box covering exactly that pixel is (c, r, c+1, r+1) and box width
  equals pixel count.
* Masks are dense 2-D bit planes, nonzero = foreground.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DegenerateBoxError, DimensionError, EmptyMaskError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates (half-open)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: Optional[float] = None
    phrase: Optional[str] = None

    def __post_init__(self):
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0,1], got {self.score}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_degenerate(self) -> bool:
        return self.width <= 0.0 or self.height <= 0.0

    def validate(self) -> "BoundingBox":
        if self.is_degenerate():
            raise DegenerateBoxError(f"box has non-positive extent: {self.xyxy()}")
        return self

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return replace(
            self,
            x_min=self.x_min * sx,
            y_min=self.y_min * sy,
            x_max=self.x_max * sx,
            y_max=self.y_max * sy,
        )

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return replace(
            self,
            x_min=self.x_min + dx,
            y_min=self.y_min + dy,
            x_max=self.x_max + dx,
            y_max=self.y_max + dy,
        )

    def hflipped(self, canvas_width: float) -> "BoundingBox":
        """Reflect across the vertical canvas midline: x' = W - x."""
        return replace(
            self,
            x_min=canvas_width - self.x_max,
            x_max=canvas_width - self.x_min,
        )

    def clipped(self, width: float, height: float) -> "BoundingBox":
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )


@dataclass(frozen=True)
class BinaryMask:
    """Dense binary foreground plane. `data` is a bool array of shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr.astype(bool, copy=False))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())

    def __array__(self, dtype=None):
        return self.data.astype(dtype) if dtype is not None else self.data


def _as_bool_plane(mask) -> np.ndarray:
    arr = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def _paired_planes(p, g) -> tuple[np.ndarray, np.ndarray]:
    pa, ga = _as_bool_plane(p), _as_bool_plane(g)
    if pa.shape != ga.shape:
        raise DimensionError(f"mask shapes differ: {pa.shape} vs {ga.shape}")
    return pa, ga


def iou(p, g) -> float:
    """Intersection over union of two same-shape binary masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    pa, ga = _paired_planes(p, g)
    inter = int(np.logical_and(pa, ga).sum())
    union = int(np.logical_or(pa, ga).sum())
    if union == 0:
        return 1.0
    return inter / union


def dsc(p, g) -> float:
    """Dice score 2|P∩G| / (|P|+|G|) of two same-shape binary masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    pa, ga = _paired_planes(p, g)
    inter = int(np.logical_and(pa, ga).sum())
    total = int(pa.sum()) + int(ga.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def box_intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Analytic IoU of two boxes. Raises on degenerate (zero-area) input."""
    a.validate()
    b.validate()
    inter = box_intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def enclosing_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(
        x_min=min(a.x_min, b.x_min),
        y_min=min(a.y_min, b.y_min),
        x_max=max(a.x_max, b.x_max),
        y_max=max(a.y_max, b.y_max),
    )


def generalized_box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """GIoU = IoU - |C \\ (A∪B)| / |C| with C the smallest enclosing box.

    Lies in [-1, 1]; negative for far-apart boxes, 1 only for identical ones.
    """
    a.validate()
    b.validate()
    inter = box_intersection_area(a, b)
    union = a.area + b.area - inter
    c = enclosing_box(a, b).area
    return inter / union - (c - union) / c


def mask_to_tight_box(m) -> BoundingBox:
    """Minimum enclosing box of a mask's foreground, in half-open coordinates.

    For foreground spanning rows r_min..r_max and cols c_min..c_max this is
    (c_min, r_min, c_max+1, r_max+1). Raises EmptyMaskError when there is no
    foreground; callers ingesting data are expected to skip and log such records.
    """
    arr = _as_bool_plane(m)
    rows = np.flatnonzero(arr.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    cols = np.flatnonzero(arr.any(axis=0))
    return BoundingBox(
        x_min=float(cols[0]),
        y_min=float(rows[0]),
        x_max=float(cols[-1] + 1),
        y_max=float(rows[-1] + 1),
    )
