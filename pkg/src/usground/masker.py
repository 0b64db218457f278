"""Box-prompted mask generation behind a small backend interface.

The toy backend is deterministic and parameter-free: dilate the prompt box by
10%, split the intensities inside it at the threshold maximizing
between-class variance, take the split side whose mean sits farther from the
dilated region's border ring (the ring is assumed background), keep the
largest connected component, and fill enclosed holes. A region without a
usable intensity gap yields an empty mask rather than an error.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import BackendError, ConfigurationError, PromptError
from .geometry import BinaryMask, BoundingBox

DEFAULT_DILATION = 0.10
# Minimum gap between the two intensity-class means (in units of the image's
# [0,1] range) for the region to count as containing an object.
DEFAULT_MIN_CONTRAST = 0.04

THRESHOLD_STRATEGIES = ("otsu", "mean")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskRequest:
    image: np.ndarray
    box: BoundingBox
    dilation: float = DEFAULT_DILATION
    threshold_strategy: str = "otsu"
    fill_holes: bool = True
    min_contrast: float = DEFAULT_MIN_CONTRAST

    def __post_init__(self):
        if self.threshold_strategy not in THRESHOLD_STRATEGIES:
            raise ConfigurationError(
                f"unknown threshold strategy {self.threshold_strategy!r}; "
                f"available: {THRESHOLD_STRATEGIES}"
            )
        if self.dilation < 0:
            raise ConfigurationError("dilation must be non-negative")


def _as_float_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise PromptError(f"expected a single-channel (H,W) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def _dilated_pixel_bounds(box: BoundingBox, dilation: float, height: int, width: int):
    """Integer half-open bounds of the dilated box, clipped to the canvas."""
    dx, dy = dilation * box.width, dilation * box.height
    x0 = int(np.floor(box.x_min - dx))
    y0 = int(np.floor(box.y_min - dy))
    x1 = int(np.ceil(box.x_max + dx))
    y1 = int(np.ceil(box.y_max + dy))
    return max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)


def otsu_threshold(values: np.ndarray) -> float:
    """Between-class-variance-maximizing split of values scaled to [0,1];
    deterministic (first maximum wins). Returns the threshold in the same
    scaled units."""
    hist, edges = np.histogram(values, bins=256, range=(0.0, 1.0))
    total = hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2
    weight0 = np.cumsum(hist)
    weight1 = total - weight0
    cum_mass = np.cumsum(hist * centers)
    total_mass = cum_mass[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean0 = cum_mass / weight0
        mean1 = (total_mass - cum_mass) / weight1
        variance = weight0 * weight1 * (mean0 - mean1) ** 2
    variance[~np.isfinite(variance)] = -1.0
    return float(centers[int(np.argmax(variance))])


def segment_box(req: MaskRequest) -> BinaryMask:
    """Produce a foreground mask for the boxed object; empty when the region
    shows no usable contrast. Output has the image's shape and the foreground
    stays inside the dilated box."""
    image = _as_float_image(req.image)
    height, width = image.shape
    box = req.box
    if box.area <= 0:
        raise PromptError(f"box {box.xyxy()} has no area")
    x0, y0, x1, y1 = _dilated_pixel_bounds(box, req.dilation, height, width)
    if x0 >= x1 or y0 >= y1:
        raise PromptError(f"box {box.xyxy()} lies outside the {width}x{height} canvas")

    out = np.zeros((height, width), dtype=bool)
    region = image[y0:y1, x0:x1]
    lo, hi = float(region.min()), float(region.max())
    if hi - lo < 1e-12:
        return BinaryMask(out)

    scaled = (region - lo) / (hi - lo)
    if req.threshold_strategy == "otsu":
        threshold = otsu_threshold(scaled)
    else:
        threshold = float(scaled.mean())
    above = scaled > threshold
    if not above.any() or above.all():
        return BinaryMask(out)

    mean_above = float(scaled[above].mean())
    mean_below = float(scaled[~above].mean())
    # Class-mean gap in original intensity units; below this the region is
    # treated as objectless texture.
    if (mean_above - mean_below) * (hi - lo) < req.min_contrast:
        return BinaryMask(out)

    # The border ring of the dilated region is assumed background; foreground
    # is the class whose mean sits farther from it.
    ring = np.ones_like(above)
    if above.shape[0] > 2 and above.shape[1] > 2:
        ring[1:-1, 1:-1] = False
    ring_mean = float(scaled[ring].mean())
    if abs(mean_above - ring_mean) >= abs(mean_below - ring_mean):
        foreground = above
    else:
        foreground = ~above

    labels, count = ndimage.label(foreground, structure=_EIGHT_CONNECTED)
    if count == 0:
        return BinaryMask(out)
    sizes = ndimage.sum_labels(foreground, labels, index=range(1, count + 1))
    keep = int(np.argmax(sizes)) + 1
    component = labels == keep
    if req.fill_holes:
        component = ndimage.binary_fill_holes(component)
    out[y0:y1, x0:x1] = component
    return BinaryMask(out)


class ToyMasker:
    """Deterministic threshold-based mask backend."""

    name = "toy"

    def __init__(self, dilation: float = DEFAULT_DILATION,
                 threshold_strategy: str = "otsu", fill_holes: bool = True,
                 min_contrast: float = DEFAULT_MIN_CONTRAST):
        self.dilation = dilation
        self.threshold_strategy = threshold_strategy
        self.fill_holes = fill_holes
        self.min_contrast = min_contrast

    def segment(self, image, box: BoundingBox) -> BinaryMask:
        return segment_box(
            MaskRequest(
                image=image, box=box, dilation=self.dilation,
                threshold_strategy=self.threshold_strategy,
                fill_holes=self.fill_holes, min_contrast=self.min_contrast,
            )
        )


class MockMasker:
    """Scripted backend: fills the prompt box (or returns canned masks)."""

    name = "mock"

    def __init__(self, masks: Optional[dict] = None):
        # Optional mapping from rounded box xyxy -> mask to return verbatim.
        self._masks = masks or {}

    def segment(self, image, box: BoundingBox) -> BinaryMask:
        key = tuple(round(v, 3) for v in box.xyxy())
        if key in self._masks:
            return BinaryMask(np.asarray(self._masks[key], dtype=bool))
        arr = np.asarray(image)
        out = np.zeros(arr.shape[:2], dtype=bool)
        x0 = max(int(np.floor(box.x_min)), 0)
        y0 = max(int(np.floor(box.y_min)), 0)
        x1 = min(int(np.ceil(box.x_max)), out.shape[1])
        y1 = min(int(np.ceil(box.y_max)), out.shape[0])
        out[y0:y1, x0:x1] = True
        return BinaryMask(out)


def _load_toy_masker(checkpoint=None, **kwargs):
    return ToyMasker(**kwargs)


def _load_mock_masker(checkpoint=None, **kwargs):
    return MockMasker(**kwargs)


MASKER_BACKENDS = {"toy": _load_toy_masker, "mock": _load_mock_masker}


def load_masker(descriptor: str, checkpoint=None, **kwargs):
    """Resolve a masker backend by registry name or module:attribute path."""
    if descriptor in MASKER_BACKENDS:
        return MASKER_BACKENDS[descriptor](checkpoint=checkpoint, **kwargs)
    if ":" in descriptor:
        module_name, attr = descriptor.split(":", 1)
        try:
            factory = getattr(importlib.import_module(module_name), attr)
            return factory(checkpoint=checkpoint, **kwargs)
        except (ImportError, AttributeError, TypeError) as exc:
            raise BackendError(f"cannot load masker backend {descriptor!r}: {exc}") from exc
    raise BackendError(
        f"unknown masker backend {descriptor!r}; available: "
        f"{sorted(MASKER_BACKENDS)} or a module:attribute factory path"
    )
