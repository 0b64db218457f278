"""End-to-end prompt -> boxes -> mask composition.

The detector sees a fixed square canvas (its own size); boxes come back
normalized, so they can be placed directly onto the original image, and the
mask backend then runs at native resolution. The returned mask always has
the submitted image's dimensions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .detector import select_boxes
from .errors import ConfigurationError, PromptError
from .geometry import BinaryMask, BoundingBox

MODES = ("best", "all")
DEFAULT_THRESHOLD = 0.30
DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class SegmentationResult:
    boxes: tuple
    mask: BinaryMask
    masks: tuple
    best_rejected: Optional[float]
    timing_ms: dict

    @property
    def detected(self) -> bool:
        return len(self.boxes) > 0


def _as_gray_float(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def _resize_float(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    img = Image.fromarray(arr, mode="F")
    out = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32)
    return out.copy()  # PIL hands back a read-only view


class SegmentationPipeline:
    """Immutable after construction; safe to share across request handlers."""

    def __init__(
        self,
        detector,
        masker,
        threshold: float = DEFAULT_THRESHOLD,
        top_k: int = DEFAULT_TOP_K,
        checkpoint_id: Optional[str] = None,
    ):
        if not 0.0 < threshold <= 1.0:
            raise ConfigurationError(f"threshold {threshold} outside (0, 1]")
        self.detector = detector
        self.masker = masker
        self.threshold = threshold
        self.top_k = top_k
        self.checkpoint_id = checkpoint_id

    def describe(self) -> dict:
        return {
            "detector": self.detector.name,
            "masker": self.masker.name,
            "checkpoint": self.checkpoint_id,
        }

    def segment(
        self,
        image,
        prompt: str,
        threshold: Optional[float] = None,
        mode: str = "best",
    ) -> SegmentationResult:
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
        threshold = self.threshold if threshold is None else threshold

        start = time.perf_counter()
        arr = _as_gray_float(image)
        height, width = arr.shape

        t0 = time.perf_counter()
        canvas = getattr(self.detector, "canvas_size", None)
        detector_view = _resize_float(arr, canvas) if canvas else arr
        out = self.detector.detect(detector_view, prompt)
        boxes = select_boxes(out, threshold, self.top_k, canvas_hw=(height, width))
        detect_ms = (time.perf_counter() - t0) * 1000.0

        best_rejected = None
        if not boxes and out.num_queries > 0:
            best_rejected = float(out.scores().max())

        t1 = time.perf_counter()
        masks = []
        for box in boxes:
            clipped = box.clipped(width, height)
            if clipped.is_degenerate():
                masks.append(BinaryMask(np.zeros((height, width), dtype=bool)))
                continue
            try:
                masks.append(self.masker.segment(arr, clipped))
            except PromptError:
                masks.append(BinaryMask(np.zeros((height, width), dtype=bool)))
        segment_ms = (time.perf_counter() - t1) * 1000.0

        if not masks:
            combined = BinaryMask(np.zeros((height, width), dtype=bool))
        elif mode == "best":
            combined = masks[0]  # select_boxes sorts by descending score
        else:
            union = np.zeros((height, width), dtype=bool)
            for m in masks:
                union |= m.data
            combined = BinaryMask(union)

        total_ms = (time.perf_counter() - start) * 1000.0
        return SegmentationResult(
            boxes=tuple(boxes),
            mask=combined,
            masks=tuple(masks),
            best_rejected=best_rejected,
            timing_ms={"detect": detect_ms, "segment": segment_ms, "total": total_ms},
        )
