"""Text-prompted segmentation: a grounded detector proposes boxes from free-form
prompts and a box-prompted masker produces the final segmentation."""

__version__ = "0.1.0"

from .geometry import BinaryMask, BoundingBox, box_iou, dsc, iou, mask_to_tight_box

__all__ = [
    "BinaryMask",
    "BoundingBox",
    "box_iou",
    "dsc",
    "iou",
    "mask_to_tight_box",
    "__version__",
]
