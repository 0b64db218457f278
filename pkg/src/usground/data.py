"""Dataset manifests, ingestion, deterministic splits, training
augmentations, and the synthetic speckle-image generator used for desk-scale
experiments.

Manifest layout (one JSON document per dataset, image/mask paths relative to
the manifest's directory):

    {"name": ..., "organ": ..., "role": "seen"|"unseen",
     "samples": [{"image": ..., "mask": ..., "prompt": ..., "split": ...}]}

"split" appears once split() has assigned labels. Masks are 8-bit
single-channel images, nonzero = foreground.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import (
    ConfigurationError,
    IngestionError,
    ManifestStateError,
    RecordError,
)
from .geometry import BinaryMask, BoundingBox, mask_to_tight_box

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ROLES = ("seen", "unseen")
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
DEFAULT_TARGET_SIZE = (128, 128)
# The generator places a single lesion per image; detectors need at least
# this many queries to cover a synthetic scene.
MAX_OBJECTS_PER_IMAGE = 1


@dataclass(frozen=True)
class SampleRecord:
    image: str
    mask: str
    prompt: str
    split: Optional[str] = None

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise RecordError("sample prompt must be nonempty")
        if self.split is not None and self.split not in SPLITS:
            raise RecordError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    organ: str
    role: str
    samples: tuple
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise RecordError(f"role must be one of {ROLES}, got {self.role!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "root", Path(self.root))

    @property
    def is_split(self) -> bool:
        return any(record.split is not None for record in self.samples)

    def counts(self) -> dict:
        out = {name: 0 for name in SPLITS}
        for record in self.samples:
            if record.split is not None:
                out[record.split] += 1
        return out


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IngestionError(path, f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RecordError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        records = tuple(
            SampleRecord(
                image=row["image"], mask=row["mask"], prompt=row["prompt"],
                split=row.get("split"),
            )
            for row in payload["samples"]
        )
        return DatasetManifest(
            name=payload["name"], organ=payload["organ"], role=payload["role"],
            samples=records, root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise RecordError(f"manifest {path} is missing required fields: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    rows = []
    for record in manifest.samples:
        row = {"image": record.image, "mask": record.mask, "prompt": record.prompt}
        if record.split is not None:
            row["split"] = record.split
        rows.append(row)
    payload = {
        "name": manifest.name, "organ": manifest.organ, "role": manifest.role,
        "samples": rows,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _round_half_up(value: Fraction) -> int:
    return int(value + Fraction(1, 2)) if value >= 0 else -int(-value + Fraction(1, 2))


def split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    override: bool = False,
) -> DatasetManifest:
    """Assign split labels: round-half-up of the train and val fractions,
    remainder to test, after a seeded shuffle. Unseen-role datasets go
    entirely to test."""
    if manifest.is_split and not override:
        raise ManifestStateError(
            f"manifest {manifest.name!r} already carries split labels; "
            "pass override to re-split"
        )
    n = len(manifest.samples)
    if manifest.role == "unseen":
        records = tuple(replace(r, split="test") for r in manifest.samples)
        return replace(manifest, samples=records)

    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigurationError("fractions must be three non-negative numbers")
    fracs = [Fraction(f).limit_denominator(10_000) for f in fractions]
    if sum(fracs) != 1:
        raise ConfigurationError(f"fractions must sum to 1, got {fractions}")

    n_train = _round_half_up(fracs[0] * n)
    n_val = _round_half_up(fracs[1] * n)
    if n_train + n_val > n:
        n_val = n - n_train
    order = np.random.default_rng(seed).permutation(n)
    labels = [None] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    records = tuple(
        replace(record, split=label) for record, label in zip(manifest.samples, labels)
    )
    return replace(manifest, samples=records)


@dataclass(frozen=True)
class Sample:
    """One training/eval item at working resolution. The box is the tight
    box of the original mask rescaled to the working canvas, so it stays
    within a pixel of the resampled mask's own tight box."""

    image: np.ndarray
    mask: BinaryMask
    box: BoundingBox
    prompt: str
    provenance: tuple
    split: Optional[str] = None


@dataclass
class IngestStats:
    total: int = 0
    yielded: int = 0
    skipped_empty: int = 0


def load_image_file(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise IngestionError(path, f"cannot read image: {exc}") from exc


def load_mask_file(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L")) > 0
    except OSError as exc:
        raise IngestionError(path, f"cannot read mask: {exc}") from exc


def _resize_image(arr: np.ndarray, target_hw) -> np.ndarray:
    h, w = target_hw
    img = Image.fromarray((arr * 255.0).astype(np.uint8))
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0


def _cell_edges(n_target: int, n_source: int):
    starts = np.floor(np.arange(n_target) * n_source / n_target).astype(np.int64)
    ends = np.ceil((np.arange(n_target) + 1) * n_source / n_target).astype(np.int64)
    return starts, np.clip(ends, None, n_source)


def _resize_mask(mask: np.ndarray, target_hw) -> np.ndarray:
    """Coverage resize: a target pixel is foreground iff its source
    footprint overlaps any foreground. Point sampling can drop thin tips of
    a region and move the tight box by more than a pixel; coverage keeps
    resample-then-box within one target pixel of box-then-rescale at any
    scale, at the cost of up to a pixel of thickening."""
    h, w = target_hw
    source_h, source_w = mask.shape
    if (source_h, source_w) == (h, w):
        return mask.astype(bool).copy()
    r0, r1 = _cell_edges(h, source_h)
    row_cum = np.zeros((source_h + 1, source_w), dtype=np.int32)
    np.cumsum(mask, axis=0, out=row_cum[1:])
    rows = (row_cum[r1] - row_cum[r0]) > 0
    c0, c1 = _cell_edges(w, source_w)
    col_cum = np.zeros((h, source_w + 1), dtype=np.int32)
    np.cumsum(rows, axis=1, out=col_cum[:, 1:])
    return (col_cum[:, c1] - col_cum[:, c0]) > 0


def ingest(
    manifest: DatasetManifest,
    target_size=DEFAULT_TARGET_SIZE,
    splits: Optional[set] = None,
    stats: Optional[IngestStats] = None,
) -> Iterator[Sample]:
    """Stream samples at target resolution. The box comes from the original
    mask's tight box, rescaled by (target_w/W, target_h/H). Empty-mask
    records are skipped (warned and counted), not fatal."""
    if splits is not None:
        wanted = set(splits)
        if manifest.role == "unseen" and wanted & {"train", "val"}:
            raise ManifestStateError(
                f"unseen dataset {manifest.name!r} cannot feed train/val iterators"
            )
    else:
        wanted = None
    target_h, target_w = target_size
    for record in manifest.samples:
        if wanted is not None and record.split not in wanted:
            continue
        if stats is not None:
            stats.total += 1
        image_path = manifest.root / record.image
        mask_path = manifest.root / record.mask
        image = load_image_file(image_path)
        mask = load_mask_file(mask_path)
        if image.shape != mask.shape:
            raise RecordError(
                f"image {image.shape} vs mask {mask.shape} shape mismatch for {record.image}"
            )
        if not mask.any():
            log.warning("skipping %s: mask is all background", record.mask)
            if stats is not None:
                stats.skipped_empty += 1
            continue
        orig_h, orig_w = image.shape
        box = mask_to_tight_box(mask).scaled(target_w / orig_w, target_h / orig_h)
        out = Sample(
            image=_resize_image(image, target_size),
            mask=BinaryMask(_resize_mask(mask, target_size)),
            box=box,
            prompt=record.prompt,
            provenance=(manifest.name, (orig_h, orig_w)),
            split=record.split,
        )
        if stats is not None:
            stats.yielded += 1
        yield out


def ingest_all(manifest, target_size=DEFAULT_TARGET_SIZE, splits=None):
    stats = IngestStats()
    samples = list(ingest(manifest, target_size, splits, stats))
    return samples, stats


# --- augmentation -----------------------------------------------------------

_ERASE_RETRY_CAP = 10


def _hflip(sample: Sample) -> Sample:
    width = sample.image.shape[1]
    return replace(
        sample,
        image=np.ascontiguousarray(np.fliplr(sample.image)),
        mask=BinaryMask(np.ascontiguousarray(np.fliplr(sample.mask.data))),
        box=sample.box.hflipped(width),
    )


def _crop(sample: Sample, x0: int, y0: int, width: int, height: int) -> Sample:
    return replace(
        sample,
        image=sample.image[y0 : y0 + height, x0 : x0 + width].copy(),
        mask=BinaryMask(sample.mask.data[y0 : y0 + height, x0 : x0 + width].copy()),
        box=sample.box.shifted(-x0, -y0),
    )


def _pad(sample: Sample, left: int, top: int, width: int, height: int,
         fill: float) -> Sample:
    img = np.full((height, width), fill, dtype=sample.image.dtype)
    msk = np.zeros((height, width), dtype=bool)
    h, w = sample.image.shape
    img[top : top + h, left : left + w] = sample.image
    msk[top : top + h, left : left + w] = sample.mask.data
    return replace(
        sample, image=img, mask=BinaryMask(msk), box=sample.box.shifted(left, top)
    )


def _rescale(sample: Sample, scale: float) -> Sample:
    h, w = sample.image.shape
    new_h, new_w = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    sx, sy = new_w / w, new_h / h
    return replace(
        sample,
        image=_resize_image(sample.image, (new_h, new_w)),
        mask=BinaryMask(_resize_mask(sample.mask.data, (new_h, new_w))),
        box=sample.box.scaled(sx, sy),
    )


def _scale_jitter(sample: Sample, rng: np.random.Generator) -> Sample:
    """Resize by a random factor, then crop or pad back to the original
    canvas; the crop window always keeps the whole box."""
    target_h, target_w = sample.image.shape
    scale = float(rng.uniform(0.85, 1.15))
    scaled = _rescale(sample, scale)
    h, w = scaled.image.shape
    if (h, w) == (target_h, target_w):
        return scaled
    if h >= target_h and w >= target_w:
        box = scaled.box
        x_lo = max(0, int(math.ceil(box.x_max)) - target_w)
        x_hi = min(int(math.floor(box.x_min)), w - target_w)
        y_lo = max(0, int(math.ceil(box.y_max)) - target_h)
        y_hi = min(int(math.floor(box.y_min)), h - target_h)
        if x_lo > x_hi or y_lo > y_hi:
            # Box too large to keep fully inside; give up on this op.
            return sample
        x0 = int(rng.integers(x_lo, x_hi + 1))
        y0 = int(rng.integers(y_lo, y_hi + 1))
        return _crop(scaled, x0, y0, target_w, target_h)
    # Smaller in at least one dimension: pad (and crop first if mixed).
    if h > target_h or w > target_w:
        return sample
    left = int(rng.integers(0, target_w - w + 1))
    top = int(rng.integers(0, target_h - h + 1))
    return _pad(scaled, left, top, target_w, target_h, fill=float(sample.image.min()))


def _erase(sample: Sample, rng: np.random.Generator) -> Sample:
    """Occlude a random rectangle of the image with noise. The mask and box
    are deliberately untouched (occlusion, not removal); rectangles that
    would cover more than half the foreground are re-drawn."""
    h, w = sample.image.shape
    fg = int(sample.mask.foreground_count)
    for _ in range(_ERASE_RETRY_CAP):
        ew = int(rng.integers(max(w // 10, 2), max(w // 4, 3)))
        eh = int(rng.integers(max(h // 10, 2), max(h // 4, 3)))
        x0 = int(rng.integers(0, w - ew + 1))
        y0 = int(rng.integers(0, h - eh + 1))
        covered = int(sample.mask.data[y0 : y0 + eh, x0 : x0 + ew].sum())
        if fg > 0 and covered > 0.5 * fg:
            continue
        img = sample.image.copy()
        img[y0 : y0 + eh, x0 : x0 + ew] = rng.uniform(
            float(sample.image.min()), float(sample.image.max()), size=(eh, ew)
        ).astype(sample.image.dtype)
        return replace(sample, image=img)
    return sample


def augment(sample: Sample, seed: int) -> Sample:
    """Seeded random subset of {flip, scale-jitter with crop/pad, erase}.
    Geometric ops transform mask and box identically; a draw that fires no
    op returns the sample unchanged."""
    rng = np.random.default_rng(seed)
    out = sample
    if rng.random() < 0.5:
        out = _hflip(out)
    if rng.random() < 0.5:
        out = _scale_jitter(out, rng)
    if rng.random() < 0.3:
        out = _erase(out, rng)
    return out


# --- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    canvas: tuple = (128, 128)
    families: tuple = ("bright", "dark")
    variant: str = "A"
    name: str = "synth"
    organ: str = "phantom"
    role: str = "seen"
    min_lesion_area: float = 150.0

    def __post_init__(self):
        if self.count <= 0:
            raise ConfigurationError("count must be positive")
        if self.variant not in ("A", "B"):
            raise ConfigurationError("variant must be 'A' or 'B'")
        if not self.families or any(f not in ("bright", "dark") for f in self.families):
            raise ConfigurationError("families must be a subset of {bright, dark}")


@dataclass(frozen=True)
class _DomainProfile:
    background: tuple
    bright_contrast: tuple
    dark_contrast: tuple
    gain_axis: int          # 0 = vertical ramp, 1 = horizontal
    gain_amp: tuple
    speckle_sigma: float
    speckle_strength: float
    sensor_noise: float
    edge_blur: float


# Variant A is the "pretraining" look; variant B shifts brightness, gain
# direction, speckle grain, and noise so a frozen-A model degrades on it.
_PROFILES = {
    "A": _DomainProfile(
        background=(0.20, 0.32), bright_contrast=(0.30, 0.45),
        dark_contrast=(0.14, 0.24), gain_axis=0, gain_amp=(0.0, 0.08),
        speckle_sigma=1.0, speckle_strength=0.35, sensor_noise=0.010,
        edge_blur=1.0,
    ),
    "B": _DomainProfile(
        background=(0.46, 0.62), bright_contrast=(0.20, 0.30),
        dark_contrast=(0.26, 0.36), gain_axis=1, gain_amp=(0.25, 0.45),
        speckle_sigma=2.4, speckle_strength=0.55, sensor_noise=0.025,
        edge_blur=1.4,
    ),
}


def _ellipse_mask(canvas_hw, rng: np.random.Generator) -> np.ndarray:
    h, w = canvas_hw
    cy = rng.uniform(0.28, 0.72) * h
    cx = rng.uniform(0.28, 0.72) * w
    lo = min(9.0, 0.07 * min(h, w))
    a = rng.uniform(lo, min(h, w) * 0.19)
    b = rng.uniform(lo, min(h, w) * 0.19)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon_mask(canvas_hw, rng: np.random.Generator) -> np.ndarray:
    h, w = canvas_hw
    cy = rng.uniform(0.30, 0.70) * h
    cx = rng.uniform(0.30, 0.70) * w
    base = rng.uniform(min(10.0, 0.078 * min(h, w)), min(h, w) * 0.17)
    k = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = base * rng.uniform(0.75, 1.2, size=k)
    points = [
        (float(cx + r * np.cos(t)), float(cy + r * np.sin(t)))
        for r, t in zip(radii, angles)
    ]
    img = Image.new("1", (w, h), 0)
    ImageDraw.Draw(img).polygon(points, fill=1)
    return np.asarray(img, dtype=bool)


def _lesion_mask(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    for _ in range(50):
        if rng.random() < 0.7:
            mask = _ellipse_mask(config.canvas, rng)
        else:
            mask = _polygon_mask(config.canvas, rng)
        if not mask.any():
            continue
        tight = mask_to_tight_box(mask)
        if tight.area >= config.min_lesion_area:
            return mask
    raise ConfigurationError(
        f"could not draw a lesion with tight-box area >= {config.min_lesion_area}"
    )


def _render(config: SynthConfig, family: str, rng: np.random.Generator):
    profile = _PROFILES[config.variant]
    h, w = config.canvas
    mask = _lesion_mask(config, rng)
    background = rng.uniform(*profile.background)
    if family == "bright":
        level = background + rng.uniform(*profile.bright_contrast)
    else:
        level = max(background - rng.uniform(*profile.dark_contrast), 0.03)
    structure = np.full((h, w), background, dtype=np.float64)
    structure[mask] = level

    amp = rng.uniform(*profile.gain_amp) * (1 if rng.random() < 0.5 else -1)
    ramp = np.linspace(-1.0, 1.0, (h if profile.gain_axis == 0 else w))
    gain = 1.0 + amp * (ramp[:, None] if profile.gain_axis == 0 else ramp[None, :])
    structure = structure * gain

    structure = ndimage.gaussian_filter(structure, profile.edge_blur)
    raw = rng.exponential(1.0, size=(h, w))
    smooth = ndimage.gaussian_filter(raw, profile.speckle_sigma)
    smooth /= smooth.mean()
    image = structure * (1.0 + profile.speckle_strength * (smooth - 1.0))
    image = image + rng.normal(0.0, profile.sensor_noise, size=(h, w))
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic(config: SynthConfig, out_dir, seed: int = 0) -> DatasetManifest:
    """Write `count` speckled single-lesion images + masks + manifest under
    out_dir; byte-identical for a fixed (config, seed)."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(out_dir, f"cannot create output directory: {exc}") from exc

    records = []
    for index in range(config.count):
        rng = np.random.default_rng((seed, index))
        family = config.families[int(rng.integers(len(config.families)))]
        image, mask = _render(config, family, rng)
        image_rel = f"images/{config.name}_{index:05d}.png"
        mask_rel = f"masks/{config.name}_{index:05d}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_dir / image_rel)
        Image.fromarray(mask.astype(np.uint8) * 255).save(out_dir / mask_rel)
        records.append(
            SampleRecord(image=image_rel, mask=mask_rel, prompt=f"{family} lesion")
        )
    manifest = DatasetManifest(
        name=config.name, organ=config.organ, role=config.role,
        samples=tuple(records), root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
