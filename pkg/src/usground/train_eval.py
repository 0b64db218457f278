"""Adapter training with early stopping, evaluation reports in mean±std
percent, prompt-robustness sweeps, and runtime benchmarking."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Optional, Sequence

import numpy as np
import torch

from .data import DatasetManifest, Sample, augment, load_image_file, load_mask_file
from .errors import (
    ConfigurationError,
    EvaluationError,
    NumericError,
    TrainingDivergedError,
)
from .geometry import dsc as dsc_metric
from .geometry import iou as iou_metric
from .losses import GroundTruth, LossWeights, total_loss
from .pipeline import SegmentationPipeline

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    augment: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ConfigurationError("batch size and max epochs must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate must be positive, decay non-negative")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")


class EarlyStopper:
    """Stop once validation loss has failed to improve for `patience`
    consecutive epochs; remembers where the best loss occurred."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigurationError("patience must be at least 1")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record this epoch's loss; True means training should stop now."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "train_loss": self.train_loss,
             "val_loss": self.val_loss, "lr": self.lr}
        )


@dataclass(frozen=True)
class TrainResult:
    history: tuple
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int


def _sample_ground_truth(sample: Sample, token_count: int, canvas: int) -> GroundTruth:
    box = sample.box
    cx = (box.x_min + box.x_max) / 2 / canvas
    cy = (box.y_min + box.y_max) / 2 / canvas
    w = box.width / canvas
    h = box.height / canvas
    return GroundTruth(
        box=torch.tensor([cx, cy, w, h], dtype=torch.float32),
        token_targets=torch.ones(token_count),
    )


def _batches(samples, token_cache, detector, batch_size, rng=None):
    """Group by token-sequence length so prompts stack into one tensor;
    order within the epoch is shuffled when an rng is given."""
    indices = list(range(len(samples)))
    if rng is not None:
        rng.shuffle(indices)
    buckets: dict = {}
    for i in indices:
        prompt = samples[i].prompt
        if prompt not in token_cache:
            token_cache[prompt] = detector.tokenize(prompt)
        buckets.setdefault(len(token_cache[prompt].ids), []).append(i)
    batches = []
    for length in sorted(buckets):
        bucket = buckets[length]
        for k in range(0, len(bucket), batch_size):
            batches.append(bucket[k : k + batch_size])
    if rng is not None:
        rng.shuffle(batches)
    return batches


def _batch_loss(detector, samples, indices, token_cache, weights, canvas):
    images = torch.stack(
        [torch.as_tensor(samples[i].image, dtype=torch.float32) for i in indices]
    )[:, None]
    tokens = [token_cache[samples[i].prompt] for i in indices]
    ids = torch.tensor([t.ids for t in tokens], dtype=torch.long)
    boxes, logits = detector(images, ids)
    loss = boxes.new_zeros(())
    for row, i in enumerate(indices):
        gt = _sample_ground_truth(samples[i], len(tokens[row].ids), canvas)
        out = SimpleNamespace(boxes=boxes[row], logits=logits[row])
        sample_loss, _ = total_loss(out, [gt], weights)
        loss = loss + sample_loss
    return loss / len(indices)


def _epoch_pass(detector, samples, token_cache, cfg, canvas, optimizer=None, rng=None):
    total, count = 0.0, 0
    for indices in _batches(samples, token_cache, detector, cfg.batch_size, rng):
        if optimizer is not None:
            optimizer.zero_grad()
            loss = _batch_loss(detector, samples, indices, token_cache, cfg.weights, canvas)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                loss = _batch_loss(
                    detector, samples, indices, token_cache, cfg.weights, canvas
                )
        total += float(loss.detach()) * len(indices)
        count += len(indices)
    return total / count


def train(
    detector,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig = TrainConfig(),
    history_path=None,
) -> TrainResult:
    """Optimize the currently-trainable parameters (adapters plus anything a
    plan re-enabled) with AdamW; early-stop on validation loss and restore
    the best-epoch weights before returning."""
    if not train_samples or not val_samples:
        raise ConfigurationError("train and val sample sets must be nonempty")
    canvas = detector.canvas_size
    for s in list(train_samples) + list(val_samples):
        if s.image.shape != (canvas, canvas):
            raise ConfigurationError(
                f"sample image {s.image.shape} does not match the detector's "
                f"{canvas}x{canvas} canvas; ingest with that target size"
            )

    torch.manual_seed(cfg.seed)
    trainable = [p for p in detector.parameters() if p.requires_grad]
    if not trainable:
        raise ConfigurationError("no trainable parameters; apply an injection plan first")
    optimizer = torch.optim.AdamW(
        trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    stopper = EarlyStopper(cfg.patience)
    token_cache: dict = {}
    history = []
    best_state = None

    was_training = detector.training
    detector.train()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            rng = np.random.default_rng((cfg.seed, epoch))
            if cfg.augment:
                epoch_samples = [
                    augment(s, seed=int(rng.integers(2**31))) for s in train_samples
                ]
            else:
                epoch_samples = list(train_samples)
            try:
                train_loss = _epoch_pass(
                    detector, epoch_samples, token_cache, cfg, canvas, optimizer, rng
                )
                detector.eval()
                val_loss = _epoch_pass(detector, val_samples, token_cache, cfg, canvas)
            except NumericError as exc:
                raise TrainingDivergedError(f"at epoch {epoch}: {exc}") from exc
            finally:
                detector.train()
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: "
                    f"train={train_loss}, val={val_loss}"
                )
            history.append(
                EpochRecord(epoch, train_loss, val_loss, cfg.learning_rate)
            )
            improved = val_loss < stopper.best_loss
            stop = stopper.update(val_loss, epoch)
            if improved:
                best_state = {
                    k: v.detach().clone() for k, v in detector.state_dict().items()
                }
            if stop:
                break
    finally:
        detector.train(was_training)

    if best_state is not None:
        detector.load_state_dict(best_state)
    if history_path is not None:
        Path(history_path).write_text(
            "".join(r.to_json() + "\n" for r in history), encoding="utf-8"
        )
    return TrainResult(
        history=tuple(history),
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best_loss,
        stopped_epoch=history[-1].epoch,
    )


# --- evaluation -------------------------------------------------------------


def format_pm(mean: float, std) -> str:
    """Mean to two decimals; an integer std renders bare (the style used by
    published capsule rows), a float std renders to two decimals."""
    std_text = str(std) if isinstance(std, int) else f"{std:.2f}"
    return f"{mean:.2f}±{std_text}"


@dataclass(frozen=True)
class MetricSummary:
    dsc_mean: float
    dsc_std: float
    iou_mean: float
    iou_std: float
    count: int

    def rendered(self) -> dict:
        return {
            "dsc": format_pm(self.dsc_mean, self.dsc_std),
            "iou": format_pm(self.iou_mean, self.iou_std),
        }


def summarize(dsc_scores, iou_scores) -> MetricSummary:
    """Percent mean and population standard deviation."""
    d = np.asarray(dsc_scores, dtype=np.float64) * 100.0
    i = np.asarray(iou_scores, dtype=np.float64) * 100.0
    return MetricSummary(
        dsc_mean=float(d.mean()), dsc_std=float(d.std()),
        iou_mean=float(i.mean()), iou_std=float(i.std()),
        count=int(d.size),
    )


def combine_summaries(parts: Sequence[MetricSummary]) -> MetricSummary:
    """Sample-count-weighted pooling via first and second moments."""
    if not parts:
        raise EvaluationError("nothing to combine")
    n = sum(p.count for p in parts)

    def pooled(means, stds):
        mean = sum(p.count * m for p, m in zip(parts, means)) / n
        second = sum(p.count * (s**2 + m**2) for p, m, s in zip(parts, means, stds)) / n
        return mean, math.sqrt(max(second - mean**2, 0.0))

    dsc_mean, dsc_std = pooled([p.dsc_mean for p in parts], [p.dsc_std for p in parts])
    iou_mean, iou_std = pooled([p.iou_mean for p in parts], [p.iou_std for p in parts])
    return MetricSummary(dsc_mean, dsc_std, iou_mean, iou_std, n)


@dataclass(frozen=True)
class BenchmarkResult:
    mean_seconds: float
    times: tuple
    image_hw: tuple

    def to_dict(self) -> dict:
        return {
            "mean_seconds": self.mean_seconds,
            "times": list(self.times),
            "image_hw": list(self.image_hw),
            "runs": len(self.times),
        }


@dataclass(frozen=True)
class EvalReport:
    rows: dict
    samples: tuple
    key_name: str = "dataset"
    spread: Optional[dict] = None
    runtime: Optional[BenchmarkResult] = None

    def render(self) -> str:
        width = max([len(self.key_name)] + [len(k) for k in self.rows]) + 2
        lines = [f"{self.key_name:<{width}}{'n':>6}  {'DSC':>14}  {'IoU':>14}"]
        for key, row in self.rows.items():
            r = row.rendered()
            lines.append(f"{key:<{width}}{row.count:>6}  {r['dsc']:>14}  {r['iou']:>14}")
        if self.spread is not None:
            lines.append(
                f"{'spread':<{width}}{'':>6}  "
                f"{self.spread['dsc']:>14.2f}  {self.spread['iou']:>14.2f}"
            )
        if self.runtime is not None:
            lines.append(
                f"runtime: {self.runtime.mean_seconds:.4f} s/image over "
                f"{len(self.runtime.times)} runs"
            )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        payload = {
            "key": self.key_name,
            "rows": {
                key: {
                    "dsc_mean": row.dsc_mean, "dsc_std": row.dsc_std,
                    "iou_mean": row.iou_mean, "iou_std": row.iou_std,
                    "count": row.count, **row.rendered(),
                }
                for key, row in self.rows.items()
            },
            "table": self.render(),
        }
        if self.spread is not None:
            payload["spread"] = self.spread
        if self.runtime is not None:
            payload["runtime"] = self.runtime.to_dict()
        return payload

    def save(self, path, samples_path=None) -> Path:
        """Write the report JSON plus the per-sample score dump (JSON lines)
        it can be re-aggregated from."""
        path = Path(path)
        if samples_path is None:
            samples_path = path.with_suffix(".samples.jsonl")
        samples_path = Path(samples_path)
        samples_path.write_text(
            "".join(json.dumps(row) + "\n" for row in self.samples), encoding="utf-8"
        )
        payload = self.to_dict()
        payload["samples_file"] = samples_path.name
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path


def _eval_records(manifest: DatasetManifest, split: str):
    if manifest.is_split:
        return [r for r in manifest.samples if r.split == split]
    return list(manifest.samples)


def _score_record(pipeline: SegmentationPipeline, manifest, record, prompt, mode):
    image = load_image_file(manifest.root / record.image)
    gt = load_mask_file(manifest.root / record.mask)
    if not gt.any():
        log.warning("skipping %s: mask is all background", record.mask)
        return None
    result = pipeline.segment(image, prompt, mode=mode)
    return {
        "dataset": manifest.name,
        "image": record.image,
        "prompt": prompt,
        "dsc": dsc_metric(result.mask, gt),
        "iou": iou_metric(result.mask, gt),
        "detected": result.detected,
    }


def evaluate(
    pipeline: SegmentationPipeline,
    manifests,
    split: str = "test",
    mode: str = "best",
) -> EvalReport:
    """Full prompt->box->mask pass over each manifest's `split` records
    (all records when the manifest carries no split labels). A detection
    miss scores its empty mask instead of being dropped."""
    if isinstance(manifests, DatasetManifest):
        manifests = [manifests]
    rows: dict = {}
    dump = []
    for manifest in manifests:
        records = _eval_records(manifest, split)
        scores = []
        for record in records:
            row = _score_record(pipeline, manifest, record, record.prompt, mode)
            if row is not None:
                scores.append(row)
        if not scores:
            raise EvaluationError(
                f"no evaluable {split!r} samples in dataset {manifest.name!r}"
            )
        dump.extend(scores)
        rows[manifest.name] = summarize(
            [s["dsc"] for s in scores], [s["iou"] for s in scores]
        )
    if not rows:
        raise EvaluationError("no datasets to evaluate")
    if len(rows) > 1:
        overall = summarize([s["dsc"] for s in dump], [s["iou"] for s in dump])
        rows["overall"] = overall
    return EvalReport(rows=rows, samples=tuple(dump), key_name="dataset")


def metric_spread(rows: dict) -> dict:
    """Max minus min of the row means, per metric."""
    dsc_means = [r.dsc_mean for r in rows.values()]
    iou_means = [r.iou_mean for r in rows.values()]
    return {
        "dsc": max(dsc_means) - min(dsc_means),
        "iou": max(iou_means) - min(iou_means),
    }


def prompt_sweep(
    pipeline: SegmentationPipeline,
    prompts: Sequence[str],
    manifest: DatasetManifest,
    split: str = "test",
    mode: str = "best",
) -> EvalReport:
    """evaluate() once per prompt over the same records; the report carries
    the max-minus-min spread of the mean metrics across prompts."""
    if len(prompts) < 2:
        raise ConfigurationError("a sweep needs at least two prompts")
    records = _eval_records(manifest, split)
    rows: dict = {}
    dump = []
    for prompt in prompts:
        scores = []
        for record in records:
            row = _score_record(pipeline, manifest, record, prompt, mode)
            if row is not None:
                scores.append(row)
        if not scores:
            raise EvaluationError(
                f"no evaluable {split!r} samples in dataset {manifest.name!r}"
            )
        dump.extend(scores)
        rows[prompt] = summarize([s["dsc"] for s in scores], [s["iou"] for s in scores])
    return EvalReport(
        rows=rows, samples=tuple(dump), key_name="prompt", spread=metric_spread(rows)
    )


def benchmark_runtime(
    pipeline: SegmentationPipeline,
    image_hw=(800, 800),
    runs: int = 10,
    prompt: str = "bright lesion",
    seed: int = 0,
) -> BenchmarkResult:
    """Mean wall-clock seconds per single-image inference; one warm-up run
    is executed first and excluded."""
    if runs < 1:
        raise ConfigurationError("runs must be at least 1")
    rng = np.random.default_rng(seed)
    image = rng.random(image_hw).astype(np.float32)
    pipeline.segment(image, prompt)  # warm-up, excluded
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        pipeline.segment(image, prompt)
        times.append(time.perf_counter() - t0)
    return BenchmarkResult(
        mean_seconds=float(np.mean(times)), times=tuple(times), image_hw=tuple(image_hw)
    )
