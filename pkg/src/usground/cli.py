"""Command-line entry points. Each verb is a thin shell over one module
operation; failures exit 1 with a single machine-parseable JSON line on
stderr, and usage mistakes exit 2 via the argument parser."""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import data as data_mod
from . import train_eval as te
from .detector import (
    ToyDetector,
    ToyDetectorConfig,
    default_injection_plan,
    load_detector,
    load_toy_checkpoint,
)
from .errors import UsgroundError
from .lora import DEFAULT_ALPHA, DEFAULT_RANK, apply_plan, lora_modules, trainable_fraction
from .masker import load_masker
from .pipeline import SegmentationPipeline
from .service import CHECKPOINT_ENV, DEFAULT_PORT, PORT_ENV, create_app


def _cli_guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except UsgroundError as exc:
            click.echo(
                json.dumps({"error": type(exc).__name__, "detail": str(exc)}), err=True
            )
            sys.exit(1)
        except OSError as exc:
            click.echo(json.dumps({"error": "OSError", "detail": str(exc)}), err=True)
            sys.exit(1)

    return wrapper


def _build_pipeline(detector_name, masker_name, checkpoint, threshold):
    detector = load_detector(detector_name, checkpoint=checkpoint)
    masker = load_masker(masker_name)
    checkpoint_id = Path(checkpoint).name if checkpoint else None
    return SegmentationPipeline(
        detector, masker, threshold=threshold, checkpoint_id=checkpoint_id
    )


def resolve_port(flag_value) -> int:
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(PORT_ENV)
    return int(env) if env else DEFAULT_PORT


@click.group()
def main():
    """Prompt-driven lesion detection and segmentation toolkit."""


@main.command("ingest")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--target", default=128, show_default=True, help="Working canvas size.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write a split-labeled copy of the manifest here.")
@click.option("--seed", default=0, show_default=True)
@click.option("--override-split", is_flag=True, help="Re-split an already-split manifest.")
@_cli_guard
def ingest_cmd(manifest_path, target, out_path, seed, override_split):
    """Validate a dataset: decode every record, report skip counts."""
    manifest = data_mod.load_manifest(manifest_path)
    if out_path is not None:
        manifest = data_mod.split(manifest, seed=seed, override=override_split)
        data_mod.save_manifest(manifest, out_path)
    _, stats = data_mod.ingest_all(manifest, target_size=(target, target))
    payload = {
        "dataset": manifest.name,
        "total": stats.total,
        "ingested": stats.yielded,
        "skipped_empty": stats.skipped_empty,
    }
    if out_path is not None:
        payload["split"] = manifest.counts()
        payload["out"] = str(out_path)
    click.echo(json.dumps(payload))


@main.command("gen-synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", default=100, show_default=True)
@click.option("--variant", default="A", show_default=True, type=click.Choice(["A", "B"]))
@click.option("--name", default="synth", show_default=True)
@click.option("--canvas", default=128, show_default=True)
@click.option("--role", default="seen", show_default=True, type=click.Choice(["seen", "unseen"]))
@click.option("--seed", default=0, show_default=True)
@_cli_guard
def gen_synth_cmd(out_dir, count, variant, name, canvas, role, seed):
    """Write a reproducible synthetic speckle dataset."""
    config = data_mod.SynthConfig(
        count=count, canvas=(canvas, canvas), variant=variant, name=name, role=role
    )
    manifest = data_mod.generate_synthetic(config, out_dir, seed=seed)
    click.echo(
        json.dumps(
            {"manifest": str(Path(out_dir) / "manifest.json"),
             "records": len(manifest.samples)}
        )
    )


def _ingest_split(manifest_paths, canvas, seed):
    train_samples, val_samples = [], []
    for path in manifest_paths:
        manifest = data_mod.load_manifest(path)
        if not manifest.is_split:
            manifest = data_mod.split(manifest, seed=seed)
        got_train, _ = data_mod.ingest_all(
            manifest, target_size=(canvas, canvas), splits={"train"}
        )
        got_val, _ = data_mod.ingest_all(
            manifest, target_size=(canvas, canvas), splits={"val"}
        )
        train_samples.extend(got_train)
        val_samples.extend(got_val)
    return train_samples, val_samples


@main.command("train")
@click.option("--manifest", "manifest_paths", required=True, multiple=True,
              type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--rank", default=DEFAULT_RANK, show_default=True)
@click.option("--alpha", default=DEFAULT_ALPHA, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=200, show_default=True, help="Maximum epochs.")
@click.option("--patience", default=20, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=5e-4, show_default=True)
@click.option("--weight-decay", default=1e-4, show_default=True)
@click.option("--no-augment", is_flag=True)
@click.option("--history", "history_path", type=click.Path(), default=None)
@click.option("--init-from", "init_path", type=click.Path(), default=None,
              help="Fine-tune from an existing checkpoint instead of a fresh "
                   "model; its stored adapter rank/alpha win over the flags.")
@_cli_guard
def train_cmd(manifest_paths, out_path, rank, alpha, seed, epochs, patience,
              batch_size, lr, weight_decay, no_augment, history_path, init_path):
    """Fine-tune the adapters (and box head) on the given datasets."""
    if init_path is not None:
        detector = load_toy_checkpoint(init_path)
        if not lora_modules(detector):
            apply_plan(detector, default_injection_plan(detector), rank=rank,
                       alpha=alpha, seed=seed)
    else:
        detector = ToyDetector(ToyDetectorConfig(), seed=seed)
        apply_plan(detector, default_injection_plan(detector), rank=rank,
                   alpha=alpha, seed=seed)
    train_samples, val_samples = _ingest_split(
        manifest_paths, detector.canvas_size, seed
    )
    cfg = te.TrainConfig(
        batch_size=batch_size, learning_rate=lr, weight_decay=weight_decay,
        patience=patience, max_epochs=epochs, seed=seed, augment=not no_augment,
    )
    if history_path is None:
        history_path = str(Path(out_path).with_suffix(".history.jsonl"))
    result = te.train(detector, train_samples, val_samples, cfg, history_path)
    detector.save(out_path)
    click.echo(
        json.dumps(
            {
                "checkpoint": str(out_path),
                "history": str(history_path),
                "epochs_run": result.stopped_epoch,
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "trainable_fraction": trainable_fraction(detector),
            }
        )
    )


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--manifest", "manifest_paths", required=True, multiple=True,
              type=click.Path())
@click.option("--detector", "detector_name", default="toy", show_default=True)
@click.option("--masker", "masker_name", default="toy", show_default=True)
@click.option("--threshold", default=0.3, show_default=True)
@click.option("--mode", default="best", show_default=True,
              type=click.Choice(["best", "all"]))
@click.option("--split", "split_name", default="test", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@_cli_guard
def eval_cmd(checkpoint, manifest_paths, detector_name, masker_name, threshold,
             mode, split_name, out_path):
    """Score the full prompt->box->mask path on a test split."""
    pipeline = _build_pipeline(detector_name, masker_name, checkpoint, threshold)
    manifests = [data_mod.load_manifest(p) for p in manifest_paths]
    report = te.evaluate(pipeline, manifests, split=split_name, mode=mode)
    click.echo(report.render())
    if out_path is not None:
        report.save(out_path)
        click.echo(json.dumps({"report": str(out_path)}))


@main.command("sweep-prompts")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--prompt", "prompts", required=True, multiple=True)
@click.option("--detector", "detector_name", default="toy", show_default=True)
@click.option("--masker", "masker_name", default="toy", show_default=True)
@click.option("--threshold", default=0.3, show_default=True)
@click.option("--split", "split_name", default="test", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@_cli_guard
def sweep_cmd(checkpoint, manifest_path, prompts, detector_name, masker_name,
              threshold, split_name, out_path):
    """Evaluate the same samples under each prompt and report the spread."""
    pipeline = _build_pipeline(detector_name, masker_name, checkpoint, threshold)
    manifest = data_mod.load_manifest(manifest_path)
    report = te.prompt_sweep(pipeline, list(prompts), manifest, split=split_name)
    click.echo(report.render())
    if out_path is not None:
        report.save(out_path)
        click.echo(json.dumps({"report": str(out_path)}))


@main.command("segment")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--prompt", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--detector", "detector_name", default="toy", show_default=True)
@click.option("--masker", "masker_name", default="toy", show_default=True)
@click.option("--threshold", default=0.3, show_default=True)
@click.option("--mode", default="best", show_default=True,
              type=click.Choice(["best", "all"]))
@click.option("--boxes-out", type=click.Path(), default=None)
@_cli_guard
def segment_cmd(image_path, prompt, out_path, checkpoint, detector_name,
                masker_name, threshold, mode, boxes_out):
    """Segment one image from a text prompt; writes the mask as a PNG."""
    pipeline = _build_pipeline(detector_name, masker_name, checkpoint, threshold)
    image = data_mod.load_image_file(Path(image_path))
    result = pipeline.segment(image, prompt, mode=mode)
    Image.fromarray(result.mask.data.astype(np.uint8) * 255).save(out_path)
    boxes = [
        {"x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max,
         "score": b.score, "phrase": b.phrase}
        for b in result.boxes
    ]
    if boxes_out is not None:
        Path(boxes_out).write_text(json.dumps(boxes, indent=2) + "\n")
    click.echo(
        json.dumps(
            {"mask": str(out_path), "detected": result.detected,
             "boxes": len(boxes), "best_rejected": result.best_rejected}
        )
    )


@main.command("bench")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--detector", "detector_name", default="toy", show_default=True)
@click.option("--masker", "masker_name", default="toy", show_default=True)
@click.option("--runs", default=10, show_default=True)
@click.option("--size", default=800, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_cli_guard
def bench_cmd(checkpoint, detector_name, masker_name, runs, size, seed):
    """Mean single-image wall-clock over `runs` inferences (after warm-up)."""
    pipeline = _build_pipeline(detector_name, masker_name, checkpoint, 0.3)
    result = te.benchmark_runtime(pipeline, image_hw=(size, size), runs=runs, seed=seed)
    click.echo(json.dumps(result.to_dict()))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=None,
              help=f"Defaults to ${PORT_ENV} or {DEFAULT_PORT}.")
@click.option("--checkpoint", type=click.Path(), default=None,
              help=f"Defaults to ${CHECKPOINT_ENV} when set.")
@click.option("--detector", "detector_name", default="toy", show_default=True)
@click.option("--masker", "masker_name", default="toy", show_default=True)
@click.option("--threshold", default=0.3, show_default=True)
@_cli_guard
def serve_cmd(host, port, checkpoint, detector_name, masker_name, threshold):
    """Run the HTTP service."""
    import uvicorn

    if checkpoint is None:
        checkpoint = os.environ.get(CHECKPOINT_ENV) or None
    pipeline = _build_pipeline(detector_name, masker_name, checkpoint, threshold)
    app = create_app(pipeline)
    uvicorn.run(app, host=host, port=resolve_port(port))
