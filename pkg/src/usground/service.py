"""HTTP surface: segmentation over multipart POST plus a health probe.

The loaded pipeline is immutable; swapping in a new checkpoint takes an
exclusive gate that waits for in-flight requests to drain, so every request
sees exactly one pipeline. All error bodies are structured JSON with
"error" and "detail" fields, never a traceback.
"""

from __future__ import annotations

import base64
import io
import threading
from contextlib import contextmanager
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image

from .errors import UsgroundError
from .pipeline import SegmentationPipeline

DEFAULT_PORT = 8750
PORT_ENV = "USGROUND_PORT"
CHECKPOINT_ENV = "USGROUND_CHECKPOINT"


class PipelineGate:
    """Many concurrent readers, one exclusive writer that drains them."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers > 0:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


class ServiceState:
    def __init__(self, pipeline: Optional[SegmentationPipeline] = None):
        self.gate = PipelineGate()
        self._pipeline = pipeline

    @property
    def pipeline(self) -> Optional[SegmentationPipeline]:
        return self._pipeline

    def swap(self, pipeline: Optional[SegmentationPipeline]) -> None:
        """Install a new pipeline after all in-flight requests finish."""
        with self.gate.write():
            self._pipeline = pipeline


def _error(status: int, error: str, detail: str, **extra) -> JSONResponse:
    return JSONResponse({"error": error, "detail": detail, **extra}, status_code=status)


def _decode_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def _encode_mask(mask) -> str:
    img = Image.fromarray(mask.data.astype(np.uint8) * 255)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(pipeline: Optional[SegmentationPipeline] = None) -> FastAPI:
    app = FastAPI(title="usground", docs_url=None, redoc_url=None)
    state = ServiceState(pipeline)
    app.state.service = state

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception):
        return _error(500, type(exc).__name__, str(exc))

    @app.get("/api/health")
    def health():
        current = state.pipeline
        backends = []
        if current is not None:
            info = current.describe()
            backends = [info["detector"], info["masker"]]
        return {"status": "ok", "backends": backends}

    @app.post("/api/segment")
    def segment(
        image: UploadFile = File(...),
        prompt: str = Form(""),
        threshold: Optional[str] = Form(None),
        mode: str = Form("best"),
    ):
        if not prompt or not prompt.strip():
            return _error(400, "bad_request", "prompt must be nonempty")
        if mode not in ("best", "all"):
            return _error(400, "bad_request", f"mode must be 'best' or 'all', got {mode!r}")
        threshold_value = None
        if threshold is not None and threshold != "":
            try:
                threshold_value = float(threshold)
            except ValueError:
                return _error(400, "bad_request", f"threshold {threshold!r} is not a number")
        try:
            array = _decode_image(image.file.read())
        except Exception:
            return _error(400, "bad_request", "image could not be decoded")

        with state.gate.read():
            current = state.pipeline
            if current is None:
                return _error(503, "unavailable", "no pipeline loaded")
            try:
                result = current.segment(
                    array, prompt, threshold=threshold_value, mode=mode
                )
            except UsgroundError as exc:
                return _error(400, type(exc).__name__, str(exc))
            model_info = current.describe()

        if not result.detected:
            best = result.best_rejected
            return _error(
                422,
                "no_detection",
                f"no box scored above the threshold; best score "
                f"{'none' if best is None else format(best, '.4f')}",
                best_score=best,
            )
        return {
            "boxes": [
                {
                    "x_min": b.x_min, "y_min": b.y_min,
                    "x_max": b.x_max, "y_max": b.y_max,
                    "score": b.score, "phrase": b.phrase,
                }
                for b in result.boxes
            ],
            "mask": _encode_mask(result.mask),
            "timing_ms": result.timing_ms,
            "model_info": model_info,
        }

    return app
