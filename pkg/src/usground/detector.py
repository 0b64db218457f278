"""Text-conditioned detector: a desk-scale transformer that proposes boxes for
a tokenized prompt, plus the backend registry that lets the pipeline swap in
external implementations.

Dataflow: patch-embed the image, encode the prompt, fuse the two streams in
cross-attending enhancer layers, then decode a fixed set of queries against
both streams. Each query yields a normalized cxcywh box (sigmoid-squashed, so
width/height are strictly positive) and one logit per prompt token; a query's
score is the sigmoid of its best token logit.

All attention/projection submodules are plain nn.Linear layers with stable
qualified names; the adapter injection plan addresses them by those names.
The box head trains in full under that plan, everything outside the plan's
sites stays frozen.
"""

from __future__ import annotations

import importlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    BackendError,
    CapacityError,
    ConfigurationError,
    DimensionError,
    NumericError,
)
from .geometry import BoundingBox
from .lora import InjectionPlan, apply_plan, lora_modules
from .text import DEFAULT_WORDS, PromptTokens, Vocabulary, tokenize

DEFAULT_THRESHOLD = 0.30
DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class ToyDetectorConfig:
    canvas_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    # Width of the raw per-patch embedding before projection to embed_dim;
    # the frozen image stem carries most of the model's parameter mass, the
    # way a full-scale detector's backbone would.
    patch_dim: int = 384
    num_heads: int = 4
    ffn_dim: int = 128
    decoder_ffn_dim: int = 512
    num_enhancer_layers: int = 2
    num_decoder_layers: int = 2
    num_queries: int = 10
    sample_points: int = 4
    box_head_hidden: int = 32
    max_text_len: int = 16
    score_bias_init: float = -4.0
    words: tuple = field(default=DEFAULT_WORDS)

    def __post_init__(self):
        dims = (
            self.canvas_size, self.patch_size, self.embed_dim, self.patch_dim,
            self.num_heads, self.ffn_dim, self.decoder_ffn_dim,
            self.num_enhancer_layers, self.num_decoder_layers,
            self.num_queries, self.sample_points, self.box_head_hidden,
            self.max_text_len,
        )
        if any(d <= 0 for d in dims):
            raise ConfigurationError("all detector dimensions must be positive")
        if self.canvas_size % self.patch_size != 0:
            raise ConfigurationError("canvas size must be a multiple of patch size")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError("embed dim must divide evenly across heads")

    @property
    def grid_size(self) -> int:
        return self.canvas_size // self.patch_size


def micro_config() -> ToyDetectorConfig:
    """Tiny double-precision-friendly variant for finite-difference checks."""
    return ToyDetectorConfig(
        canvas_size=32, patch_size=16, embed_dim=16, patch_dim=32, num_heads=2,
        ffn_dim=32, decoder_ffn_dim=64, num_enhancer_layers=1,
        num_decoder_layers=1, num_queries=3, sample_points=2, box_head_hidden=16,
    )


@dataclass(frozen=True)
class DetectionOutput:
    """N candidate boxes (normalized cxcywh) with per-prompt-token logits."""

    boxes: torch.Tensor
    logits: torch.Tensor
    prompt: Optional[PromptTokens] = None
    canvas_hw: Optional[tuple] = None

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.logits.shape[-1]

    def validate(self) -> "DetectionOutput":
        if self.boxes.ndim != 2 or self.boxes.shape[-1] != 4:
            raise DimensionError(f"boxes shaped {tuple(self.boxes.shape)}, want (N,4)")
        if self.logits.ndim != 2 or self.logits.shape[0] != self.boxes.shape[0]:
            raise DimensionError("logits must be (N,T) matching boxes")
        if not bool(torch.isfinite(self.boxes).all() and torch.isfinite(self.logits).all()):
            raise NumericError("detection output contains non-finite values")
        return self

    def scores(self) -> torch.Tensor:
        """Per-query score: sigmoid of the best token logit."""
        return torch.sigmoid(self.logits.max(dim=-1).values)


class MultiheadAttention(nn.Module):
    """Standard scaled dot-product attention with separately named q/k/v/out
    projections so an injection plan can target them individually."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        b, nq, d = query.shape
        nk = key.shape[1]
        q = self.q_proj(query).view(b, nq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TextEncoder(nn.Module):
    """Embedding table plus one pre-norm self-attention block."""

    def __init__(self, cfg: ToyDetectorConfig, vocab_size: int):
        super().__init__()
        self.max_len = cfg.max_text_len
        self.embed = nn.Embedding(vocab_size, cfg.embed_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.embed_dim))
        nn.init.normal_(self.pos, std=0.02)
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        t = token_ids.shape[1]
        if t > self.max_len:
            raise CapacityError(f"prompt of {t} tokens exceeds the {self.max_len}-token limit")
        h = self.embed(token_ids) + self.pos[:t]
        n = self.norm1(h)
        h = h + self.self_attn(n, n, n)
        return h + self.ffn(self.norm2(h))


class EnhancerLayer(nn.Module):
    """Fuses the image and text streams: image self-attention, bidirectional
    cross-attention, then a feed-forward per stream."""

    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        d, h = cfg.embed_dim, cfg.num_heads
        self.norm_self = nn.LayerNorm(d)
        self.img_self_attn = MultiheadAttention(d, h)
        self.norm_i2t_q = nn.LayerNorm(d)
        self.norm_i2t_kv = nn.LayerNorm(d)
        self.img_to_text_attn = MultiheadAttention(d, h)
        self.norm_t2i_q = nn.LayerNorm(d)
        self.norm_t2i_kv = nn.LayerNorm(d)
        self.text_to_img_attn = MultiheadAttention(d, h)
        self.norm_img_ffn = nn.LayerNorm(d)
        self.img_ffn = FeedForward(d, cfg.ffn_dim)
        self.norm_text_ffn = nn.LayerNorm(d)
        self.text_ffn = FeedForward(d, cfg.ffn_dim)

    def forward(self, img, txt):
        n = self.norm_self(img)
        img = img + self.img_self_attn(n, n, n)
        img_n, txt_n = self.norm_i2t_kv(img), self.norm_t2i_kv(txt)
        img = img + self.img_to_text_attn(self.norm_i2t_q(img), txt_n, txt_n)
        txt = txt + self.text_to_img_attn(self.norm_t2i_q(txt), img_n, img_n)
        img = img + self.img_ffn(self.norm_img_ffn(img))
        txt = txt + self.text_ffn(self.norm_text_ffn(txt))
        return img, txt


class DeformableAttention(nn.Module):
    """Query-conditioned sparse sampling of the image feature grid: each query
    predicts per-head sampling offsets around its reference point and softmax
    weights over the sampled values."""

    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        d, h, k = cfg.embed_dim, cfg.num_heads, cfg.sample_points
        self.heads, self.points = h, k
        self.head_dim = d // h
        self.sampling_offsets = nn.Linear(d, h * k * 2)
        self.attention_weights = nn.Linear(d, h * k)
        self.value_proj = nn.Linear(d, d)
        self.output_proj = nn.Linear(d, d)
        self._init_offsets()

    def _init_offsets(self):
        # Small weights plus a ring of directional biases so initial samples
        # spread around the reference point instead of collapsing onto it.
        nn.init.normal_(self.sampling_offsets.weight, std=0.01)
        angles = torch.arange(self.heads) * (2 * math.pi / self.heads)
        directions = torch.stack([angles.cos(), angles.sin()], dim=-1)  # (H, 2)
        radii = torch.arange(1, self.points + 1).float()  # (K,)
        bias = directions[:, None, :] * radii[None, :, None]  # (H, K, 2)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(bias.reshape(-1))

    def forward(self, queries, img, refs, grid_size: int):
        b, n, d = queries.shape
        h, k, dh = self.heads, self.points, self.head_dim
        value = self.value_proj(img)  # (B, P, d)
        value = (
            value.view(b, grid_size, grid_size, h, dh)
            .permute(0, 3, 4, 1, 2)
            .reshape(b * h, dh, grid_size, grid_size)
        )
        # Offsets are in grid-cell units relative to each query's reference.
        offsets = self.sampling_offsets(queries).view(b, n, h, k, 2)
        locs = refs.view(1, n, 1, 1, 2) + offsets / grid_size  # normalized (x, y)
        weights = torch.softmax(self.attention_weights(queries).view(b, n, h, k), dim=-1)
        grid = (locs * 2 - 1).permute(0, 2, 1, 3, 4).reshape(b * h, n, k, 2)
        sampled = F.grid_sample(
            value, grid.to(value.dtype), mode="bilinear",
            padding_mode="border", align_corners=False,
        )  # (B*H, dh, N, K)
        w = weights.permute(0, 2, 1, 3).reshape(b * h, 1, n, k)
        fused = (sampled * w).sum(-1)  # (B*H, dh, N)
        fused = fused.view(b, h, dh, n).permute(0, 3, 1, 2).reshape(b, n, d)
        return self.output_proj(fused)


class DecoderLayer(nn.Module):
    """Query self-attention, cross-modal attention over the prompt tokens,
    deformable attention over the image grid, and a feed-forward."""

    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        d, h = cfg.embed_dim, cfg.num_heads
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiheadAttention(d, h)
        self.norm_text_q = nn.LayerNorm(d)
        self.norm_text_kv = nn.LayerNorm(d)
        self.text_cross_attn = MultiheadAttention(d, h)
        self.norm_img_q = nn.LayerNorm(d)
        self.norm_img_kv = nn.LayerNorm(d)
        self.img_cross_attn = DeformableAttention(cfg)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.decoder_ffn_dim)

    def forward(self, q, img, txt, refs, grid_size):
        n = self.norm_self(q)
        q = q + self.self_attn(n, n, n)
        txt_n = self.norm_text_kv(txt)
        q = q + self.text_cross_attn(self.norm_text_q(q), txt_n, txt_n)
        q = q + self.img_cross_attn(self.norm_img_q(q), self.norm_img_kv(img), refs, grid_size)
        return q + self.ffn(self.norm_ffn(q))


class BoxHead(nn.Module):
    """Three-layer perceptron from query state to raw cxcywh (pre-sigmoid)."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 4)

    def forward(self, x):
        return self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(x)))))


class ToyDetector(nn.Module):
    name = "toy"

    def __init__(self, config: ToyDetectorConfig = ToyDetectorConfig(), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        self.vocab = Vocabulary(config.words)
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(1, config.patch_dim, config.patch_size, config.patch_size)
        self.input_proj = nn.Linear(config.patch_dim, d)
        self.img_pos = nn.Parameter(torch.zeros(config.grid_size ** 2, d))
        nn.init.normal_(self.img_pos, std=0.02)
        self.text_encoder = TextEncoder(config, len(self.vocab))
        self.enhancer = nn.ModuleList(
            EnhancerLayer(config) for _ in range(config.num_enhancer_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.num_decoder_layers)
        )
        self.query_embed = nn.Parameter(torch.zeros(config.num_queries, d))
        nn.init.normal_(self.query_embed, std=0.02)
        # Fixed per-query reference points on a jittered lattice (pre-sigmoid).
        self.ref_points = nn.Parameter(torch.randn(config.num_queries, 2) * 0.5)
        self.bridge = nn.Linear(d, d)
        self.logit_bias = nn.Parameter(torch.tensor(float(config.score_bias_init)))
        self.box_head = BoxHead(d, config.box_head_hidden)

    @property
    def canvas_size(self) -> int:
        return self.config.canvas_size

    def forward(self, images: torch.Tensor, token_ids: torch.Tensor):
        """images (B,1,H,W), token_ids (B,T) -> boxes (B,N,4), logits (B,N,T)."""
        b = images.shape[0]
        grid = self.config.grid_size
        x = self.patch_embed(images)  # (B, C, G, G)
        x = x.flatten(2).transpose(1, 2)  # (B, P, C)
        img = self.input_proj(x) + self.img_pos
        txt = self.text_encoder(token_ids)
        for layer in self.enhancer:
            img, txt = layer(img, txt)
        q = self.query_embed.unsqueeze(0).expand(b, -1, -1)
        refs = torch.sigmoid(self.ref_points)
        for layer in self.decoder:
            q = layer(q, img, txt, refs, grid)
        scale = math.sqrt(self.config.embed_dim)
        logits = q @ self.bridge(txt).transpose(1, 2) / scale + self.logit_bias
        boxes = torch.sigmoid(self.box_head(q))
        return boxes, logits

    def tokenize(self, text: str) -> PromptTokens:
        return tokenize(text, self.vocab)

    def _prepare_image(self, image) -> torch.Tensor:
        arr = np.asarray(image)
        if arr.ndim != 2:
            raise DimensionError(f"expected a single-channel (H,W) image, got shape {arr.shape}")
        if arr.shape != (self.canvas_size, self.canvas_size):
            raise DimensionError(
                f"image {arr.shape} does not match the {self.canvas_size}x"
                f"{self.canvas_size} canvas"
            )
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(arr, dtype=dtype)

    def detect(self, image, prompt) -> DetectionOutput:
        """Run inference on one canvas-sized image; deterministic for fixed
        weights. `prompt` is raw text or pre-tokenized PromptTokens."""
        tokens = prompt if isinstance(prompt, PromptTokens) else self.tokenize(prompt)
        img = self._prepare_image(image)
        ids = torch.tensor([tokens.ids], dtype=torch.long)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                boxes, logits = self.forward(img[None, None], ids)
        finally:
            self.train(was_training)
        return DetectionOutput(
            boxes=boxes[0].detach(), logits=logits[0].detach(), prompt=tokens,
            canvas_hw=(self.canvas_size, self.canvas_size),
        ).validate()

    def save(self, path) -> None:
        """Self-describing checkpoint: config, vocabulary, parameters, and the
        adapter layout if one is installed."""
        adapted = lora_modules(self)
        lora_meta = None
        if adapted:
            first = adapted[0][1]
            lora_meta = {
                "targets": sorted(name for name, _ in adapted),
                "rank": first.rank,
                "alpha": first.alpha,
            }
        torch.save(
            {
                "format": "usground-toy-v1",
                "config": asdict(self.config),
                "words": list(self.vocab.words),
                "state": self.state_dict(),
                "lora": lora_meta,
            },
            path,
        )


def load_toy_checkpoint(path) -> ToyDetector:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise BackendError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "usground-toy-v1":
        raise BackendError(f"{path} is not a detector checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["words"] = tuple(payload["words"])
    model = ToyDetector(ToyDetectorConfig(**cfg_dict))
    lora_meta = payload.get("lora")
    if lora_meta:
        plan = InjectionPlan(
            adapter_targets=frozenset(lora_meta["targets"]),
            fully_trainable=frozenset({"box_head"}),
        )
        apply_plan(model, plan, rank=lora_meta["rank"], alpha=lora_meta["alpha"])
    model.load_state_dict(payload["state"])
    return model


def default_injection_plan(model: ToyDetector) -> InjectionPlan:
    """The adapter layout used for fine-tuning: enhancer cross-attention and
    feed-forwards, every decoder layer's sampling offsets / attention weights /
    value and output projections plus its cross-modal text attention, the text
    encoder's self-attention output projection and feed-forward, and the
    vision-text bridge. The box head trains in full; all else stays frozen."""
    targets = {
        "bridge",
        "text_encoder.self_attn.out_proj",
        "text_encoder.ffn.fc1",
        "text_encoder.ffn.fc2",
    }
    for i in range(len(model.enhancer)):
        for attn in ("img_to_text_attn", "text_to_img_attn"):
            for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
                targets.add(f"enhancer.{i}.{attn}.{proj}")
        for ffn in ("img_ffn", "text_ffn"):
            targets.add(f"enhancer.{i}.{ffn}.fc1")
            targets.add(f"enhancer.{i}.{ffn}.fc2")
    for i in range(len(model.decoder)):
        for leaf in ("sampling_offsets", "attention_weights", "value_proj", "output_proj"):
            targets.add(f"decoder.{i}.img_cross_attn.{leaf}")
        for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
            targets.add(f"decoder.{i}.text_cross_attn.{proj}")
    return InjectionPlan(
        adapter_targets=frozenset(targets),
        fully_trainable=frozenset({"box_head"}),
    )


def select_boxes(
    out: DetectionOutput,
    threshold: float = DEFAULT_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
    canvas_hw: Optional[tuple] = None,
) -> list:
    """Score each query by its best token, keep scores >= threshold, sort
    descending (ties toward lower query index), truncate to top_k, and convert
    normalized cxcywh to pixel xyxy on the output canvas."""
    if not 0.0 < threshold <= 1.0:
        raise ConfigurationError(f"threshold {threshold} outside (0, 1]")
    if top_k < 0:
        raise ConfigurationError("top_k must be non-negative")
    hw = canvas_hw or out.canvas_hw
    if hw is None:
        raise ConfigurationError("no canvas size available to place boxes on")
    height, width = hw
    scores = out.scores()
    order = sorted(range(out.num_queries), key=lambda q: (-float(scores[q]), q))
    phrase = out.prompt.text if out.prompt is not None else None
    kept = []
    for q in order:
        score = float(scores[q])
        if score < threshold:
            break
        cx, cy, w, h = (float(v) for v in out.boxes[q])
        kept.append(
            BoundingBox(
                x_min=(cx - w / 2) * width,
                y_min=(cy - h / 2) * height,
                x_max=(cx + w / 2) * width,
                y_max=(cy + h / 2) * height,
                score=score,
                phrase=phrase,
            )
        )
        if len(kept) == top_k:
            break
    return kept


class MockDetector:
    """Fixed-response backend for pipeline wiring and overhead benchmarks:
    one centered box covering half the canvas, score ~0.9."""

    name = "mock"
    canvas_size = None  # accepts any image size

    def __init__(self, boxes: Optional[Sequence[tuple]] = None, score: float = 0.9):
        self._vocab = Vocabulary()
        self._boxes = [tuple(b) for b in boxes] if boxes else [(0.5, 0.5, 0.5, 0.5)]
        self._logit = math.log(score / (1 - score))

    def tokenize(self, textdata: str) -> PromptTokens:
        return tokenize(textdata, self._vocab)

    def detect(self, image, prompt) -> DetectionOutput:
        tokens = prompt if isinstance(prompt, PromptTokens) else self.tokenize(prompt)
        arr = np.asarray(image)
        if arr.ndim != 2:
            raise DimensionError("mock detector expects a single-channel image")
        boxes = torch.tensor(self._boxes, dtype=torch.float32)
        logits = torch.full((len(self._boxes), len(tokens.ids)), self._logit)
        return DetectionOutput(
            boxes=boxes, logits=logits, prompt=tokens, canvas_hw=arr.shape
        ).validate()


def _load_toy(checkpoint=None, seed: int = 0, config: Optional[ToyDetectorConfig] = None):
    if checkpoint is not None:
        return load_toy_checkpoint(checkpoint)
    return ToyDetector(config or ToyDetectorConfig(), seed=seed)


def _load_mock(checkpoint=None, **kwargs):
    return MockDetector(**kwargs)


DETECTOR_BACKENDS = {"toy": _load_toy, "mock": _load_mock}


def load_detector(descriptor: str, checkpoint=None, **kwargs):
    """Resolve a detector backend: a registry name ("toy", "mock") or a
    "module:attribute" path to a factory callable."""
    if descriptor in DETECTOR_BACKENDS:
        return DETECTOR_BACKENDS[descriptor](checkpoint=checkpoint, **kwargs)
    if ":" in descriptor:
        module_name, attr = descriptor.split(":", 1)
        try:
            factory = getattr(importlib.import_module(module_name), attr)
            return factory(checkpoint=checkpoint, **kwargs)
        except (ImportError, AttributeError, TypeError) as exc:
            raise BackendError(f"cannot load detector backend {descriptor!r}: {exc}") from exc
    raise BackendError(
        f"unknown detector backend {descriptor!r}; available: "
        f"{sorted(DETECTOR_BACKENDS)} or a module:attribute factory path"
    )
