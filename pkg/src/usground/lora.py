"""Low-rank adaptation: wrapping linear layers with trainable rank-r deltas,
applying an injection plan to a model, merging deltas back, and accounting
for what fraction of the model trains.

Convention: adapted forward(x) = base(x) + (alpha/r) * B(A(x)) with A drawn
from N(0, 0.02^2) and B zeroed, so a freshly injected model computes exactly
what the base model did. Biases of adapted linears stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import AdapterStateError, ConfigurationError, PlanError

DEFAULT_RANK = 4
DEFAULT_ALPHA = 8.0
INIT_STD = 0.02

CATEGORY_FROZEN = "frozen"
CATEGORY_ADAPTER = "adapter"
CATEGORY_TRAINABLE = "trainable"


@dataclass(frozen=True)
class AuditEntry:
    name: str
    category: str
    params: int


@dataclass(frozen=True)
class InjectionPlan:
    """Which submodules get adapters and which train in full; every other
    parameter is frozen. Names are qualified module paths."""

    adapter_targets: frozenset
    fully_trainable: frozenset

    def __post_init__(self):
        object.__setattr__(self, "adapter_targets", frozenset(self.adapter_targets))
        object.__setattr__(self, "fully_trainable", frozenset(self.fully_trainable))
        overlap = self.adapter_targets & self.fully_trainable
        if overlap:
            raise PlanError(f"targets listed in both categories: {sorted(overlap)}")


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank delta."""

    def __init__(self, base: nn.Linear, rank: int = DEFAULT_RANK,
                 alpha: float = DEFAULT_ALPHA, generator: torch.Generator | None = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ConfigurationError(
                f"rank {rank} outside [1, {min(d_in, d_out)}] for a {d_out}x{d_in} linear"
            )
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        a_init = torch.empty(rank, d_in, dtype=base.weight.dtype)
        a_init.normal_(mean=0.0, std=INIT_STD, generator=generator)
        self.lora_A = nn.Parameter(a_init)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        down = torch.nn.functional.linear(x, self.lora_A)
        up = torch.nn.functional.linear(down, self.lora_B)
        return self.base(x) + self.scale * up

    def delta(self) -> torch.Tensor:
        """(alpha/r) * B @ A, the effective weight update."""
        return self.scale * (self.lora_B @ self.lora_A)

    def merged_linear(self) -> nn.Linear:
        """A plain linear whose weight folds the delta in; parameters frozen."""
        d_out, d_in = self.base.weight.shape
        merged = nn.Linear(d_in, d_out, bias=self.base.bias is not None)
        with torch.no_grad():
            merged.weight.copy_(self.base.weight + self.delta())
            if self.base.bias is not None:
                merged.bias.copy_(self.base.bias)
        merged.weight.requires_grad_(False)
        if merged.bias is not None:
            merged.bias.requires_grad_(False)
        return merged


def wrap(base_weights: torch.Tensor, rank: int, alpha: float, seed: int = 0,
         bias: torch.Tensor | None = None) -> LoraLinear:
    """Build an adapted linear from a raw d_out x d_in weight matrix."""
    d_out, d_in = base_weights.shape
    base = nn.Linear(d_in, d_out, bias=bias is not None)
    with torch.no_grad():
        base.weight.copy_(base_weights)
        if bias is not None:
            base.bias.copy_(bias)
    gen = torch.Generator().manual_seed(seed)
    return LoraLinear(base, rank=rank, alpha=alpha, generator=gen)


def _parent_and_leaf(model: nn.Module, name: str):
    if "." in name:
        parent_path, leaf = name.rsplit(".", 1)
        return model.get_submodule(parent_path), leaf
    return model, name


def apply_plan(model: nn.Module, plan: InjectionPlan, rank: int = DEFAULT_RANK,
               alpha: float = DEFAULT_ALPHA, seed: int = 0) -> list[AuditEntry]:
    """Install adapters at every plan target and set trainability flags.

    Freezes the whole model, swaps each adapter target (which must be a plain
    linear) for a LoraLinear, then re-enables gradients on the fully-trainable
    names. Mutates the model; returns the per-parameter audit.
    """
    missing = []
    resolved = {}
    for name in sorted(plan.adapter_targets):
        try:
            module = model.get_submodule(name)
        except AttributeError:
            missing.append(name)
            continue
        if not isinstance(module, nn.Linear):
            missing.append(name)
            continue
        resolved[name] = module
    for name in sorted(plan.fully_trainable):
        try:
            model.get_submodule(name)
        except AttributeError:
            try:
                model.get_parameter(name)
            except AttributeError:
                missing.append(name)
    if missing:
        raise PlanError(f"plan names not resolvable to linear transforms: {missing}")

    model.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for name in sorted(resolved):
        parent, leaf = _parent_and_leaf(model, name)
        setattr(parent, leaf, LoraLinear(resolved[name], rank=rank, alpha=alpha, generator=gen))
    for name in sorted(plan.fully_trainable):
        try:
            model.get_submodule(name).requires_grad_(True)
        except AttributeError:
            model.get_parameter(name).requires_grad_(True)
    return audit(model)


def audit(model: nn.Module) -> list[AuditEntry]:
    """Per-parameter accounting: adapter, trainable, or frozen."""
    entries = []
    for name, param in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("lora_A", "lora_B"):
            category = CATEGORY_ADAPTER
        elif param.requires_grad:
            category = CATEGORY_TRAINABLE
        else:
            category = CATEGORY_FROZEN
        entries.append(AuditEntry(name=name, category=category, params=param.numel()))
    return entries


def write_audit(entries: Iterable[AuditEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps({"name": entry.name, "category": entry.category,
                                 "params": entry.params}) + "\n")


def trainable_fraction(model: nn.Module) -> float:
    """(adapter + fully-trainable params) / total params; 0.0 for an empty model."""
    total, trainable = 0, 0
    for param in model.parameters():
        total += param.numel()
        if param.requires_grad:
            trainable += param.numel()
    return trainable / total if total else 0.0


def lora_modules(model: nn.Module) -> list[tuple[str, LoraLinear]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, LoraLinear)]


def merge(model: nn.Module) -> nn.Module:
    """Fold every adapter's delta into its base weight and drop the adapters.

    Forward outputs are preserved; merged weights end up frozen, so only a
    still-trainable head contributes to trainable_fraction afterwards.
    """
    adapted = lora_modules(model)
    if not adapted:
        raise AdapterStateError("no adapters installed; nothing to merge")
    for name, module in adapted:
        parent, leaf = _parent_and_leaf(model, name)
        setattr(parent, leaf, module.merged_linear())
    return model
