"""Adapter engine tests: zero-init no-op, freeze policy, merge equivalence,
audit partition, and the hand-computed parameter accounting case."""

import copy
import json

import pytest
import torch
from torch import nn

from usground.errors import AdapterStateError, ConfigurationError, PlanError
from usground.lora import (
    CATEGORY_ADAPTER,
    CATEGORY_FROZEN,
    CATEGORY_TRAINABLE,
    InjectionPlan,
    LoraLinear,
    apply_plan,
    audit,
    lora_modules,
    merge,
    trainable_fraction,
    wrap,
    write_audit,
)


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(8, 16)
        self.fc2 = nn.Linear(16, 8)

    def forward(self, x):
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.embed = nn.Linear(8, 8)
        self.blocks = nn.ModuleList([Block(), Block()])
        self.head = nn.Linear(8, 4)

    def forward(self, x):
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        return self.head(x)


PLAN = InjectionPlan(
    adapter_targets=frozenset(
        {"blocks.0.fc1", "blocks.0.fc2", "blocks.1.fc1", "blocks.1.fc2"}
    ),
    fully_trainable=frozenset({"head"}),
)


def fresh_net(seed=0):
    torch.manual_seed(seed)
    return Net()


class TestWrap:
    def test_zero_init_noop(self):
        torch.manual_seed(1)
        weights = torch.randn(6, 5)
        bias = torch.randn(6)
        adapted = wrap(weights, rank=2, alpha=8.0, seed=3, bias=bias)
        x = torch.randn(10, 5)
        base_out = torch.nn.functional.linear(x, weights, bias)
        assert torch.equal(adapted(x), base_out)

    def test_hand_matrix_case(self):
        adapted = wrap(torch.eye(2), rank=1, alpha=1.0, seed=0)
        with torch.no_grad():
            adapted.lora_A.copy_(torch.tensor([[1.0, 0.0]]))
            adapted.lora_B.copy_(torch.tensor([[2.0], [0.0]]))
        out = adapted(torch.tensor([1.0, 1.0]))
        assert torch.allclose(out, torch.tensor([3.0, 1.0]))
        assert torch.allclose(adapted.delta(), torch.tensor([[2.0, 0.0], [0.0, 0.0]]))

    def test_rank_bounds(self):
        weights = torch.randn(4, 6)
        wrap(weights, rank=4, alpha=8.0)  # r = min(d_in, d_out) accepted
        with pytest.raises(ConfigurationError):
            wrap(weights, rank=0, alpha=8.0)
        with pytest.raises(ConfigurationError):
            wrap(weights, rank=5, alpha=8.0)

    def test_trainability_flags(self):
        adapted = wrap(torch.randn(4, 4), rank=2, alpha=4.0, bias=torch.zeros(4))
        assert not adapted.base.weight.requires_grad
        assert not adapted.base.bias.requires_grad
        assert adapted.lora_A.requires_grad and adapted.lora_B.requires_grad

    def test_fraction_worked_example(self):
        adapted = wrap(torch.randn(64, 64), rank=4, alpha=8.0, bias=torch.zeros(64))
        assert trainable_fraction(adapted) == pytest.approx(512 / 4672, abs=1e-6)


class TestApplyPlan:
    def test_unresolved_name_reported(self):
        net = fresh_net()
        bad = InjectionPlan(
            adapter_targets=frozenset({"blocks.0.fc1", "blocks.9.fc1"}),
            fully_trainable=frozenset(),
        )
        with pytest.raises(PlanError, match="blocks.9.fc1"):
            apply_plan(net, bad)

    def test_non_linear_target_rejected(self):
        net = fresh_net()
        bad = InjectionPlan(
            adapter_targets=frozenset({"blocks.0"}), fully_trainable=frozenset()
        )
        with pytest.raises(PlanError, match="blocks.0"):
            apply_plan(net, bad)

    def test_empty_plan_freezes_everything(self):
        net = fresh_net()
        entries = apply_plan(
            net, InjectionPlan(adapter_targets=frozenset(), fully_trainable=frozenset())
        )
        assert trainable_fraction(net) == 0.0
        assert all(e.category == CATEGORY_FROZEN for e in entries)

    def test_zero_init_noop_whole_model(self):
        net = fresh_net(7)
        x = torch.randn(16, 8)
        with torch.no_grad():
            before = net(x)
        apply_plan(net, PLAN, rank=2, alpha=4.0, seed=11)
        with torch.no_grad():
            after = net(x)
        rel = (after - before).abs().max() / before.abs().max().clamp(min=1e-9)
        assert float(rel) <= 1e-6

    def test_audit_partition(self):
        net = fresh_net()
        entries = apply_plan(net, PLAN, rank=2, alpha=4.0)
        assert len(entries) == len(list(net.named_parameters()))
        total = sum(p.numel() for p in net.parameters())
        assert sum(e.params for e in entries) == total
        by_cat = {c: 0 for c in (CATEGORY_FROZEN, CATEGORY_ADAPTER, CATEGORY_TRAINABLE)}
        for e in entries:
            by_cat[e.category] += e.params
        assert sum(by_cat.values()) == total
        assert by_cat[CATEGORY_ADAPTER] == 4 * 2 * (8 + 16)  # r*(d_in+d_out) per target
        head_params = 8 * 4 + 4
        assert by_cat[CATEGORY_TRAINABLE] == head_params

    def test_seed_determinism(self):
        net_a, net_b = fresh_net(3), fresh_net(3)
        apply_plan(net_a, PLAN, rank=2, alpha=4.0, seed=5)
        apply_plan(net_b, PLAN, rank=2, alpha=4.0, seed=5)
        for (_, ma), (_, mb) in zip(lora_modules(net_a), lora_modules(net_b)):
            assert torch.equal(ma.lora_A, mb.lora_A)

    def test_overlapping_plan_rejected(self):
        with pytest.raises(PlanError):
            InjectionPlan(
                adapter_targets=frozenset({"head"}), fully_trainable=frozenset({"head"})
            )


def train_steps(net, steps=50, seed=0):
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=1e-2)
    for _ in range(steps):
        x = torch.randn(8, 8, generator=gen)
        target = torch.randn(8, 4, generator=gen)
        loss = ((net(x) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()


class TestFreezeAndMerge:
    def test_frozen_params_bit_identical_after_training(self):
        net = fresh_net(13)
        apply_plan(net, PLAN, rank=2, alpha=4.0, seed=1)
        snapshot = {
            name: p.detach().clone()
            for name, p in net.named_parameters()
            if not p.requires_grad
        }
        assert snapshot, "expected frozen parameters"
        train_steps(net, steps=50)
        for name, p in net.named_parameters():
            if name in snapshot:
                assert torch.equal(p, snapshot[name]), name
        # And the trainable parts did move.
        assert any(
            float(m.lora_B.detach().abs().sum()) > 0 for _, m in lora_modules(net)
        )

    def test_merge_equivalence_after_training(self):
        net = fresh_net(17)
        apply_plan(net, PLAN, rank=2, alpha=4.0, seed=2)
        train_steps(net, steps=30)
        net.eval()
        xs = torch.randn(100, 8, generator=torch.Generator().manual_seed(9))
        with torch.no_grad():
            adapted_out = net(xs)
        merged = merge(copy.deepcopy(net))
        with torch.no_grad():
            merged_out = merged(xs)
        rel = (merged_out - adapted_out).abs().max() / adapted_out.abs().max()
        assert float(rel) <= 1e-5
        assert not lora_modules(merged)

    def test_merge_zero_delta_bit_identical(self):
        net = fresh_net(19)
        apply_plan(net, PLAN, rank=2, alpha=4.0, seed=3)
        originals = {
            name: m.base.weight.detach().clone() for name, m in lora_modules(net)
        }
        merge(net)
        for name, weight in originals.items():
            merged_weight = net.get_submodule(name).weight
            assert torch.equal(merged_weight, weight)

    def test_double_merge_rejected(self):
        net = fresh_net(23)
        apply_plan(net, PLAN, rank=2, alpha=4.0)
        merge(net)
        with pytest.raises(AdapterStateError):
            merge(net)

    def test_merge_fraction_counts_only_head(self):
        net = fresh_net(29)
        apply_plan(net, PLAN, rank=2, alpha=4.0)
        merge(net)
        head_params = 8 * 4 + 4
        total = sum(p.numel() for p in net.parameters())
        assert trainable_fraction(net) == pytest.approx(head_params / total)


class TestAuditOutput:
    def test_jsonl_round_trip(self, tmp_path):
        net = fresh_net()
        entries = apply_plan(net, PLAN, rank=2, alpha=4.0)
        path = tmp_path / "audit.jsonl"
        write_audit(entries, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == len(entries)
        parsed = [json.loads(line) for line in lines]
        assert parsed[0].keys() == {"name", "category", "params"}
        assert sum(row["params"] for row in parsed) == sum(
            p.numel() for p in net.parameters()
        )

    def test_audit_matches_named_parameters(self):
        net = fresh_net()
        apply_plan(net, PLAN, rank=2, alpha=4.0)
        names = {e.name for e in audit(net)}
        assert names == {n for n, _ in net.named_parameters()}
