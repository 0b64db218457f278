"""Training-loop, evaluation, sweep, and benchmark tests. Training runs use
the reduced detector configuration so the suite stays fast."""

import json
import math

import numpy as np
import pytest
import torch

from usground.data import (
    SynthConfig,
    generate_synthetic,
    ingest_all,
    load_mask_file,
    split,
)
from usground.detector import (
    MockDetector,
    ToyDetector,
    default_injection_plan,
    micro_config,
)
from usground.errors import (
    ConfigurationError,
    EvaluationError,
    TrainingDivergedError,
)
from usground.geometry import mask_to_tight_box
from usground.lora import apply_plan
from usground.masker import MockMasker, ToyMasker
from usground.pipeline import SegmentationPipeline
from usground.train_eval import (
    BenchmarkResult,
    EarlyStopper,
    EvalReport,
    TrainConfig,
    _epoch_pass,
    benchmark_runtime,
    combine_summaries,
    evaluate,
    format_pm,
    metric_spread,
    prompt_sweep,
    summarize,
    train,
)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic(SynthConfig(count=14, name="train14"), root, seed=11)
    samples, _ = ingest_all(manifest, target_size=(32, 32))
    return manifest, samples


def micro_detector(seed=0):
    detector = ToyDetector(micro_config(), seed=seed)
    apply_plan(detector, default_injection_plan(detector), rank=2, alpha=4.0, seed=seed)
    return detector


class TestEarlyStopper:
    def test_hand_traced_example(self):
        # val losses 1.0, 0.9, then twenty non-improving epochs: training
        # stops at epoch 22 with the best at epoch 2.
        stopper = EarlyStopper(patience=20)
        trace = [1.0, 0.9] + [0.9] * 20
        stopped_at = None
        for epoch, loss in enumerate(trace, start=1):
            if stopper.update(loss, epoch):
                stopped_at = epoch
                break
        assert stopped_at == 22
        assert stopper.best_epoch == 2
        assert stopper.best_loss == 0.9

    def test_improvement_resets_wait(self):
        stopper = EarlyStopper(patience=2)
        for epoch, loss in enumerate([1.0, 0.99, 0.98, 0.97], start=1):
            assert not stopper.update(loss, epoch)

    def test_never_exceeds_patience(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            patience = int(rng.integers(1, 6))
            stopper = EarlyStopper(patience)
            for epoch in range(1, 60):
                if stopper.update(float(rng.random()), epoch):
                    assert epoch - stopper.best_epoch == patience
                    break

    def test_patience_validation(self):
        with pytest.raises(ConfigurationError):
            EarlyStopper(0)


class TestFormatting:
    def test_two_sample_example(self):
        summary = summarize([1.0, 0.5], [1.0, 0.5])
        assert summary.dsc_mean == pytest.approx(75.0)
        assert summary.dsc_std == pytest.approx(25.0)
        assert summary.rendered()["dsc"] == "75.00±25.00"

    def test_integer_std_renders_bare(self):
        assert format_pm(91.74, 5) == "91.74±5"

    def test_float_std_renders_two_decimals(self):
        assert format_pm(75.0, 25.0) == "75.00±25.00"
        assert format_pm(100.0, 0.0) == "100.00±0.00"

    def test_combine_matches_concatenation(self):
        rng = np.random.default_rng(3)
        a_d, a_i = rng.random(7), rng.random(7)
        b_d, b_i = rng.random(13), rng.random(13)
        combined = combine_summaries(
            [summarize(a_d, a_i), summarize(b_d, b_i)]
        )
        direct = summarize(np.concatenate([a_d, b_d]), np.concatenate([a_i, b_i]))
        assert combined.count == direct.count
        assert combined.dsc_mean == pytest.approx(direct.dsc_mean, abs=1e-9)
        assert combined.dsc_std == pytest.approx(direct.dsc_std, abs=1e-9)
        assert combined.iou_mean == pytest.approx(direct.iou_mean, abs=1e-9)
        assert combined.iou_std == pytest.approx(direct.iou_std, abs=1e-9)

    def test_spread_arithmetic(self):
        rows = {
            "a": summarize([0.7001], [0.7001]),
            "b": summarize([0.7255], [0.7255]),
        }
        spread = metric_spread(rows)
        assert spread["dsc"] == pytest.approx(2.54, abs=1e-9)


class TestTrain:
    def test_runs_restores_best_and_logs(self, corpus, tmp_path):
        _, samples = corpus
        detector = micro_detector()
        cfg = TrainConfig(max_epochs=4, seed=1, augment=False)
        history_path = tmp_path / "history.jsonl"
        result = train(detector, samples[:10], samples[10:], cfg, history_path)

        assert 1 <= result.stopped_epoch <= 4
        assert len(result.history) == result.stopped_epoch
        val_losses = [r.val_loss for r in result.history]
        assert result.best_val_loss == min(val_losses)
        assert result.best_epoch == val_losses.index(min(val_losses)) + 1

        # Weights were restored to the best epoch: recomputing the val loss
        # must reproduce it.
        detector.eval()
        revalidated = _epoch_pass(detector, samples[10:], {}, cfg, 32)
        assert revalidated == pytest.approx(result.best_val_loss, abs=1e-5)

        rows = [json.loads(line) for line in history_path.read_text().splitlines()]
        assert [r["epoch"] for r in rows] == list(range(1, result.stopped_epoch + 1))
        assert all(set(r) == {"epoch", "train_loss", "val_loss", "lr"} for r in rows)

    def test_frozen_parameters_bit_identical(self, corpus):
        _, samples = corpus
        detector = micro_detector()
        frozen_before = {
            name: p.detach().clone()
            for name, p in detector.named_parameters()
            if not p.requires_grad
        }
        trainable_before = {
            name: p.detach().clone()
            for name, p in detector.named_parameters()
            if p.requires_grad
        }
        train(detector, samples[:10], samples[10:], TrainConfig(max_epochs=3, seed=2))
        for name, p in detector.named_parameters():
            if name in frozen_before:
                assert torch.equal(p, frozen_before[name]), name
        moved = [
            name
            for name, p in detector.named_parameters()
            if name in trainable_before and not torch.equal(p, trainable_before[name])
        ]
        assert any("lora" in name for name in moved)
        assert any("box_head" in name for name in moved)

    def test_deterministic_history(self, corpus):
        _, samples = corpus
        cfg = TrainConfig(max_epochs=3, seed=5)
        result_a = train(micro_detector(), samples[:10], samples[10:], cfg)
        result_b = train(micro_detector(), samples[:10], samples[10:], cfg)
        assert result_a.history == result_b.history

    def test_divergence_aborts(self, corpus):
        _, samples = corpus
        detector = micro_detector()
        poisoned = samples[0].__class__(
            image=np.full_like(samples[0].image, np.nan),
            mask=samples[0].mask,
            box=samples[0].box,
            prompt=samples[0].prompt,
            provenance=samples[0].provenance,
            split=samples[0].split,
        )
        with pytest.raises(TrainingDivergedError):
            train(
                detector,
                [poisoned] + list(samples[1:10]),
                samples[10:],
                TrainConfig(max_epochs=2, seed=0, augment=False),
            )

    def test_stop_respects_patience_bound(self, corpus):
        _, samples = corpus
        detector = micro_detector()
        cfg = TrainConfig(max_epochs=25, patience=2, seed=3, augment=False)
        result = train(detector, samples[:10], samples[10:], cfg)
        assert (
            result.stopped_epoch - result.best_epoch == cfg.patience
            or result.stopped_epoch == cfg.max_epochs
        )

    def test_canvas_mismatch_rejected(self, corpus):
        manifest, _ = corpus
        wrong, _ = ingest_all(manifest, target_size=(64, 64))
        with pytest.raises(ConfigurationError):
            train(micro_detector(), wrong[:4], wrong[4:6], TrainConfig(max_epochs=1))

    def test_fully_frozen_model_rejected(self, corpus):
        _, samples = corpus
        detector = ToyDetector(micro_config(), seed=0)
        for p in detector.parameters():
            p.requires_grad_(False)
        with pytest.raises(ConfigurationError):
            train(detector, samples[:4], samples[4:6], TrainConfig(max_epochs=1))

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(patience=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=0.0)


def oracle_pipeline(manifest, records=None):
    """Mock detector + masker scripted from a dataset's own ground truth;
    only valid for single-record manifests (the mock box is fixed)."""
    records = records if records is not None else manifest.samples
    assert len(records) == 1
    record = records[0]
    gt = load_mask_file(manifest.root / record.mask)
    height, width = gt.shape
    tight = mask_to_tight_box(gt)
    cx = (tight.x_min + tight.x_max) / 2 / width
    cy = (tight.y_min + tight.y_max) / 2 / height
    detector = MockDetector(
        boxes=[(cx, cy, tight.width / width, tight.height / height)], score=0.9
    )
    key = tuple(round(v, 3) for v in tight.xyxy())
    return SegmentationPipeline(detector, MockMasker(masks={key: gt}))


class TestEvaluate:
    def test_oracle_round_trip_scores_hundred(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=1, name="one"), tmp_path, seed=3)
        report = evaluate(oracle_pipeline(manifest), manifest)
        row = report.rows["one"]
        assert row.count == 1
        assert row.dsc_mean == 100.0 and row.dsc_std == 0.0
        assert row.iou_mean == 100.0 and row.iou_std == 0.0
        assert row.rendered() == {"dsc": "100.00±0.00", "iou": "100.00±0.00"}

    def test_failed_detection_scores_empty_mask(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=3, name="miss"), tmp_path, seed=5)
        pipe = SegmentationPipeline(
            MockDetector(score=0.9), MockMasker(), threshold=0.95
        )
        report = evaluate(pipe, manifest)
        row = report.rows["miss"]
        assert row.count == 3
        assert row.dsc_mean == 0.0 and row.iou_mean == 0.0
        assert all(not s["detected"] for s in report.samples)

    def test_empty_split_raises(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=4, name="s"), tmp_path, seed=1)
        labeled = split(manifest, fractions=(0.75, 0.25, 0.0), seed=0)
        assert labeled.counts()["test"] == 0
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        with pytest.raises(EvaluationError):
            evaluate(pipe, labeled, split="test")

    def test_reaggregation_from_dump(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=6, name="agg"), tmp_path, seed=7)
        pipe = SegmentationPipeline(ToyDetector(micro_config(), seed=0), ToyMasker(),
                                    threshold=1e-3)
        report = evaluate(pipe, manifest)
        row = report.rows["agg"]
        dscs = np.array([s["dsc"] for s in report.samples]) * 100
        ious = np.array([s["iou"] for s in report.samples]) * 100
        assert row.dsc_mean == pytest.approx(dscs.mean(), abs=1e-9)
        assert row.dsc_std == pytest.approx(dscs.std(), abs=1e-9)
        assert row.iou_mean == pytest.approx(ious.mean(), abs=1e-9)
        assert row.iou_std == pytest.approx(ious.std(), abs=1e-9)

    def test_union_equals_weighted_combination(self, tmp_path):
        m1 = generate_synthetic(SynthConfig(count=3, name="d1"), tmp_path / "1", seed=2)
        m2 = generate_synthetic(SynthConfig(count=5, name="d2"), tmp_path / "2", seed=9)
        pipe = SegmentationPipeline(ToyDetector(micro_config(), seed=0), ToyMasker(),
                                    threshold=1e-3)
        joint = evaluate(pipe, [m1, m2])
        pooled = combine_summaries([joint.rows["d1"], joint.rows["d2"]])
        overall = joint.rows["overall"]
        assert overall.count == 8
        assert overall.dsc_mean == pytest.approx(pooled.dsc_mean, abs=1e-9)
        assert overall.dsc_std == pytest.approx(pooled.dsc_std, abs=1e-9)
        assert overall.iou_mean == pytest.approx(pooled.iou_mean, abs=1e-9)
        assert overall.iou_std == pytest.approx(pooled.iou_std, abs=1e-9)

    def test_report_save_round_trip(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=2, name="disk"), tmp_path, seed=4)
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        report = evaluate(pipe, manifest)
        out = report.save(tmp_path / "report.json")
        payload = json.loads(out.read_text())
        assert "table" in payload and isinstance(payload["table"], str)
        assert payload["rows"]["disk"]["count"] == 2
        lines = (tmp_path / "report.samples.jsonl").read_text().splitlines()
        rows = [json.loads(line) for line in lines]
        assert len(rows) == 2
        d = np.array([r["dsc"] for r in rows]) * 100
        assert payload["rows"]["disk"]["dsc_mean"] == pytest.approx(d.mean(), abs=1e-9)


class TestPromptSweep:
    def test_token_identical_prompts_give_identical_rows(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=3, name="syn"), tmp_path, seed=6)
        pipe = SegmentationPipeline(ToyDetector(micro_config(), seed=1), ToyMasker(),
                                    threshold=1e-3)
        # Both words are out of vocabulary, so the token sequences match.
        report = prompt_sweep(pipe, ["glowing lesion", "shimmering lesion"], manifest)
        a, b = report.rows.values()
        assert a == b
        assert report.spread == {"dsc": 0.0, "iou": 0.0}

    def test_duplicate_prompts_zero_spread(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=2, name="dup"), tmp_path, seed=8)
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        report = prompt_sweep(pipe, ["bright lesion", "bright lesion"], manifest)
        assert report.spread == {"dsc": 0.0, "iou": 0.0}

    def test_requires_two_prompts(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=2, name="few"), tmp_path, seed=0)
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        with pytest.raises(ConfigurationError):
            prompt_sweep(pipe, ["only one"], manifest)

    def test_distinct_prompts_populate_rows_and_dump(self, tmp_path):
        manifest = generate_synthetic(SynthConfig(count=4, name="sw"), tmp_path, seed=2)
        pipe = SegmentationPipeline(ToyDetector(micro_config(), seed=0), ToyMasker(),
                                    threshold=1e-3)
        report = prompt_sweep(pipe, ["bright lesion", "dark lesion"], manifest)
        assert set(report.rows) == {"bright lesion", "dark lesion"}
        assert all(r.count == 4 for r in report.rows.values())
        assert len(report.samples) == 8
        assert report.key_name == "prompt"
        assert "spread" in report.render()


class CountingDetector(MockDetector):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def detect(self, image, prompt):
        self.calls += 1
        return super().detect(image, prompt)


class TestBenchmark:
    def test_runs_and_warmup(self):
        detector = CountingDetector()
        pipe = SegmentationPipeline(detector, MockMasker())
        result = benchmark_runtime(pipe, image_hw=(128, 128), runs=10)
        assert detector.calls == 11  # warm-up plus the measured runs
        assert len(result.times) == 10
        assert result.mean_seconds == pytest.approx(
            sum(result.times) / 10, rel=1e-12
        )

    def test_mock_overhead_bound(self):
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        result = benchmark_runtime(pipe, image_hw=(800, 800), runs=10)
        assert result.mean_seconds <= 0.05
        assert result.image_hw == (800, 800)

    def test_runs_validated(self):
        pipe = SegmentationPipeline(MockDetector(), MockMasker())
        with pytest.raises(ConfigurationError):
            benchmark_runtime(pipe, runs=0)

    def test_result_serializes(self):
        result = BenchmarkResult(0.01, (0.01, 0.01), (64, 64))
        payload = result.to_dict()
        assert payload["runs"] == 2 and payload["image_hw"] == [64, 64]
