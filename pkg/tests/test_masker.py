"""Mask backend tests: the square-on-dark oracle image, the no-object
contract, determinism, and containment/connectivity properties."""

import numpy as np
import pytest
from scipy import ndimage

from usground.errors import BackendError, ConfigurationError, PromptError
from usground.geometry import BoundingBox, dsc, mask_to_tight_box
from usground.masker import (
    MASKER_BACKENDS,
    MaskRequest,
    MockMasker,
    ToyMasker,
    load_masker,
    otsu_threshold,
    segment_box,
)


def square_scene(size=64, lo=0.1, hi=0.9, origin=(22, 22), side=20, noise=0.0, seed=0):
    """Bright square on a dark background, optional additive noise."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), lo, dtype=np.float64)
    r, c = origin
    img[r : r + side, c : c + side] = hi
    if noise:
        img = np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)
    gt = np.zeros((size, size), dtype=bool)
    gt[r : r + side, c : c + side] = True
    box = BoundingBox(c, r, c + side, r + side)
    return img, gt, box


class TestOtsu:
    def test_bimodal_split(self):
        values = np.concatenate([np.full(500, 0.2), np.full(500, 0.8)])
        t = otsu_threshold(values)
        assert 0.2 < t < 0.8

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        values = rng.random(1000)
        assert otsu_threshold(values) == otsu_threshold(values)


class TestSegmentBox:
    def test_bright_square_recovered(self):
        img, gt, box = square_scene()
        mask = segment_box(MaskRequest(image=img, box=box))
        assert dsc(mask, gt) >= 0.95

    def test_noisy_square_recovered(self):
        img, gt, box = square_scene(noise=0.05, seed=3)
        mask = segment_box(MaskRequest(image=img, box=box))
        assert dsc(mask, gt) >= 0.95

    def test_dark_lesion_polarity(self):
        # Object darker than its surroundings must still be the foreground.
        img, gt, box = square_scene(lo=0.8, hi=0.15)
        mask = segment_box(MaskRequest(image=img, box=box))
        assert dsc(mask, gt) >= 0.95

    def test_uniform_region_empty_not_error(self):
        img = np.full((64, 64), 0.5)
        mask = segment_box(MaskRequest(image=img, box=BoundingBox(10, 10, 30, 30)))
        assert mask.foreground_count == 0

    def test_low_contrast_region_empty(self):
        rng = np.random.default_rng(7)
        img = np.clip(0.5 + rng.normal(0, 0.005, (64, 64)), 0, 1)
        mask = segment_box(MaskRequest(image=img, box=BoundingBox(10, 10, 40, 40)))
        assert mask.foreground_count == 0

    def test_deterministic(self):
        img, _, box = square_scene(noise=0.08, seed=11)
        a = segment_box(MaskRequest(image=img, box=box))
        b = segment_box(MaskRequest(image=img, box=box))
        assert np.array_equal(a.data, b.data)

    def test_zero_area_box_rejected(self):
        img, _, _ = square_scene()
        with pytest.raises(PromptError):
            segment_box(MaskRequest(image=img, box=BoundingBox(10, 10, 10, 20)))

    def test_box_outside_canvas_rejected(self):
        img, _, _ = square_scene()
        with pytest.raises(PromptError):
            segment_box(MaskRequest(image=img, box=BoundingBox(100, 100, 120, 120)))

    def test_output_shape_matches_image(self):
        img, _, box = square_scene(size=48)
        mask = segment_box(MaskRequest(image=img, box=box))
        assert mask.data.shape == img.shape

    def test_foreground_inside_dilated_box(self):
        rng = np.random.default_rng(19)
        for trial in range(20):
            img = rng.random((64, 64))
            x0, y0 = rng.integers(2, 30, size=2)
            w, h = rng.integers(8, 25, size=2)
            box = BoundingBox(float(x0), float(y0), float(x0 + w), float(y0 + h))
            mask = segment_box(MaskRequest(image=img, box=box))
            if mask.foreground_count == 0:
                continue
            tight = mask_to_tight_box(mask)
            assert tight.x_min >= np.floor(x0 - 0.1 * w)
            assert tight.y_min >= np.floor(y0 - 0.1 * h)
            assert tight.x_max <= np.ceil(x0 + 1.1 * w)
            assert tight.y_max <= np.ceil(y0 + 1.1 * h)

    def test_single_connected_component(self):
        # Two separated bright blobs in the box: only the larger survives.
        img = np.full((64, 64), 0.1)
        img[10:20, 10:20] = 0.9   # 100 px
        img[30:36, 30:36] = 0.9   # 36 px
        mask = segment_box(MaskRequest(image=img, box=BoundingBox(5, 5, 45, 45)))
        labels, count = ndimage.label(mask.data, structure=np.ones((3, 3)))
        assert count == 1
        assert mask.data[12, 12] and not mask.data[32, 32]

    def test_holes_filled(self):
        img = np.full((64, 64), 0.1)
        img[20:40, 20:40] = 0.9
        img[28:32, 28:32] = 0.1  # enclosed dark hole
        box = BoundingBox(20, 20, 40, 40)
        filled = segment_box(MaskRequest(image=img, box=box, fill_holes=True))
        open_mask = segment_box(MaskRequest(image=img, box=box, fill_holes=False))
        assert filled.data[30, 30]
        assert not open_mask.data[30, 30]

    def test_uint8_image_accepted(self):
        img, gt, box = square_scene()
        img8 = (img * 255).astype(np.uint8)
        mask = segment_box(MaskRequest(image=img8, box=box))
        assert dsc(mask, gt) >= 0.95

    def test_unknown_strategy_rejected(self):
        img, _, box = square_scene()
        with pytest.raises(ConfigurationError):
            MaskRequest(image=img, box=box, threshold_strategy="magic")

    def test_mean_strategy_works(self):
        img, gt, box = square_scene()
        mask = segment_box(MaskRequest(image=img, box=box, threshold_strategy="mean"))
        assert dsc(mask, gt) >= 0.9

    def test_partially_out_of_canvas_box_ok(self):
        img, gt, _ = square_scene(origin=(0, 0), side=20)
        box = BoundingBox(-5.0, -5.0, 20.0, 20.0)
        mask = segment_box(MaskRequest(image=img, box=box))
        assert dsc(mask, gt) >= 0.9


class TestBackends:
    def test_toy_masker_wrapper(self):
        img, gt, box = square_scene()
        masker = ToyMasker()
        assert dsc(masker.segment(img, box), gt) >= 0.95

    def test_mock_fills_box(self):
        mock = MockMasker()
        mask = mock.segment(np.zeros((32, 32)), BoundingBox(4, 4, 10, 12))
        assert mask.foreground_count == 6 * 8
        assert mask.data[5, 5] and not mask.data[0, 0]

    def test_registry_names(self):
        assert isinstance(load_masker("toy"), ToyMasker)
        assert isinstance(load_masker("mock"), MockMasker)
        assert set(MASKER_BACKENDS) == {"toy", "mock"}

    def test_unknown_backend_lists_available(self):
        with pytest.raises(BackendError, match="toy"):
            load_masker("sam-9000")

    def test_module_attr_backend(self):
        masker = load_masker("usground.masker:_load_mock_masker")
        assert isinstance(masker, MockMasker)
