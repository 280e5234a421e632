import numpy as np
import pytest

from vstain.image import HORIZONTAL, flip
from vstain.patches import (
    PatchTooLargeError,
    assemble,
    extract,
    hann_window,
    plan_grid,
    reflect_pad_to,
)


class TestPlanGrid:
    def test_1024_512_256(self):
        grid = plan_grid(1024, 1024, 512, 256)
        rows = sorted({r for r, _ in grid.positions})
        assert rows == [0, 256, 512]
        assert len(grid.positions) == 9

    def test_exact_fit_single_patch(self):
        for stride in (1, 100, 512):
            grid = plan_grid(512, 512, 512, stride)
            assert grid.positions == ((0, 0),)

    def test_700_boundary_anchor(self):
        grid = plan_grid(700, 700, 512, 256)
        rows = sorted({r for r, _ in grid.positions})
        assert rows == [0, 188]
        assert len(grid.positions) == 4

    def test_full_coverage_and_sorted_unique(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h = int(rng.integers(64, 400))
            w = int(rng.integers(64, 400))
            patch = int(rng.integers(16, 65))
            stride = int(rng.integers(1, patch + 1))
            if h < patch or w < patch:
                continue
            grid = plan_grid(h, w, patch, stride)
            assert list(grid.positions) == sorted(set(grid.positions))
            covered = np.zeros((h, w), dtype=bool)
            for r, c in grid.positions:
                assert r + patch <= h and c + patch <= w
                covered[r : r + patch, c : c + patch] = True
            assert covered.all()

    def test_too_small_image_signals_padding_path(self):
        with pytest.raises(PatchTooLargeError):
            plan_grid(256, 256, 512, 256)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            plan_grid(100, 100, 32, 33)
        with pytest.raises(ValueError):
            plan_grid(100, 100, 32, 0)


class TestHannWindow:
    def test_profile_n4(self):
        # 1-D profile before the floor: {0, 0.75, 0.75, 0}
        win = hann_window(4, floor_epsilon=1e-12).weights
        profile = np.array([0.0, 0.75, 0.75, 0.0])
        oracle = np.maximum(np.outer(profile, profile), 1e-12)
        np.testing.assert_allclose(win, oracle, atol=1e-15)

    def test_corner_floored(self):
        win = hann_window(8, floor_epsilon=1e-3).weights
        assert win[0, 0] == 1e-3
        assert (win > 0).all()

    def test_center_of_odd_window_is_one(self):
        win = hann_window(9).weights
        assert win[4, 4] == pytest.approx(1.0)

    def test_flip_symmetric(self):
        win = hann_window(16).weights
        np.testing.assert_array_equal(win, win[:, ::-1])
        np.testing.assert_array_equal(win, win[::-1, :])

    def test_matches_cosine_formula_oracle(self):
        n = 7
        win = hann_window(n, floor_epsilon=1e-9).weights
        profile = [0.5 * (1 - np.cos(2 * np.pi * i / (n - 1))) for i in range(n)]
        oracle = np.maximum(np.outer(profile, profile), 1e-9)
        np.testing.assert_allclose(win, oracle, atol=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            hann_window(1)
        with pytest.raises(ValueError):
            hann_window(8, floor_epsilon=1.5)


class TestExtract:
    def test_single_patch_equals_image(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (64, 64)).astype(np.float32)
        grid = plan_grid(64, 64, 64, 32)
        patches = extract(img, grid)
        assert len(patches) == 1
        np.testing.assert_array_equal(patches[0], img)

    def test_grid_patch_count_and_shape(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (1024, 1024)).astype(np.float32)
        grid = plan_grid(1024, 1024, 512, 256)
        patches = extract(img, grid)
        assert len(patches) == 9
        assert all(p.shape == (512, 512) for p in patches)

    def test_overlap_pixels_identical(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (96, 96)).astype(np.float32)
        grid = plan_grid(96, 96, 64, 32)
        patches = extract(img, grid)
        # pixel (40, 40) is inside the patches anchored at (0,0), (0,32), (32,0), (32,32)
        values = {
            float(patches[k][40 - r, 40 - c])
            for k, (r, c) in enumerate(grid.positions)
            if r <= 40 < r + 64 and c <= 40 < c + 64
        }
        assert len(values) == 1

    def test_dimension_mismatch(self):
        grid = plan_grid(64, 64, 32, 16)
        with pytest.raises(ValueError):
            extract(np.zeros((60, 64), dtype=np.float32), grid)


class TestAssemble:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (150, 90)).astype(np.float32)
        grid = plan_grid(150, 90, 48, 24)
        out = assemble(extract(img, grid), grid, hann_window(48))
        assert np.abs(out - img).max() < 1e-5

    def test_single_patch_exact(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (32, 32)).astype(np.float32)
        grid = plan_grid(32, 32, 32, 16)
        out = assemble(extract(img, grid), grid, hann_window(32))
        np.testing.assert_array_equal(out, img)

    def test_overlap_blend_is_convex(self):
        # two half-overlapping constant patches: overlap strictly between values
        grid = plan_grid(32, 48, 32, 16)
        assert grid.positions == ((0, 0), (0, 16))
        a, b = 0.2, 0.8
        patches = [np.full((32, 32), a, np.float32), np.full((32, 32), b, np.float32)]
        win = hann_window(32)
        out = assemble(patches, grid, win)
        overlap = out[:, 16:32]
        assert (overlap > min(a, b)).all() and (overlap < max(a, b)).all()
        # scalar-weight oracle on one overlap column pair
        w = win.weights
        for rr, cc in [(0, 20), (13, 25)]:
            expected = (w[rr, cc] * a + w[rr, cc - 16] * b) / (w[rr, cc] + w[rr, cc - 16])
            assert abs(float(out[rr, cc]) - expected) < 1e-6

    def test_coverage_weight_positive(self):
        grid = plan_grid(130, 70, 64, 48)
        win = hann_window(64)
        den = np.zeros((130, 70))
        for r, c in grid.positions:
            den[r : r + 64, c : c + 64] += win.weights
        assert den.min() > 0

    def test_flip_equivariance(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (96, 128)).astype(np.float32)
        grid = plan_grid(96, 128, 64, 32)
        win = hann_window(64)
        direct = flip(assemble(extract(img, grid), grid, win), HORIZONTAL)
        mirrored = assemble(extract(flip(img, HORIZONTAL), grid), grid, win)
        assert np.abs(direct - mirrored).max() < 1e-6

    def test_count_mismatch(self):
        grid = plan_grid(64, 64, 32, 16)
        with pytest.raises(ValueError):
            assemble([np.zeros((32, 32))], grid, hann_window(32))

    def test_empty_grid_rejected(self):
        grid = plan_grid(64, 64, 32, 16)
        empty = type(grid)(32, 16, (), 64, 64)
        with pytest.raises(ValueError):
            assemble([], empty, hann_window(32))


class TestReflectPad:
    def test_pads_to_minimum(self):
        img = np.arange(12, dtype=np.float32).reshape(3, 4)
        out = reflect_pad_to(img, 8, 8)
        assert out.shape == (8, 8)
        np.testing.assert_array_equal(out[:3, :4], img)

    def test_noop_when_large_enough(self):
        img = np.zeros((16, 16), dtype=np.float32)
        assert reflect_pad_to(img, 8, 8) is img
