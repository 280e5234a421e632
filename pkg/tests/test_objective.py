import numpy as np
import pytest

from vstain.objective import (
    LossReport,
    ObjectiveWeights,
    SsimConfig,
    combined,
    cosine_distance,
    finite_difference_grad,
    grad_check,
    max_relative_error,
    mse,
    pcc,
    ssim,
)


def fd(fn, x, step=1e-6):
    """Test-local central-difference oracle (independent of grad_check)."""
    return finite_difference_grad(fn, np.array(x, dtype=np.float64), step)


def pair(seed, size):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (size, size)), rng.uniform(0, 1, (size, size))


class TestMse:
    def test_identical(self):
        p, _ = pair(0, 5)
        value, grad = mse(p, p)
        assert value == 0.0
        assert (grad == 0.0).all()

    def test_constant_offset(self):
        p, _ = pair(1, 6)
        value, _ = mse(p + 0.1, p)
        assert value == pytest.approx(0.01, rel=1e-9)

    def test_gradient_vs_finite_differences(self):
        p, gt = pair(2, 5)
        _, grad = mse(p, gt)
        numeric = fd(lambda x: mse(x, gt)[0], p)
        assert max_relative_error(grad, numeric) < 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros((3, 3)), np.zeros((3, 4)))


class TestSsim:
    def test_identical_images_score_one(self):
        p, _ = pair(3, 16)
        value, _ = ssim(p, p)
        assert abs(value - 1.0) < 1e-6

    def test_constant_pair_scores_one(self):
        img = np.full((16, 16), 0.4)
        value, _ = ssim(img, img.copy())
        assert abs(value - 1.0) < 1e-6

    def test_gradient_vs_finite_differences(self):
        p, gt = pair(4, 16)
        _, grad = ssim(p, gt)
        numeric = fd(lambda x: ssim(x, gt)[0], p)
        assert max_relative_error(grad, numeric) < 1e-4

    def test_value_in_range(self):
        for seed in range(5):
            p, gt = pair(seed, 13)
            value, _ = ssim(p, gt)
            assert -1.0 <= value <= 1.0

    def test_image_smaller_than_window(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_small_window_config(self):
        p, gt = pair(5, 8)
        value, _ = ssim(p, gt, SsimConfig(window_size=5, gaussian_sigma=1.0))
        assert -1.0 <= value <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SsimConfig(window_size=4)
        with pytest.raises(ValueError):
            SsimConfig(window_size=1)


class TestPcc:
    def test_positive_affine_scores_one(self):
        _, gt = pair(6, 7)
        value, _ = pcc(2.5 * gt + 0.3, gt)
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_negative_affine_scores_minus_one(self):
        _, gt = pair(7, 7)
        value, _ = pcc(1.0 - gt, gt)
        assert value == pytest.approx(-1.0, abs=1e-9)

    def test_zero_variance_degenerate(self):
        gt = np.linspace(0, 1, 16).reshape(4, 4)
        value, grad = pcc(np.full((4, 4), 0.5), gt)
        assert value == 0.0
        assert (grad == 0.0).all()
        value, grad = pcc(gt, np.full((4, 4), 0.5))
        assert value == 0.0
        assert (grad == 0.0).all()

    def test_gradient_vs_finite_differences(self):
        p, gt = pair(8, 8)
        _, grad = pcc(p, gt)
        numeric = fd(lambda x: pcc(x, gt)[0], p)
        assert max_relative_error(grad, numeric) < 1e-5

    def test_affine_invariance(self):
        p, gt = pair(9, 9)
        base, _ = pcc(p, gt)
        shifted, _ = pcc(3.0 * p + 0.7, gt)
        assert abs(base - shifted) < 1e-6


class TestCosineDistance:
    def test_identical_nonzero(self):
        p, _ = pair(10, 6)
        value, _ = cosine_distance(p, p)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_supports(self):
        p = np.zeros((4, 4))
        gt = np.zeros((4, 4))
        p[:2] = 1.0
        gt[2:] = 1.0
        value, _ = cosine_distance(p, gt)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_degenerate(self):
        _, gt = pair(11, 4)
        value, grad = cosine_distance(np.zeros((4, 4)), gt)
        assert value == 1.0
        assert (grad == 0.0).all()

    def test_gradient_vs_finite_differences(self):
        p, gt = pair(12, 8)
        _, grad = cosine_distance(p, gt)
        numeric = fd(lambda x: cosine_distance(x, gt)[0], p)
        assert max_relative_error(grad, numeric) < 1e-5

    def test_value_range(self):
        for seed in range(5):
            p, gt = pair(seed, 6)
            value, _ = cosine_distance(2 * p - 1, 2 * gt - 1)
            assert 0.0 <= value <= 2.0


class TestCombined:
    def test_identical_vanishes(self):
        p, _ = pair(13, 16)
        report = combined(p, p)
        assert abs(report.combined) < 1e-6
        assert abs(report.grad).max() < 1e-6

    def test_mse_only_weights_bit_exact(self):
        p, gt = pair(14, 16)
        report = combined(p, gt, ObjectiveWeights(1.0, 0.0, 0.0, 0.0))
        value, grad = mse(p, gt)
        assert report.combined == value
        np.testing.assert_array_equal(report.grad, grad)

    def test_gradient_vs_finite_differences(self):
        p, gt = pair(15, 16)
        report = combined(p, gt)
        numeric = fd(lambda x: combined(x, gt).combined, p)
        assert max_relative_error(report.grad, numeric) < 1e-4

    def test_nonnegative(self):
        for seed in range(8):
            p, gt = pair(seed, 16)
            assert combined(p, gt).combined >= 0.0

    def test_report_invariant(self):
        p, gt = pair(16, 16)
        w = ObjectiveWeights(0.7, 0.4, 0.25, 0.15)
        r = combined(p, gt, w)
        recomputed = (
            w.alpha * r.mse + w.beta * (1 - r.ssim) + w.lam * (1 - r.pcc) + w.omega * r.cd
        )
        assert abs(r.combined - recomputed) < 1e-6
        assert r.grad.shape == p.shape

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            ObjectiveWeights(-1.0, 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            ObjectiveWeights(np.inf, 0.0, 0.0, 0.0)


class TestGradCheck:
    def test_mse_threshold(self):
        p, gt = pair(17, 8)
        assert grad_check("mse", p, gt) < 1e-6

    def test_ssim_threshold(self):
        p, gt = pair(18, 16)
        assert grad_check("ssim", p, gt) < 1e-4

    def test_cd_threshold(self):
        p, gt = pair(19, 8)
        assert grad_check("cd", p, gt) < 1e-5

    def test_combined_threshold(self):
        p, gt = pair(20, 16)
        assert grad_check("combined", p, gt) < 1e-4

    def test_unknown_term(self):
        p, gt = pair(21, 8)
        with pytest.raises(ValueError):
            grad_check("psnr", p, gt)


def test_loss_report_is_plain_data():
    report = LossReport(0.1, 0.9, 0.8, 0.05, 0.175, np.zeros((2, 2)))
    assert report.mse == 0.1
