import numpy as np
import pytest
from scipy.stats import wilcoxon as scipy_wilcoxon

from oracles import oracle_cd, oracle_ed, oracle_mae, oracle_pcc, oracle_ssim
from vstain.metrics import (
    aggregate,
    effective_ssim_window,
    evaluate_pair,
    format_table,
    wilcoxon_signed_rank,
    write_report_csv,
)
from vstain.objective import mse


class TestEvaluatePair:
    def test_identical_pair(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(0, 1, (16, 16))
        row = evaluate_pair(gt, gt, "nucleus", "r0")
        assert row.mae == 0.0
        assert row.ssim == pytest.approx(1.0, abs=1e-9)
        assert row.pcc == pytest.approx(1.0, abs=1e-9)
        assert row.cd == pytest.approx(0.0, abs=1e-12)
        assert row.ed == 0.0

    def test_constant_offset_ed_closed_form(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.0, 0.9, (2048, 2048))
        row = evaluate_pair(gt + 0.07, gt, "mitochondria")
        assert abs(row.ed - 0.07 * 2048) < 1e-3
        assert row.mae == pytest.approx(0.07, abs=1e-9)

    def test_matches_bruteforce_oracles(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0, 1, (8, 8))
        gt = rng.uniform(0, 1, (8, 8))
        row = evaluate_pair(p, gt, "nucleus")
        window = effective_ssim_window(8, 8)
        assert abs(row.mae - oracle_mae(p, gt)) < 1e-6
        assert abs(row.ed - oracle_ed(p, gt)) < 1e-6
        assert abs(row.pcc - oracle_pcc(p, gt)) < 1e-6
        assert abs(row.cd - oracle_cd(p, gt)) < 1e-6
        assert abs(row.ssim - oracle_ssim(p, gt, window)) < 1e-6

    def test_tubulin_actin_limited_columns(self):
        rng = np.random.default_rng(3)
        p, gt = rng.uniform(0, 1, (12, 12)), rng.uniform(0, 1, (12, 12))
        for org in ("tubulin", "actin"):
            row = evaluate_pair(p, gt, org)
            assert row.mae is None and row.cd is None and row.ed is None
            assert -1.0 <= row.ssim <= 1.0
            assert -1.0 <= row.pcc <= 1.0

    def test_ed_squared_equals_n_times_mse(self):
        rng = np.random.default_rng(4)
        p, gt = rng.uniform(0, 1, (13, 9)), rng.uniform(0, 1, (13, 9))
        row = evaluate_pair(p, gt, "nucleus")
        mse_value, _ = mse(p, gt)
        assert row.ed**2 == pytest.approx(p.size * mse_value, rel=1e-6)

    def test_mae_triangle_inequality(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p, q, gt = (rng.uniform(0, 1, (6, 6)) for _ in range(3))
            ab = evaluate_pair(p, gt, "nucleus").mae
            aq = evaluate_pair(p, q, "nucleus").mae
            qb = evaluate_pair(q, gt, "nucleus").mae
            assert ab <= aq + qb + 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_pair(np.zeros((4, 4)), np.zeros((4, 5)), "nucleus")

    def test_unknown_organelle(self):
        with pytest.raises(ValueError):
            evaluate_pair(np.zeros((4, 4)), np.zeros((4, 4)), "golgi")


class TestAggregate:
    def test_single_row_equals_itself(self):
        rng = np.random.default_rng(6)
        p, gt = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        row = evaluate_pair(p, gt, "nucleus")
        report = aggregate([row])
        assert report.get("nucleus", "mae") == pytest.approx(row.mae)
        assert report.counts["nucleus"] == 1

    def test_two_row_mean(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(0.1, 0.9, (16, 16))
        rows = [
            evaluate_pair(gt + 0.02, gt, "nucleus"),
            evaluate_pair(gt + 0.04, gt, "nucleus"),
        ]
        report = aggregate(rows)
        assert report.get("nucleus", "mae") == pytest.approx(0.03, abs=1e-9)

    def test_mixed_organelles_column_conventions(self):
        rng = np.random.default_rng(8)
        p, gt = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        report = aggregate([
            evaluate_pair(p, gt, "nucleus"),
            evaluate_pair(p, gt, "tubulin"),
        ])
        assert report.get("tubulin", "mae") is None
        assert report.get("tubulin", "ssim") is not None

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_csv_layout(self, tmp_path):
        rng = np.random.default_rng(9)
        p, gt = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        report = aggregate([evaluate_pair(p, gt, "nucleus"), evaluate_pair(p, gt, "actin")])
        out = tmp_path / "report.csv"
        write_report_csv(report, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "organelle,metric,mean,n"
        assert len(lines) == 1 + 5 + 2  # nucleus gets 5 metrics, actin 2

    def test_table_direction_markers(self):
        rng = np.random.default_rng(10)
        p, gt = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
        table = format_table([("model", aggregate([evaluate_pair(p, gt, "nucleus")]))])
        assert "MAE↓" in table and "SSIM↑" in table


class TestWilcoxon:
    def test_all_equal_rejected(self):
        a = np.arange(6.0)
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(a, a.copy())

    def test_exact_n6_all_positive(self):
        a = np.array([3.0, 5.0, 1.0, 7.0, 2.0, 4.0])
        b = a - np.array([1.0, 2.0, 0.5, 1.0, 1.0, 2.0])
        assert wilcoxon_signed_rank(a, b) == pytest.approx(2 / 64)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=10)
        b = a + rng.normal(size=10)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_signed_rank(b, a))

    def test_exact_matches_scipy(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            a = rng.normal(size=10)
            b = a + rng.normal(size=10) * 0.5
            ours = wilcoxon_signed_rank(a, b)
            ref = scipy_wilcoxon(a, b, alternative="two-sided", method="exact").pvalue
            assert ours == pytest.approx(ref, rel=1e-12)

    def test_approx_matches_scipy(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=30)
        b = a + rng.normal(size=30) * 0.4 + 0.2
        ours = wilcoxon_signed_rank(a, b)
        ref = scipy_wilcoxon(a, b, alternative="two-sided", method="approx", correction=False).pvalue
        assert ours == pytest.approx(ref, rel=1e-9)

    def test_too_few_pairs(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.arange(5.0), np.zeros(5))
