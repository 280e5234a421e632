"""Per-pair evaluation metrics and per-organelle aggregate report tables.

Conventions: nucleus and mitochondria rows carry MAE, SSIM, PCC, CD and ED;
tubulin and actin rows carry SSIM and PCC only. ED is the unnormalized
Euclidean norm of the pixelwise difference, so its magnitude grows with
image size. Metric SSIM reuses the loss SSIM configuration (11x11 Gaussian,
sigma 1.5), with the window clamped down for images smaller than 11 pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .image import ORGANELLES, Image2D
from .objective import SsimConfig, cosine_distance, pcc, ssim

ORGANELLE_METRICS: dict[str, tuple[str, ...]] = {
    "nucleus": ("mae", "ssim", "pcc", "cd", "ed"),
    "mitochondria": ("mae", "ssim", "pcc", "cd", "ed"),
    "tubulin": ("ssim", "pcc"),
    "actin": ("ssim", "pcc"),
}

METRIC_DIRECTION = {"mae": "↓", "ssim": "↑", "pcc": "↑", "cd": "↓", "ed": "↓"}


@dataclass(frozen=True)
class MetricRow:
    organelle: str
    record_id: str
    mae: float | None
    ssim: float
    pcc: float
    cd: float | None
    ed: float | None

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)


def effective_ssim_window(height: int, width: int, base: int = 11) -> int:
    """Largest odd window <= min(base, image side), floored at 3."""
    k = min(base, height, width)
    if k % 2 == 0:
        k -= 1
    return max(k, 3)


def evaluate_pair(p: Image2D, gt: Image2D, organelle: str, record_id: str = "") -> MetricRow:
    """Score one prediction/ground-truth pair (both expected in [0, 1])."""
    if organelle not in ORGANELLES:
        raise ValueError(f"unknown organelle {organelle!r}")
    p = np.asarray(p, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if p.shape != gt.shape or p.ndim != 2:
        raise ValueError(f"shape mismatch: {p.shape} vs {gt.shape}")
    window = effective_ssim_window(*p.shape)
    ssim_v = ssim(p, gt, SsimConfig(window_size=window))[0]
    pcc_v = pcc(p, gt)[0]
    if organelle in ("tubulin", "actin"):
        return MetricRow(organelle, record_id, None, ssim_v, pcc_v, None, None)
    diff = p - gt
    mae = float(np.mean(np.abs(diff)))
    ed = float(np.sqrt(np.sum(diff * diff)))
    cd_v = cosine_distance(p, gt)[0]
    return MetricRow(organelle, record_id, mae, ssim_v, pcc_v, cd_v, ed)


@dataclass(frozen=True)
class AggregateReport:
    """Per-organelle arithmetic means of each applicable metric."""

    means: dict[tuple[str, str], float]
    counts: dict[str, int]

    def get(self, organelle: str, metric: str) -> float | None:
        return self.means.get((organelle, metric))


def aggregate(rows: list[MetricRow]) -> AggregateReport:
    if not rows:
        raise ValueError("no metric rows to aggregate")
    means: dict[tuple[str, str], float] = {}
    counts: dict[str, int] = {}
    for org in ORGANELLES:
        org_rows = [r for r in rows if r.organelle == org]
        if not org_rows:
            continue
        counts[org] = len(org_rows)
        for metric in ORGANELLE_METRICS[org]:
            values = [r.get(metric) for r in org_rows]
            means[(org, metric)] = float(np.mean([v for v in values if v is not None]))
    return AggregateReport(means, counts)


def write_report_csv(report: AggregateReport, path: str | Path) -> None:
    """CSV rows ``organelle,metric,mean,n`` in fixed organelle/metric order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["organelle", "metric", "mean", "n"])
        for org in ORGANELLES:
            if org not in report.counts:
                continue
            for metric in ORGANELLE_METRICS[org]:
                writer.writerow([org, metric, repr(report.get(org, metric)), report.counts[org]])


def format_table(variants: list[tuple[str, AggregateReport]], notes: list[str] | None = None) -> str:
    """Aligned text table: one row per variant, organelle-grouped metric columns."""
    headers = ["method"]
    keys: list[tuple[str, str]] = []
    for org in ORGANELLES:
        for metric in ORGANELLE_METRICS[org]:
            headers.append(f"{org[:5]}.{metric.upper()}{METRIC_DIRECTION[metric]}")
            keys.append((org, metric))
    lines = [f"# {note}" for note in (notes or [])]
    table_rows = [headers]
    for label, report in variants:
        row = [label]
        for org, metric in keys:
            value = report.get(org, metric)
            row.append("-" if value is None else f"{value:.4f}")
        table_rows.append(row)
    widths = [max(len(r[i]) for r in table_rows) for i in range(len(headers))]
    for r in table_rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Exact enumeration of all sign assignments
    for up to 12 nonzero pairs; normal approximation with tie correction
    beyond that. All-zero differences leave the test undefined.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {a.shape} vs {b.shape}")
    if a.size < 6:
        raise ValueError(f"need at least 6 pairs, got {a.size}")
    diff = a - b
    diff = diff[diff != 0.0]
    m = diff.size
    if m == 0:
        raise ValueError("all differences are zero; the test statistic is undefined")
    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if m <= 12:
        signs = (np.arange(1 << m)[:, None] >> np.arange(m)) & 1
        w_all = signs @ ranks
        p_low = float(np.mean(w_all <= w_plus + 1e-9))
        p_high = float(np.mean(w_all >= w_plus - 1e-9))
        return min(1.0, 2.0 * min(p_low, p_high))

    mean = m * (m + 1) / 4.0
    var = m * (m + 1) * (2 * m + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
