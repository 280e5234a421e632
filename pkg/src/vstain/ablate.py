"""Ablation harness: strategy / patch-size / objective matrices on one dataset.

Each axis trains desk-scale models and reports the per-organelle aggregate
table (nucleus and mitochondria with MAE/SSIM/PCC/CD/ED, tubulin and actin
with SSIM/PCC). The report headers state the scope caveats: orderings
measured at toy scale carry no claim beyond it, and the architecture axis
is limited to the built-in micro encoder-decoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .image import ORGANELLES, normalize_min_max, read_image
from .metrics import (
    ORGANELLE_METRICS,
    AggregateReport,
    MetricRow,
    aggregate,
    evaluate_pair,
    format_table,
)
from .model import SEPARATE, SHARED, ModelConfig
from .objective import ObjectiveWeights
from .training import (
    TRAIN,
    VALIDATION,
    DatasetIndex,
    TrainConfig,
    TrainResult,
    build_index,
    predict_image,
    predict_resampled,
    train,
)

OBJECTIVE_VARIANTS: dict[str, ObjectiveWeights] = {
    "Combined": ObjectiveWeights(1.0, 0.2, 0.1, 0.1),
    "MSE": ObjectiveWeights(1.0, 0.0, 0.0, 0.0),
    "SSIM": ObjectiveWeights(0.0, 1.0, 0.0, 0.0),
    "PCC": ObjectiveWeights(0.0, 0.0, 1.0, 0.0),
}

REPORT_NOTES = [
    "toy-scale ablation on a synthetic dataset; orderings carry no claim beyond this scale",
    "architecture axis: limited to the built-in micro encoder-decoder",
]


@dataclass(frozen=True)
class AblateOptions:
    manifest: Path
    out_dir: Path
    axes: tuple[str, ...] = ("strategy", "patch", "objective")
    steps: int = 80
    seed: int = 0
    levels: int = 3
    base_channels: int = 8
    default_patch: int = 128
    patch_sizes: tuple[int, ...] = (512, 256, 128)
    resample_size: int = 256
    lr: float = 1e-3
    split_ratio: float = 0.8
    eval_limit: int = 6


def _trainable_organelles(index: DatasetIndex) -> list[str]:
    return [
        org
        for org in ORGANELLES
        if index.indices(TRAIN, org) and index.indices(VALIDATION, org)
    ]


def _train_separate(index: DatasetIndex, opts: AblateOptions, **over) -> dict[str, TrainResult]:
    base = dict(
        patch_size=opts.default_patch, steps=opts.steps, lr=opts.lr, seed=opts.seed, val_interval=0
    )
    base.update(over)
    models = {}
    for org in _trainable_organelles(index):
        model_cfg = ModelConfig(
            levels=opts.levels, base_channels=opts.base_channels, strategy=SEPARATE, seed=opts.seed
        )
        models[org] = train(index, model_cfg, TrainConfig(organelle=org, **base))
    return models


def _evaluate(
    index: DatasetIndex,
    opts: AblateOptions,
    predict_fn,
    organelles: list[str],
) -> AggregateReport:
    rows: list[MetricRow] = []
    for org in organelles:
        taken = 0
        for i in index.indices(VALIDATION, org):
            rec = index.records[i]
            img = read_image(rec.input_path)
            gt = normalize_min_max(read_image(rec.targets[org]))
            rows.append(evaluate_pair(predict_fn(org, img), gt, org, rec.input_path.name))
            taken += 1
            if taken >= opts.eval_limit:
                break
    return aggregate(rows)


def _patch_predictor(models: dict[str, TrainResult], patch: int):
    def predict_fn(org, img):
        res = models[org]
        return predict_image(res.params, res.config, img, None, patch, max(1, patch // 2))

    return predict_fn


def run_strategy_axis(index: DatasetIndex, opts: AblateOptions) -> list[tuple[str, AggregateReport]]:
    variants = []
    sep = _train_separate(index, opts)
    variants.append(
        ("Separate-Encoder", _evaluate(index, opts, _patch_predictor(sep, opts.default_patch), sorted(sep)))
    )

    shared_cfg = ModelConfig(
        levels=opts.levels, base_channels=opts.base_channels, strategy=SHARED, seed=opts.seed
    )
    shared = train(
        index,
        shared_cfg,
        TrainConfig(
            strategy=SHARED,
            patch_size=opts.default_patch,
            steps=opts.steps,
            lr=opts.lr,
            seed=opts.seed,
            val_interval=0,
        ),
    )

    def shared_predict(org, img):
        return predict_image(
            shared.params, shared.config, img, org, opts.default_patch, max(1, opts.default_patch // 2)
        )

    variants.append(
        ("Shared-Encoder", _evaluate(index, opts, shared_predict, _trainable_organelles(index)))
    )
    return variants


def run_patch_axis(index: DatasetIndex, opts: AblateOptions) -> list[tuple[str, AggregateReport]]:
    variants = []
    for patch in opts.patch_sizes:
        models = _train_separate(index, opts, patch_size=patch)
        variants.append(
            (f"{patch}x{patch}", _evaluate(index, opts, _patch_predictor(models, patch), sorted(models)))
        )

    size = opts.resample_size
    models = _train_separate(index, opts, resample_to=size)

    def resample_predict(org, img):
        res = models[org]
        return predict_resampled(res.params, res.config, img, None, size)

    variants.append(
        (f"Resampling ({size}x{size})", _evaluate(index, opts, resample_predict, sorted(models)))
    )
    return variants


def run_objective_axis(index: DatasetIndex, opts: AblateOptions) -> list[tuple[str, AggregateReport]]:
    variants = []
    for label, weights in OBJECTIVE_VARIANTS.items():
        models = _train_separate(index, opts, weights=weights)
        variants.append(
            (label, _evaluate(index, opts, _patch_predictor(models, opts.default_patch), sorted(models)))
        )
    return variants


AXIS_RUNNERS = {
    "strategy": run_strategy_axis,
    "patch": run_patch_axis,
    "objective": run_objective_axis,
}


def _write_axis(
    out_dir: Path, axis: str, variants: list[tuple[str, AggregateReport]]
) -> dict[str, object]:
    notes = [f"{axis} axis"] + REPORT_NOTES
    table = format_table(variants, notes)
    txt_path = out_dir / f"{axis}_axis.txt"
    txt_path.write_text(table, encoding="utf-8")
    csv_path = out_dir / f"{axis}_axis.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("variant,organelle,metric,mean,n\n")
        for label, report in variants:
            for org in ORGANELLES:
                if org not in report.counts:
                    continue
                for metric in ORGANELLE_METRICS[org]:
                    fh.write(
                        f"{label},{org},{metric},{report.get(org, metric)!r},{report.counts[org]}\n"
                    )
    return {"txt": txt_path, "csv": csv_path, "table": table}


def run_ablation(opts: AblateOptions) -> dict[str, dict[str, object]]:
    """Run the requested axes and write one table pair (txt + csv) per axis."""
    for axis in opts.axes:
        if axis not in AXIS_RUNNERS:
            raise ValueError(f"unknown ablation axis {axis!r}, expected one of {sorted(AXIS_RUNNERS)}")
    opts.out_dir.mkdir(parents=True, exist_ok=True)
    index = build_index(opts.manifest, split_ratio=opts.split_ratio, seed=opts.seed)
    results: dict[str, dict[str, object]] = {}
    for axis in opts.axes:
        variants = AXIS_RUNNERS[axis](index, opts)
        results[axis] = _write_axis(opts.out_dir, axis, variants)
    return results
