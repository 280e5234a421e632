"""Dataset indexing, sampling, the training loop, and whole-image prediction.

Datasets are described by a UTF-8 tab-separated manifest with header

    input<TAB>study<TAB>modality<TAB>nucleus<TAB>mitochondria<TAB>tubulin<TAB>actin

where an empty target cell means the organelle has no ground truth for that
record and paths are relative to the manifest's directory. Records are split
into train/validation at the image level by default (a study-level mode is
available), and training draws a study uniformly at random before drawing a
record within it, so small studies are not drowned out by large ones.

Sparse targets are handled by masking: a training step only backpropagates
loss terms for organelles whose ground truth exists, so unused decoder
groups receive exactly-zero gradients under the shared-encoder strategy.

Training history is written as CSV
``step,mse,ssim_term,pcc_term,cd_term,combined,val_ssim,val_pcc`` where the
term columns are the unweighted summands (``ssim_term = 1 - ssim`` etc.,
summed over the organelles present in the step's sample) and validation
cells are empty except on validation steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import ManifestError, TrainingDivergedError
from .image import (
    HORIZONTAL,
    MODALITIES,
    ORGANELLES,
    VERTICAL,
    Image2D,
    SampleMeta,
    elastic_transform,
    flip,
    normalize_min_max,
    read_image,
    resize_bilinear,
)
from .model import SEPARATE, SHARED, ModelConfig, ModelParams
from .objective import ObjectiveWeights, SsimConfig, combined, pcc, ssim
from .patches import assemble, extract, hann_window, plan_grid, reflect_pad_to

MANIFEST_COLUMNS = ("input", "study", "modality") + ORGANELLES

TRAIN = "train"
VALIDATION = "validation"


@dataclass(frozen=True)
class SampleRecord:
    input_path: Path
    meta: SampleMeta
    targets: dict[str, Path]


@dataclass(frozen=True)
class DatasetIndex:
    records: list[SampleRecord]
    studies: dict[str, list[int]]
    split: list[str]

    def indices(self, split: str, organelle: str | None = None) -> list[int]:
        return [
            i
            for i, rec in enumerate(self.records)
            if self.split[i] == split and (organelle is None or organelle in rec.targets)
        ]


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = SEPARATE
    organelle: str | None = None
    patch_size: int = 512
    stride: int | None = None
    steps: int = 500
    batch_size: int = 1
    lr: float = 1e-3
    seed: int = 0
    augment_flips: bool = True
    augment_elastic: bool | None = None  # None = on only for separate actin training
    elastic_spacing: int = 32
    elastic_magnitude: float = 4.0
    resample_to: int | None = None  # fixed-resolution baseline instead of patch crops
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    val_interval: int = 50
    val_limit: int = 8

    def __post_init__(self):
        if self.strategy not in (SEPARATE, SHARED):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == SEPARATE and self.organelle not in ORGANELLES:
            raise ValueError("separate strategy needs an organelle to train")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.patch_size < 8:
            raise ValueError(f"patch_size must be >= 8, got {self.patch_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.patch_size // 2)

    @property
    def elastic_enabled(self) -> bool:
        if self.augment_elastic is not None:
            return self.augment_elastic
        return self.strategy == SEPARATE and self.organelle == "actin"


@dataclass
class TrainingExample:
    input_patch: Image2D
    targets: dict[str, Image2D]
    present: frozenset[str]


@dataclass(frozen=True)
class StepSummary:
    """Loss terms of one training step, summed over the organelles it touched."""

    mse: float
    ssim_term: float
    pcc_term: float
    cd_term: float
    combined: float


@dataclass
class HistoryRow:
    step: int
    mse: float
    ssim_term: float
    pcc_term: float
    cd_term: float
    combined: float
    val_ssim: float | None = None
    val_pcc: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    history: list[HistoryRow]


# ---------------------------------------------------------------------------
# manifest + split

def read_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse a dataset manifest; malformed lines are reported with their number."""
    path = Path(path)
    base = path.parent
    records: list[SampleRecord] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError("empty manifest")
    header = tuple(lines[0].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise ManifestError(f"bad header {header!r}, expected {MANIFEST_COLUMNS!r}", line=1)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"expected {len(MANIFEST_COLUMNS)} columns, got {len(cells)}", lineno)
        input_cell, study, modality = cells[0], cells[1], cells[2]
        if not input_cell:
            raise ManifestError("empty input path", lineno)
        if modality not in MODALITIES:
            raise ManifestError(f"unknown modality {modality!r}", lineno)
        if not study:
            raise ManifestError("empty study id", lineno)
        targets = {org: base / cell for org, cell in zip(ORGANELLES, cells[3:]) if cell}
        if not targets:
            raise ManifestError("record has no targets", lineno)
        records.append(SampleRecord(base / input_cell, SampleMeta(study, modality), targets))
    return records


def build_index(
    manifest_path: str | Path,
    split_ratio: float = 0.8,
    seed: int = 0,
    split_level: str = "image",
) -> DatasetIndex:
    """Index a manifest and assign a deterministic train/validation split.

    ``split_level="image"`` shuffles records directly; ``"study"`` assigns
    whole studies to the training side until the requested fraction is met.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must be in (0, 1), got {split_ratio}")
    records = read_manifest(manifest_path)
    studies: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        studies.setdefault(rec.meta.study_id, []).append(i)

    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(records)
    n_train = int(round(n * split_ratio))
    split = [VALIDATION] * n
    if split_level == "image":
        perm = rng.permutation(n)
        for i in perm[:n_train]:
            split[i] = TRAIN
    elif split_level == "study":
        order = rng.permutation(sorted(studies))
        assigned = 0
        for study in order:
            if assigned >= n_train:
                break
            for i in studies[study]:
                split[i] = TRAIN
            assigned += len(studies[study])
    else:
        raise ValueError(f"split_level must be 'image' or 'study', got {split_level!r}")
    return DatasetIndex(records, studies, split)


def study_balanced_sample(
    index: DatasetIndex, rng: np.random.Generator, organelle: str | None = None
) -> SampleRecord:
    """Draw a study uniformly, then a training record uniformly within it."""
    pool: dict[str, list[int]] = {}
    for i in index.indices(TRAIN, organelle):
        pool.setdefault(index.records[i].meta.study_id, []).append(i)
    if not pool:
        raise ValueError("no eligible training records"
                         + (f" with {organelle} targets" if organelle else ""))
    study_ids = sorted(pool)
    study = study_ids[int(rng.integers(len(study_ids)))]
    members = pool[study]
    return index.records[members[int(rng.integers(len(members)))]]


# ---------------------------------------------------------------------------
# example construction

def make_training_example(
    record: SampleRecord, cfg: TrainConfig, rng: np.random.Generator
) -> TrainingExample:
    """Load, normalize and crop/augment one record.

    The same crop, flips and elastic warp are applied to the input and every
    present target; absent organelles stay absent (the mask).
    """
    images = {"__input__": normalize_min_max(read_image(record.input_path))}
    for org, path in record.targets.items():
        images[org] = normalize_min_max(read_image(path))

    if cfg.resample_to is not None:
        size = cfg.resample_to
        images = {k: resize_bilinear(v, size, size) for k, v in images.items()}
    else:
        n = cfg.patch_size
        images = {k: reflect_pad_to(v, n, n) for k, v in images.items()}
        h, w = images["__input__"].shape
        r = int(rng.integers(h - n + 1))
        c = int(rng.integers(w - n + 1))
        images = {k: v[r : r + n, c : c + n].copy() for k, v in images.items()}

    if cfg.augment_flips:
        if rng.random() < 0.5:
            images = {k: flip(v, HORIZONTAL) for k, v in images.items()}
        if rng.random() < 0.5:
            images = {k: flip(v, VERTICAL) for k, v in images.items()}
    if cfg.elastic_enabled:
        warp_seed = int(rng.integers(np.iinfo(np.int64).max))
        images = {
            k: elastic_transform(v, warp_seed, cfg.elastic_spacing, cfg.elastic_magnitude)
            for k, v in images.items()
        }

    input_patch = images.pop("__input__")
    return TrainingExample(input_patch, images, frozenset(images))


# ---------------------------------------------------------------------------
# training

def train_step(
    params: ModelParams,
    model_cfg: ModelConfig,
    example: TrainingExample,
    weights: ObjectiveWeights,
    ssim_cfg: SsimConfig,
    organelle: str | None = None,
) -> tuple[StepSummary, model_mod.ParamGrads]:
    """Loss and parameter gradients for one example (no optimizer update).

    Separate strategy: the single configured organelle. Shared strategy: the
    loss is summed over the organelles present in the example, so decoders
    of absent organelles receive exactly-zero gradients.
    """
    if model_cfg.strategy == SEPARATE:
        routes = [(None, organelle)]
    else:
        routes = [(org, org) for org in ORGANELLES if org in example.present]
        if not routes:
            raise ValueError("example has no targets to train on")

    total = np.zeros(5, dtype=np.float64)  # mse, 1-ssim, 1-pcc, cd, combined
    grads: model_mod.ParamGrads | None = None
    for route, target_org in routes:
        target = example.targets[target_org]
        pred, cache = model_mod.forward(params, model_cfg, example.input_patch, route)
        report = combined(pred, target, weights, ssim_cfg)
        step_grads = model_mod.backward(
            params, model_cfg, cache, report.grad.astype(pred.dtype)
        )
        if grads is None:
            grads = step_grads
        else:
            for name in grads:
                grads[name] += step_grads[name]
        total += (
            report.mse,
            1.0 - report.ssim,
            1.0 - report.pcc,
            report.cd,
            report.combined,
        )
    return StepSummary(*total), grads


def _validation_scores(
    params: ModelParams,
    model_cfg: ModelConfig,
    index: DatasetIndex,
    organelles: list[str],
    patch_size: int,
    stride: int,
    limit: int,
) -> tuple[float, float] | None:
    pairs = []
    for i in index.indices(VALIDATION):
        rec = index.records[i]
        for org in organelles:
            if org in rec.targets:
                pairs.append((rec, org))
        if len(pairs) >= limit:
            break
    if not pairs:
        return None
    ssim_vals, pcc_vals = [], []
    for rec, org in pairs[:limit]:
        img = read_image(rec.input_path)
        gt = normalize_min_max(read_image(rec.targets[org]))
        pred = predict_image(params, model_cfg, img, org, patch_size, stride)
        ssim_vals.append(ssim(pred, gt)[0])
        pcc_vals.append(pcc(pred, gt)[0])
    return float(np.mean(ssim_vals)), float(np.mean(pcc_vals))


def train(index: DatasetIndex, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainResult:
    """Run the sample -> forward -> loss -> backward -> Adam loop.

    Fully deterministic given the seeds in both configs. Aborts with
    TrainingDivergedError if the loss stops being finite.
    """
    if train_cfg.strategy != model_cfg.strategy:
        raise ValueError(
            f"strategy mismatch: train={train_cfg.strategy!r} model={model_cfg.strategy!r}"
        )
    organelle = train_cfg.organelle if train_cfg.strategy == SEPARATE else None

    params = model_mod.init_params(model_cfg)
    state = model_mod.init_adam_state(params)
    seed_root = np.random.SeedSequence(train_cfg.seed)
    rng_sample, rng_augment = (np.random.Generator(np.random.PCG64(s)) for s in seed_root.spawn(2))

    val_organelles = [organelle] if organelle else list(ORGANELLES)
    history: list[HistoryRow] = []
    for t in range(1, train_cfg.steps + 1):
        grads = model_mod.zero_grads(model_cfg)
        acc = np.zeros(5, dtype=np.float64)
        for _ in range(train_cfg.batch_size):
            record = study_balanced_sample(index, rng_sample, organelle)
            example = make_training_example(record, train_cfg, rng_augment)
            summary, ex_grads = train_step(
                params, model_cfg, example, train_cfg.weights, train_cfg.ssim, organelle
            )
            for name in grads:
                grads[name] += ex_grads[name]
            acc += (summary.mse, summary.ssim_term, summary.pcc_term, summary.cd_term,
                    summary.combined)
        if train_cfg.batch_size > 1:
            scale = np.float32(1.0 / train_cfg.batch_size)
            for name in grads:
                grads[name] *= scale
            acc /= train_cfg.batch_size
        if not np.isfinite(acc[4]):
            raise TrainingDivergedError(f"non-finite loss at step {t}")
        model_mod.adam_step(params, grads, state, lr=train_cfg.lr, t=t)

        row = HistoryRow(t, acc[0], acc[1], acc[2], acc[3], acc[4])
        if train_cfg.val_interval > 0 and t % train_cfg.val_interval == 0:
            scores = _validation_scores(
                params, model_cfg, index, val_organelles,
                train_cfg.patch_size, train_cfg.effective_stride, train_cfg.val_limit,
            )
            if scores is not None:
                row.val_ssim, row.val_pcc = scores
        history.append(row)
    return TrainResult(params, model_cfg, history)


def write_history(history: list[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mse", "ssim_term", "pcc_term", "cd_term", "combined",
                         "val_ssim", "val_pcc"])
        for row in history:
            writer.writerow([
                row.step, repr(row.mse), repr(row.ssim_term), repr(row.pcc_term),
                repr(row.cd_term), repr(row.combined),
                "" if row.val_ssim is None else repr(row.val_ssim),
                "" if row.val_pcc is None else repr(row.val_pcc),
            ])


def end_to_end_gradient_error(
    model_cfg: ModelConfig,
    size: int = 8,
    seed: int = 0,
    weights: ObjectiveWeights | None = None,
    ssim_cfg: SsimConfig | None = None,
    step: float = 1e-6,
) -> float:
    """Worst relative error of d(combined loss)/d(parameter) vs central differences.

    Runs in double precision on a random input/target pair; the SSIM window
    defaults to 5 so the check works on tiny images.
    """
    weights = weights or ObjectiveWeights()
    ssim_cfg = ssim_cfg or SsimConfig(window_size=5, gaussian_sigma=1.0)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (size, size))
    gt = rng.uniform(0.0, 1.0, (size, size))
    organelle = ORGANELLES[0] if model_cfg.strategy == SHARED else None

    params = model_mod.cast_params(model_mod.init_params(model_cfg), np.float64)
    pred, cache = model_mod.forward(params, model_cfg, x, organelle)
    report = combined(pred, gt, weights, ssim_cfg)
    grads = model_mod.backward(params, model_cfg, cache, report.grad)

    def loss() -> float:
        p, _ = model_mod.forward(params, model_cfg, x, organelle)
        return combined(p, gt, weights, ssim_cfg).combined

    worst = 0.0
    for name, tensor in params.items():
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            hi = loss()
            tensor[idx] = orig - step
            lo = loss()
            tensor[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(grads[name][idx] - numeric) / max(abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# inference

def predict_image(
    params: ModelParams,
    model_cfg: ModelConfig,
    img: Image2D,
    organelle: str | None = None,
    patch_size: int = 512,
    stride: int | None = None,
) -> Image2D:
    """Normalize, tile, run the network per patch and blend with the Hann window.

    Images smaller than the patch are reflect-padded, predicted, and cropped
    back. The assembled output is not rescaled in any way.
    """
    stride = stride if stride is not None else max(1, patch_size // 2)
    x = normalize_min_max(img)
    h, w = x.shape
    padded = reflect_pad_to(x, patch_size, patch_size)
    grid = plan_grid(padded.shape[0], padded.shape[1], patch_size, stride)
    window = hann_window(patch_size)
    preds = [
        model_mod.forward(params, model_cfg, patch, organelle)[0]
        for patch in extract(padded, grid)
    ]
    out = assemble(preds, grid, window)
    return out[:h, :w]


def predict_resampled(
    params: ModelParams,
    model_cfg: ModelConfig,
    img: Image2D,
    organelle: str | None = None,
    size: int = 256,
) -> Image2D:
    """Fixed-resolution baseline: resize, single forward pass, resize back."""
    x = normalize_min_max(img)
    h, w = x.shape
    pred = model_mod.forward(params, model_cfg, resize_bilinear(x, size, size), organelle)[0]
    return resize_bilinear(pred, h, w)
