"""Procedural desk-scale datasets: label-free-style inputs with organelle targets.

Each image places a handful of elliptical cells and derives four target
channels from them: nucleus (smooth cores), mitochondria (granular texture
inside the cytoplasm), tubulin (radial ridge filaments), actin (boundary
bands). The input is a deterministic per-modality mixture of the same
structures (BF: low-contrast absorption, PC: center-surround halos, DIC:
directional shading) plus seeded Gaussian noise, so each target is a local,
learnable function of the input.

Per-study appearance (cell density, texture scale, shading direction)
varies so study-balanced sampling has a measurable effect. All randomness
derives from per-record seed sequences, making the generated tree
bit-identical across reruns and safe to parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .image import MODALITIES, ORGANELLES, write_image

DEFAULT_SPARSITY = {"nucleus": 1.0, "mitochondria": 0.8, "tubulin": 0.3, "actin": 0.15}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_studies: int = 3
    images_per_study: int = 20
    image_size: int = 256
    sparsity: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SPARSITY))
    modality_mix: dict[str, float] = field(
        default_factory=lambda: {m: 1.0 / 3.0 for m in MODALITIES}
    )
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.image_size < 128:
            raise ValueError(f"image_size must be >= 128, got {self.image_size}")
        if self.n_studies < 1 or self.images_per_study < 1:
            raise ValueError("need at least one study and one image per study")
        for org in ORGANELLES:
            p = self.sparsity.get(org)
            if p is None or not 0.0 <= p <= 1.0:
                raise ValueError(f"sparsity[{org!r}] must be in [0, 1], got {p}")
        total = sum(self.modality_mix.get(m, 0.0) for m in MODALITIES)
        if total <= 0:
            raise ValueError("modality_mix must have positive total weight")


@dataclass(frozen=True)
class StudyAppearance:
    cells_lo: int
    cells_hi: int
    texture_sigma: float
    radius_scale: float
    background: float
    shade_angle: float


def study_appearance(cfg: SynthConfig, study: int) -> StudyAppearance:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 7, study])))
    lo = int(rng.integers(3, 6))
    return StudyAppearance(
        cells_lo=lo,
        cells_hi=lo + int(rng.integers(2, 5)),
        texture_sigma=float(rng.uniform(1.5, 4.0)),
        radius_scale=float(rng.uniform(0.8, 1.3)),
        background=float(rng.uniform(0.72, 0.9)),
        shade_angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _render_record(
    cfg: SynthConfig, look: StudyAppearance, rng: np.random.Generator
) -> tuple[str, np.ndarray, dict[str, np.ndarray]]:
    size = cfg.image_size
    mix = np.array([cfg.modality_mix.get(m, 0.0) for m in MODALITIES], dtype=np.float64)
    modality = MODALITIES[int(rng.choice(len(MODALITIES), p=mix / mix.sum()))]

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    nucleus = np.zeros((size, size))
    cyto_gap = np.ones((size, size))
    tubulin = np.zeros((size, size))
    actin = np.zeros((size, size))

    n_cells = int(rng.integers(look.cells_lo, look.cells_hi + 1))
    for _ in range(n_cells):
        cy, cx = rng.uniform(0.12 * size, 0.88 * size, size=2)
        a = rng.uniform(0.07, 0.13) * size * look.radius_scale
        b = rng.uniform(0.07, 0.13) * size * look.radius_scale
        theta = rng.uniform(0.0, np.pi)
        core = rng.uniform(0.3, 0.5)
        spokes = int(rng.integers(4, 8))
        phase = rng.uniform(0.0, 2.0 * np.pi)

        dx, dy = xx - cx, yy - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        q = u * u + v * v

        interior = 1.0 / (1.0 + np.exp(np.clip((q - 1.0) / 0.08, -60, 60)))
        cyto_gap *= 1.0 - interior
        nucleus = np.maximum(nucleus, np.exp(-q / (core * core)))
        phi = np.arctan2(v, u)
        rays = np.maximum(np.cos(spokes * phi + phase), 0.0) ** 9
        tubulin = np.maximum(tubulin, rays * np.clip(1.0 - q / 1.2, 0.0, 1.0))
        actin = np.maximum(actin, np.exp(-(((q - 1.0) / 0.12) ** 2)))

    cyto = 1.0 - cyto_gap
    grain = rng.standard_normal((size, size))
    band = gaussian_filter(grain, look.texture_sigma) - gaussian_filter(grain, 2 * look.texture_sigma)
    sd = band.std()
    if sd > 0:
        band /= sd
    mito = np.clip(band, 0.0, None) * cyto
    peak = mito.max()
    if peak > 0:
        mito *= 0.9 / peak

    targets = {
        "nucleus": nucleus,
        "mitochondria": mito,
        "tubulin": tubulin,
        "actin": actin,
    }
    structure = 0.5 * nucleus + 0.25 * cyto + 0.3 * mito + 0.35 * tubulin + 0.45 * actin

    if modality == "BF":
        img = look.background - 0.45 * structure
    elif modality == "PC":
        img = 0.5 + 1.5 * (structure - gaussian_filter(structure, 6.0))
    else:  # DIC
        gy, gx = np.gradient(gaussian_filter(structure, 1.0))
        img = 0.5 + 3.0 * (np.cos(look.shade_angle) * gx + np.sin(look.shade_angle) * gy)
    img = img + rng.normal(0.0, cfg.noise_sigma, size=(size, size))

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    targets = {k: np.clip(v, 0.0, 1.0).astype(np.float32) for k, v in targets.items()}
    return modality, img, targets


def _draw_presence(cfg: SynthConfig, rng: np.random.Generator) -> list[str]:
    present = [org for org in ORGANELLES if rng.random() < cfg.sparsity[org]]
    if not present:
        # a record must keep at least one target; fall back to the most likely one
        present = [max(ORGANELLES, key=lambda o: cfg.sparsity[o])]
    return present


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write the dataset tree and its manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.tsv"
    lines = ["\t".join(("input", "study", "modality") + ORGANELLES)]

    for s in range(cfg.n_studies):
        look = study_appearance(cfg, s)
        study_id = f"study-{s:03d}"
        study_dir = out_dir / study_id
        study_dir.mkdir(exist_ok=True)
        for i in range(cfg.images_per_study):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, s, i])))
            modality, img, targets = _render_record(cfg, look, rng)
            present = _draw_presence(cfg, rng)

            stem = f"img_{i:03d}"
            write_image(study_dir / f"{stem}.lmci", img)
            cells = []
            for org in ORGANELLES:
                if org in present:
                    rel = f"{study_id}/{stem}.{org}.lmci"
                    write_image(out_dir / rel, targets[org])
                    cells.append(rel)
                else:
                    cells.append("")
            lines.append("\t".join([f"{study_id}/{stem}.lmci", study_id, modality] + cells))

    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path
