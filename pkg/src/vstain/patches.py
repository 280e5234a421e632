"""Overlapping patch grids and Hann-window weighted reassembly.

Large images are decomposed into fixed-size square patches on a regular
stride grid (with a final anchor snapped to the image border so every pixel
is covered), processed patch-by-patch, and blended back with a raised-cosine
(Hann) weight window so overlapping predictions transition smoothly.

The Hann profile is zero at patch edges, which would leave border pixels
covered only by zero weight; the window is therefore floored at a small
epsilon. The weighted average is exact for identical overlapping values, so
extract -> assemble reproduces the input for any strictly positive window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import Image2D, require_image

DEFAULT_WINDOW_FLOOR = 1e-3


class PatchTooLargeError(ValueError):
    """Image is smaller than the requested patch; caller should reflect-pad."""


@dataclass(frozen=True)
class PatchGrid:
    """Planned top-left patch anchors for one image."""

    patch_size: int
    stride: int
    positions: tuple[tuple[int, int], ...]
    image_height: int
    image_width: int


@dataclass(frozen=True)
class WindowMap:
    """Per-pixel blending weights for one patch; strictly positive, flip-symmetric."""

    patch_size: int
    weights: np.ndarray = field(repr=False)


def _axis_anchors(dim: int, patch_size: int, stride: int) -> list[int]:
    anchors = list(range(0, dim - patch_size + 1, stride))
    last = dim - patch_size
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def plan_grid(height: int, width: int, patch_size: int, stride: int) -> PatchGrid:
    """Plan a full-coverage grid of patch anchors.

    Anchors run 0, stride, 2*stride, ... per axis, plus a final anchor at
    ``dim - patch_size`` when the stride sequence does not land there.

    Raises:
        PatchTooLargeError: the image is smaller than ``patch_size`` on
            either axis (the caller should reflect-pad and retry).
    """
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if not 1 <= stride <= patch_size:
        raise ValueError(f"stride must be in [1, patch_size], got {stride}")
    if height < patch_size or width < patch_size:
        raise PatchTooLargeError(
            f"image {height}x{width} is smaller than patch {patch_size}; reflect-pad first"
        )
    rows = _axis_anchors(height, patch_size, stride)
    cols = _axis_anchors(width, patch_size, stride)
    positions = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(patch_size, stride, positions, height, width)


def hann_window(patch_size: int, floor_epsilon: float = DEFAULT_WINDOW_FLOOR) -> WindowMap:
    """Separable 2-D Hann window, floored at ``floor_epsilon``.

    1-D profile: w(i) = 0.5 * (1 - cos(2*pi*i / (N-1))), zero at both ends,
    one at the center for odd N. The 2-D map is the outer product, then
    max'ed elementwise with the floor so border weights stay positive.
    """
    if patch_size < 2:
        raise ValueError(f"patch_size must be >= 2, got {patch_size}")
    if not 0.0 < floor_epsilon < 1.0:
        raise ValueError(f"floor_epsilon must be in (0, 1), got {floor_epsilon}")
    i = np.arange(patch_size, dtype=np.float64)
    profile = 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (patch_size - 1)))
    # mirror the first half so flip symmetry is exact, not just within rounding
    profile[(patch_size + 1) // 2 :] = profile[: patch_size // 2][::-1]
    weights = np.maximum(np.outer(profile, profile), floor_epsilon)
    return WindowMap(patch_size, weights)


def extract(img: Image2D, grid: PatchGrid) -> list[Image2D]:
    """Cut the planned patches out of an image (pure reads, patches are copies)."""
    img = require_image(img)
    if img.shape != (grid.image_height, grid.image_width):
        raise ValueError(
            f"grid was planned for {grid.image_height}x{grid.image_width}, image is {img.shape}"
        )
    n = grid.patch_size
    return [img[r : r + n, c : c + n].copy() for r, c in grid.positions]


def assemble(patches: list[Image2D], grid: PatchGrid, window: WindowMap) -> Image2D:
    """Blend patches back into a full image by window-weighted averaging.

    output(p) = sum_k w_k(p) * patch_k(p) / sum_k w_k(p) over the patches
    covering pixel p. The floored window plus full grid coverage guarantee a
    positive denominator everywhere. Accumulation runs in float64; the final
    quotient is cast to float32. No other scaling is applied.
    """
    if not grid.positions:
        raise ValueError("empty grid")
    if len(patches) != len(grid.positions):
        raise ValueError(f"got {len(patches)} patches for {len(grid.positions)} grid positions")
    if window.patch_size != grid.patch_size:
        raise ValueError("window and grid patch sizes differ")
    n = grid.patch_size
    acc = np.zeros((grid.image_height, grid.image_width), dtype=np.float64)
    den = np.zeros_like(acc)
    w = window.weights
    for patch, (r, c) in zip(patches, grid.positions):
        patch = np.asarray(patch)
        if patch.shape != (n, n):
            raise ValueError(f"patch at {(r, c)} has shape {patch.shape}, expected {(n, n)}")
        acc[r : r + n, c : c + n] += w * patch
        den[r : r + n, c : c + n] += w
    if not (den > 0.0).all():
        raise ValueError("grid does not cover every output pixel")
    return (acc / den).astype(np.float32)


def reflect_pad_to(img: Image2D, min_height: int, min_width: int) -> Image2D:
    """Reflect-pad an image on the bottom/right up to the requested minimum size."""
    img = require_image(img)
    pad_h = max(0, min_height - img.shape[0])
    pad_w = max(0, min_width - img.shape[1])
    if pad_h == 0 and pad_w == 0:
        return img
    return np.pad(img, ((0, pad_h), (0, pad_w)), mode="reflect")
