"""Single-channel image container, normalization, augmentation and file I/O.

Images are plain 2-D numpy arrays (row-major, float32 by convention). All
public operations return finite values and never mutate their inputs.

Two file formats are supported:

* the native raster format (magic ``LMC1``): ``LMC1`` + u32-LE version=1 +
  u32-LE height + u32-LE width + height*width float32-LE scalars, row-major.
  Round-trips are bit-exact.
* binary PGM (``P5``) import, 8- or 16-bit; samples are divided by the
  declared maxval, so an 8-bit pixel 255 reads as 1.0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionOverflowError, FileFormatError, TruncatedFileError

# A 2-D float array; "Image2D" in the docs below.
Image2D = np.ndarray

MODALITIES = ("BF", "PC", "DIC")
ORGANELLES = ("nucleus", "mitochondria", "tubulin", "actin")

LMCI_MAGIC = b"LMC1"
LMCI_VERSION = 1

# Reject rasters above ~256 Mpx: anything larger in a desk-scale file is a
# corrupt or hostile header.
MAX_PIXELS = 1 << 28

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class SampleMeta:
    """Study / modality / organelle tags attached to a sample.

    ``organelle`` is only meaningful for target images and may be None.
    """

    study_id: str
    modality: str
    organelle: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        if self.organelle is not None and self.organelle not in ORGANELLES:
            raise ValueError(f"unknown organelle {self.organelle!r}, expected one of {ORGANELLES}")


def require_image(img: Image2D) -> Image2D:
    """Validate the 2-D finite-image contract and return the array."""
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains NaN or Inf values")
    return img


def normalize_min_max(img: Image2D) -> Image2D:
    """Affinely map an image to [0, 1]: min -> 0, max -> 1.

    A constant image maps to all zeros (no signal).
    """
    img = require_image(img)
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return np.zeros_like(img, dtype=np.float32)
    out = (img.astype(np.float64) - lo) / (hi - lo)
    return out.astype(np.float32)


def flip(img: Image2D, axis: str) -> Image2D:
    """Mirror an image horizontally (reverse columns) or vertically (reverse rows)."""
    img = np.asarray(img)
    if axis == HORIZONTAL:
        return img[:, ::-1].copy()
    if axis == VERTICAL:
        return img[::-1, :].copy()
    raise ValueError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Fold integer indices into [0, n-1] by mirror reflection about the borders."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _bilinear_sample_reflect(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates with reflect-border handling."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    r0r = _reflect_indices(r0, h)
    r1r = _reflect_indices(r0 + 1, h)
    c0r = _reflect_indices(c0, w)
    c1r = _reflect_indices(c0 + 1, w)
    v00 = img[r0r, c0r]
    v01 = img[r0r, c1r]
    v10 = img[r1r, c0r]
    v11 = img[r1r, c1r]
    top = v00 * (1.0 - fc) + v01 * fc
    bot = v10 * (1.0 - fc) + v11 * fc
    return top * (1.0 - fr) + bot * fr


def elastic_transform(img: Image2D, seed: int, grid_spacing: int, magnitude: float) -> Image2D:
    """Warp an image with a random smooth displacement field.

    Per-node displacements are drawn uniformly from [-magnitude, +magnitude]
    on a coarse lattice with ``grid_spacing`` pixels between nodes, bilinearly
    upsampled to a dense field, and the image is resampled with bilinear
    interpolation and reflected borders. Deterministic for a given seed;
    ``magnitude=0`` reproduces the input exactly.
    """
    img = require_image(img)
    if grid_spacing < 4:
        raise ValueError(f"grid_spacing must be >= 4, got {grid_spacing}")
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    if magnitude == 0:
        return img.copy()

    h, w = img.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    nr = int(np.ceil((h - 1) / grid_spacing)) + 1
    nc = int(np.ceil((w - 1) / grid_spacing)) + 1
    lattice = rng.uniform(-magnitude, magnitude, size=(2, nr, nc))

    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr = _bilinear_sample_reflect(lattice[0], rr / grid_spacing, cc / grid_spacing)
    dc = _bilinear_sample_reflect(lattice[1], rr / grid_spacing, cc / grid_spacing)

    out = _bilinear_sample_reflect(img.astype(np.float64), rr + dr, cc + dc)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def resize_bilinear(img: Image2D, out_height: int, out_width: int) -> Image2D:
    """Resize with bilinear interpolation (corner-aligned sampling grid)."""
    img = require_image(img)
    if out_height < 1 or out_width < 1:
        raise ValueError(f"invalid output size {out_height}x{out_width}")
    h, w = img.shape
    rows = np.zeros(out_height) if out_height == 1 else np.arange(out_height) * ((h - 1) / (out_height - 1))
    cols = np.zeros(out_width) if out_width == 1 else np.arange(out_width) * ((w - 1) / (out_width - 1))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = _bilinear_sample_reflect(img.astype(np.float64), rr, cc)
    return out.astype(np.float32)


def write_image(path: str | Path, img: Image2D) -> None:
    """Write an image in the native format (bit-exact round-trip)."""
    img = require_image(img)
    data = np.ascontiguousarray(img, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(LMCI_MAGIC)
        fh.write(struct.pack("<III", LMCI_VERSION, h, w))
        fh.write(data.tobytes())


def read_image(path: str | Path) -> Image2D:
    """Read an image, dispatching on magic bytes (native format or PGM P5)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == LMCI_MAGIC:
        return _parse_lmci(blob)
    if blob[:2] == b"P5":
        return _parse_pgm(blob)
    raise FileFormatError(f"{path}: unrecognized magic bytes {blob[:4]!r}")


def _parse_lmci(blob: bytes) -> Image2D:
    if len(blob) < 16:
        raise TruncatedFileError(f"native image header truncated ({len(blob)} bytes)")
    version, h, w = struct.unpack_from("<III", blob, 4)
    if version != LMCI_VERSION:
        raise FileFormatError(f"unsupported native image version {version}")
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise DimensionOverflowError(f"implausible image dimensions {h}x{w}")
    expected = 16 + 4 * h * w
    if len(blob) < expected:
        raise TruncatedFileError(f"payload ends at {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=h * w, offset=16)
    img = data.reshape(h, w).copy()
    if not np.isfinite(img).all():
        raise FileFormatError("native image payload contains non-finite values")
    return img


def _parse_pgm(blob: bytes) -> Image2D:
    """Parse a binary PGM (P5). 16-bit samples are big-endian per the convention."""
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # skip whitespace and '#' comment lines between header tokens
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            eol = blob.find(b"\n", pos)
            if eol < 0:
                raise TruncatedFileError("PGM header ends inside a comment")
            pos = eol + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token:
            raise TruncatedFileError("PGM header truncated")
        if not token.isdigit():
            raise FileFormatError(f"malformed PGM header token {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if not 1 <= maxval <= 65535:
        raise FileFormatError(f"PGM maxval {maxval} out of range [1, 65535]")
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise DimensionOverflowError(f"implausible PGM dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = h * w * dtype.itemsize
    payload = blob[pos : pos + expected]
    if len(payload) < expected:
        raise TruncatedFileError(f"PGM payload has {len(payload)} bytes, expected {expected}")
    samples = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return (samples.astype(np.float64) / maxval).astype(np.float32)
