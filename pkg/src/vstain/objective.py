"""Combined training objective: value and analytic gradient for each term.

The loss between a prediction P and ground truth GT is

    combined = alpha * MSE + beta * (1 - SSIM) + lambda * (1 - PCC) + omega * CD

with default coefficients (1.0, 0.2, 0.1, 0.1). SSIM and PCC are similarity
scores, so they enter through ``1 - value``; the loss is nonnegative and
vanishes only when every term does. All terms are evaluated in double
precision regardless of the input dtype so that central finite differences
are a meaningful check of the analytic gradients.

Degenerate cases are pinned rather than left to produce NaN: a constant
image yields PCC value 0 with zero gradient, and a zero vector yields cosine
distance 1 with zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import Image2D

DEFAULT_WEIGHTS = (1.0, 0.2, 0.1, 0.1)


@dataclass(frozen=True)
class ObjectiveWeights:
    """Coefficients of the four loss terms (MSE, 1-SSIM, 1-PCC, CD)."""

    alpha: float = DEFAULT_WEIGHTS[0]
    beta: float = DEFAULT_WEIGHTS[1]
    lam: float = DEFAULT_WEIGHTS[2]
    omega: float = DEFAULT_WEIGHTS[3]

    def __post_init__(self):
        for name, v in zip(("alpha", "beta", "lam", "omega"), self.as_tuple()):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.lam, self.omega)


@dataclass(frozen=True)
class SsimConfig:
    """Local-statistics window and stabilizers for SSIM on [0, data_range] images."""

    window_size: int = 11
    gaussian_sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizers must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class LossReport:
    """Per-term values (ssim/pcc as similarities), the combined loss, and its gradient."""

    mse: float
    ssim: float
    pcc: float
    cd: float
    combined: float
    grad: Image2D = field(repr=False)


def _check_pair(p: Image2D, gt: Image2D) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p)
    gt = np.asarray(gt)
    if p.ndim != 2 or p.size == 0:
        raise ValueError(f"expected non-empty 2-D images, got shape {p.shape}")
    if p.shape != gt.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {gt.shape}")
    return p.astype(np.float64), gt.astype(np.float64)


def mse(p: Image2D, gt: Image2D) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2*(P-GT)/N."""
    p, gt = _check_pair(p, gt)
    diff = p - gt
    value = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return value, grad


def _gaussian_profile(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _corr_valid_1d(x: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    """Valid-mode correlation of a 2-D array with a 1-D kernel along one axis."""
    win = np.lib.stride_tricks.sliding_window_view(x, g.size, axis=axis)
    return win @ g


def _corr_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Valid-mode correlation with the separable kernel outer(g, g)."""
    return _corr_valid_1d(_corr_valid_1d(x, g, axis=1), g, axis=0)


def _conv_full(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Full-mode convolution with outer(g, g): the adjoint of `_corr_valid`."""
    k = g.size
    padded = np.pad(x, k - 1, mode="constant")
    return _corr_valid(padded, g[::-1])


def ssim(p: Image2D, gt: Image2D, cfg: SsimConfig = SsimConfig()) -> tuple[float, np.ndarray]:
    """Mean local SSIM over all valid window centers, with its analytic gradient.

    Local means/variances/covariance are Gaussian-weighted. Identical inputs
    score 1.0; constant pairs also score 1.0 because the stabilizers dominate
    the vanishing statistics.
    """
    p, gt = _check_pair(p, gt)
    if min(p.shape) < cfg.window_size:
        raise ValueError(f"image {p.shape} smaller than SSIM window {cfg.window_size}")
    g = _gaussian_profile(cfg.window_size, cfg.gaussian_sigma)
    c1, c2 = cfg.c1, cfg.c2

    ux = _corr_valid(p, g)
    uy = _corr_valid(gt, g)
    exx = _corr_valid(p * p, g)
    eyy = _corr_valid(gt * gt, g)
    exy = _corr_valid(p * gt, g)
    vx = exx - ux * ux
    vy = eyy - uy * uy
    cxy = exy - ux * uy

    a1 = 2.0 * ux * uy + c1
    a2 = 2.0 * cxy + c2
    b1 = ux * ux + uy * uy + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    value = float(np.mean(s))

    # Backpropagate mean(s) through the local statistics: s depends on p via
    # ux, E[p^2] and E[p*gt]; each is a valid correlation whose adjoint is a
    # full convolution with the same (symmetric) kernel.
    m = s.size
    g_ux = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2) / m
    g_exx = -(s / b2) / m
    g_exy = (2.0 * s / a2) / m
    grad = _conv_full(g_ux, g) + _conv_full(g_exx, g) * 2.0 * p + _conv_full(g_exy, g) * gt
    return value, grad


def pcc(p: Image2D, gt: Image2D) -> tuple[float, np.ndarray]:
    """Pearson correlation over flattened pixels, with its analytic gradient.

    If either image has zero variance the correlation is undefined; the
    declared degenerate result is value 0 with a zero gradient.
    """
    p, gt = _check_pair(p, gt)
    if p.size < 2:
        raise ValueError("PCC needs at least 2 pixels")
    x = (p - p.mean()).ravel()
    y = (gt - gt.mean()).ravel()
    xn = float(np.sqrt(x @ x))
    yn = float(np.sqrt(y @ y))
    if xn == 0.0 or yn == 0.0:
        return 0.0, np.zeros_like(p)
    r = float(x @ y) / (xn * yn)
    grad = (y / (xn * yn) - r * x / (xn * xn)).reshape(p.shape)
    value = float(np.clip(r, -1.0, 1.0))
    return value, grad


def cosine_distance(p: Image2D, gt: Image2D) -> tuple[float, np.ndarray]:
    """1 - cosine similarity over flattened pixels, with its analytic gradient.

    A zero vector on either side yields the declared degenerate result:
    value 1 (maximally dissimilar) with a zero gradient.
    """
    p, gt = _check_pair(p, gt)
    x = p.ravel()
    y = gt.ravel()
    xn = float(np.sqrt(x @ x))
    yn = float(np.sqrt(y @ y))
    if xn == 0.0 or yn == 0.0:
        return 1.0, np.zeros_like(p)
    c = float(x @ y) / (xn * yn)
    grad = -(y / (xn * yn) - c * x / (xn * xn)).reshape(p.shape)
    return 1.0 - c, grad


def combined(
    p: Image2D,
    gt: Image2D,
    weights: ObjectiveWeights = ObjectiveWeights(),
    cfg: SsimConfig = SsimConfig(),
) -> LossReport:
    """Weighted sum of the four terms and its gradient with respect to P."""
    alpha, beta, lam, omega = weights.as_tuple()
    mse_v, mse_g = mse(p, gt)
    ssim_v, ssim_g = ssim(p, gt, cfg) if beta != 0.0 else (1.0, 0.0)
    pcc_v, pcc_g = pcc(p, gt) if lam != 0.0 else (1.0, 0.0)
    cd_v, cd_g = cosine_distance(p, gt) if omega != 0.0 else (0.0, 0.0)
    value = alpha * mse_v + beta * (1.0 - ssim_v) + lam * (1.0 - pcc_v) + omega * cd_v
    grad = alpha * mse_g - beta * ssim_g - lam * pcc_g + omega * cd_g
    return LossReport(mse_v, ssim_v, pcc_v, cd_v, value, np.asarray(grad))


TERM_FUNCS = {
    "mse": mse,
    "ssim": ssim,
    "pcc": pcc,
    "cd": cosine_distance,
}


def grad_check(term: str, p: Image2D, gt: Image2D, step: float = 1e-6, **kwargs) -> float:
    """Worst-case relative error of a term's analytic gradient vs central differences.

    ``term`` is one of "mse", "ssim", "pcc", "cd" or "combined". The relative
    error per pixel is |analytic - numeric| / max(|numeric|, 1e-6).
    """
    if term == "combined":
        def fn(img):
            return combined(img, gt, **kwargs).combined

        analytic = combined(p, gt, **kwargs).grad
    elif term in TERM_FUNCS:
        func = TERM_FUNCS[term]

        def fn(img):
            return func(img, gt, **kwargs)[0]

        analytic = func(p, gt, **kwargs)[1]
    else:
        raise ValueError(f"unknown term {term!r}")
    numeric = finite_difference_grad(fn, np.array(p, dtype=np.float64), step)
    return max_relative_error(analytic, numeric)


def finite_difference_grad(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function over every array entry."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = fn(x)
        x[idx] = orig - step
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|n_i|, floor); the floor keeps near-zero entries sane."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
