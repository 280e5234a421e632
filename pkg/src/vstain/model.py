"""Micro residual encoder-decoder with hand-written forward/backward and Adam.

The network maps a single-channel image to a single-channel prediction in
(0, 1). Layer list for ``levels`` L and ``base_channels`` B (C_l = B * 2^l):

* encoder level l (l = 0..L-1): a residual block of two 3x3 convolutions
  (reflect padding, stride 1), each followed by leaky ReLU; the block input
  is added to the block output when channel counts match, otherwise the
  first convolution's activation serves as the residual tap;
* a stride-2 3x3 convolution (+ leaky ReLU) between levels, doubling the
  channel count; the deepest block is the bottleneck;
* decoder level l (l = L-2..0): nearest-neighbor x2 upsample, 3x3 conv
  (+ leaky ReLU) halving channels, channel concatenation with the matching
  encoder block output ([up, skip] order), then a residual block as above;
* a 1x1 convolution head + sigmoid.

Two routing strategies exist: ``separate`` (one full network per organelle)
and ``shared`` (one encoder trunk; the bottleneck is routed to one of four
organelle-specific decoder/head groups, whose tensor names carry the
organelle prefix).

All parameters live in a flat dict name -> ndarray (float32 by default);
``backward`` returns a gradient dict over every parameter, with exact zeros
for decoders the routed pass never touched. Computation follows the dtype
of the parameters, so casting them to float64 yields a double-precision
path suitable for finite-difference verification.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import FileFormatError, TruncatedFileError
from .image import ORGANELLES, Image2D

SEPARATE = "separate"
SHARED = "shared"

CHECKPOINT_MAGIC = b"LMCK"
CHECKPOINT_VERSION = 1

ModelParams = dict[str, np.ndarray]
ParamGrads = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    leaky_slope: float = 0.01
    strategy: str = SEPARATE
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.strategy not in (SEPARATE, SHARED):
            raise ValueError(f"strategy must be {SEPARATE!r} or {SHARED!r}, got {self.strategy!r}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * (1 << l) for l in range(self.levels)]


@dataclass
class ForwardCache:
    """Activations retained for one backward pass; consumed exactly once."""

    organelle: str | None
    layers: dict = field(repr=False, default_factory=dict)
    consumed: bool = False


def _decoder_prefixes(cfg: ModelConfig) -> list[str]:
    if cfg.strategy == SHARED:
        return [f"{org}." for org in ORGANELLES]
    return [""]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The declared layer list as an ordered name -> shape map."""
    ch = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(cfg.levels):
        cin = cfg.in_channels if l == 0 else ch[l]
        shapes[f"enc{l}.conv1.w"] = (ch[l], cin, 3, 3)
        shapes[f"enc{l}.conv1.b"] = (ch[l],)
        shapes[f"enc{l}.conv2.w"] = (ch[l], ch[l], 3, 3)
        shapes[f"enc{l}.conv2.b"] = (ch[l],)
        if l < cfg.levels - 1:
            shapes[f"down{l}.w"] = (ch[l + 1], ch[l], 3, 3)
            shapes[f"down{l}.b"] = (ch[l + 1],)
    for pfx in _decoder_prefixes(cfg):
        for l in range(cfg.levels - 2, -1, -1):
            shapes[f"{pfx}dec{l}.up.w"] = (ch[l], ch[l + 1], 3, 3)
            shapes[f"{pfx}dec{l}.up.b"] = (ch[l],)
            shapes[f"{pfx}dec{l}.conv1.w"] = (ch[l], 2 * ch[l], 3, 3)
            shapes[f"{pfx}dec{l}.conv1.b"] = (ch[l],)
            shapes[f"{pfx}dec{l}.conv2.w"] = (ch[l], ch[l], 3, 3)
            shapes[f"{pfx}dec{l}.conv2.b"] = (ch[l],)
        shapes[f"{pfx}head.w"] = (cfg.out_channels, ch[0], 1, 1)
        shapes[f"{pfx}head.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases; seed-deterministic."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def count_parameters(params: ModelParams, prefix: str = "") -> int:
    return sum(v.size for k, v in params.items() if k.startswith(prefix))


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# primitive ops (forward + backward pairs)

def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    """Reflect-pad by 1 and unfold 3x3 windows into a (Ho*Wo, Cin*9) matrix."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    cin, ho, wo = win.shape[:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * 9)
    return cols, ho, wo


def _conv3_forward(x, w, b, stride):
    cols, ho, wo = _im2col(x, stride)
    y = cols @ w.reshape(w.shape[0], -1).T + b
    return y.T.reshape(w.shape[0], ho, wo), (x, stride)


def _conv3_backward(gy, cache, w):
    x, stride = cache
    cols, ho, wo = _im2col(x, stride)  # recomputed: cheaper than caching the matrix
    cout = w.shape[0]
    gy_mat = gy.reshape(cout, ho * wo)
    gw = (gy_mat @ cols).reshape(w.shape)
    gb = gy_mat.sum(axis=1)
    gcols = (gy_mat.T @ w.reshape(cout, -1)).reshape(ho, wo, x.shape[0], 3, 3)
    gcols = gcols.transpose(2, 0, 1, 3, 4)  # (Cin, Ho, Wo, 3, 3)

    cin, h, w_ = x.shape
    gxp = np.zeros((cin, h + 2, w_ + 2), dtype=gy.dtype)
    for di in range(3):
        for dj in range(3):
            gxp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += gcols[
                :, :, :, di, dj
            ]
    # fold the reflect-padding gradient back onto its interior source pixels
    gx = gxp[:, 1 : h + 1, 1 : w_ + 1].copy()
    gx[:, 1, :] += gxp[:, 0, 1 : w_ + 1]
    gx[:, h - 2, :] += gxp[:, h + 1, 1 : w_ + 1]
    gx[:, :, 1] += gxp[:, 1 : h + 1, 0]
    gx[:, :, w_ - 2] += gxp[:, 1 : h + 1, w_ + 1]
    gx[:, 1, 1] += gxp[:, 0, 0]
    gx[:, 1, w_ - 2] += gxp[:, 0, w_ + 1]
    gx[:, h - 2, 1] += gxp[:, h + 1, 0]
    gx[:, h - 2, w_ - 2] += gxp[:, h + 1, w_ + 1]
    return gx, gw, gb


def _conv1_forward(x, w, b):
    y = np.tensordot(w[:, :, 0, 0], x, axes=([1], [0])) + b[:, None, None]
    return y, x


def _conv1_backward(gy, x, w):
    gw = np.tensordot(gy, x, axes=([1, 2], [1, 2]))[:, :, None, None]
    gb = gy.sum(axis=(1, 2))
    gx = np.tensordot(w[:, :, 0, 0].T, gy, axes=([1], [0]))
    return gx, gw, gb


def _lrelu_forward(x, slope):
    mask = x >= 0
    return np.where(mask, x, x * slope), mask


def _lrelu_backward(gy, mask, slope):
    return np.where(mask, gy, gy * slope)


def _upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(gy):
    c, h2, w2 = gy.shape
    return gy.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# residual block

def _block_forward(params, prefix, x, slope):
    y1, c1 = _conv3_forward(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], 1)
    a1, m1 = _lrelu_forward(y1, slope)
    y2, c2 = _conv3_forward(a1, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], 1)
    a2, m2 = _lrelu_forward(y2, slope)
    same = x.shape[0] == a2.shape[0]
    out = a2 + (x if same else a1)
    return out, (c1, m1, c2, m2, same)


def _block_backward(grads, params, prefix, gy, cache, slope):
    c1, m1, c2, m2, same = cache
    ga1, gw2, gb2 = _conv3_backward(
        _lrelu_backward(gy, m2, slope), c2, params[f"{prefix}.conv2.w"]
    )
    grads[f"{prefix}.conv2.w"] += gw2
    grads[f"{prefix}.conv2.b"] += gb2
    if not same:
        ga1 = ga1 + gy
    gx, gw1, gb1 = _conv3_backward(
        _lrelu_backward(ga1, m1, slope), c1, params[f"{prefix}.conv1.w"]
    )
    grads[f"{prefix}.conv1.w"] += gw1
    grads[f"{prefix}.conv1.b"] += gb1
    if same:
        gx = gx + gy
    return gx


# ---------------------------------------------------------------------------
# full network

def _routing_prefix(cfg: ModelConfig, organelle: str | None) -> str:
    if cfg.strategy == SHARED:
        if organelle not in ORGANELLES:
            raise ValueError(f"shared strategy needs a valid organelle, got {organelle!r}")
        return f"{organelle}."
    return ""


def forward(
    params: ModelParams, cfg: ModelConfig, img: Image2D, organelle: str | None = None
) -> tuple[Image2D, ForwardCache]:
    """Run the network on one image; returns the prediction and a backward cache."""
    pfx = _routing_prefix(cfg, organelle)
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    factor = 1 << (cfg.levels - 1)
    h, w = img.shape
    if cfg.levels > 1 and (h % factor or w % factor or h // factor < 2 or w // factor < 2):
        raise ValueError(
            f"input {h}x{w} must be divisible by {factor} with quotient >= 2 "
            f"for levels={cfg.levels}"
        )

    dtype = params[f"{pfx}head.b"].dtype
    slope = cfg.leaky_slope
    layers: dict = {}
    t = img.astype(dtype)[None]

    skips: list[np.ndarray] = []
    for l in range(cfg.levels):
        t, bc = _block_forward(params, f"enc{l}", t, slope)
        layers[f"enc{l}"] = bc
        if l < cfg.levels - 1:
            skips.append(t)
            y, dc = _conv3_forward(t, params[f"down{l}.w"], params[f"down{l}.b"], 2)
            t, dm = _lrelu_forward(y, slope)
            layers[f"down{l}"] = (dc, dm)

    for l in range(cfg.levels - 2, -1, -1):
        up = _upsample2_forward(t)
        y, uc = _conv3_forward(up, params[f"{pfx}dec{l}.up.w"], params[f"{pfx}dec{l}.up.b"], 1)
        a, um = _lrelu_forward(y, slope)
        layers[f"dec{l}.up"] = (uc, um)
        t = np.concatenate([a, skips[l]], axis=0)
        t, bc = _block_forward(params, f"{pfx}dec{l}", t, slope)
        layers[f"dec{l}"] = bc

    y, hc = _conv1_forward(t, params[f"{pfx}head.w"], params[f"{pfx}head.b"])
    pred = expit(y)
    layers["head"] = hc
    layers["sigmoid"] = pred

    cache = ForwardCache(organelle=organelle if cfg.strategy == SHARED else None, layers=layers)
    return pred[0], cache


def zero_grads(cfg: ModelConfig, dtype=np.float32) -> ParamGrads:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg).items()}


def backward(
    params: ModelParams, cfg: ModelConfig, cache: ForwardCache, grad_out: Image2D
) -> ParamGrads:
    """Backpropagate d(loss)/d(prediction) to every parameter.

    Returns a gradient dict covering all parameters; decoder groups the
    routed forward pass never touched carry exact zeros. The cache is
    consumed and cannot be reused.
    """
    if cache.consumed:
        raise RuntimeError("forward cache already consumed by a previous backward pass")
    cache.consumed = True
    pfx = _routing_prefix(cfg, cache.organelle)
    slope = cfg.leaky_slope
    layers = cache.layers

    dtype = params[f"{pfx}head.b"].dtype
    grads = zero_grads(cfg, dtype=dtype)

    pred = layers["sigmoid"]
    g = np.asarray(grad_out).astype(dtype)[None] * pred * (1.0 - pred)

    g, gw, gb = _conv1_backward(g, layers["head"], params[f"{pfx}head.w"])
    grads[f"{pfx}head.w"] += gw
    grads[f"{pfx}head.b"] += gb

    skip_grads: dict[int, np.ndarray] = {}
    ch = cfg.channels
    for l in range(cfg.levels - 1):
        g = _block_backward(grads, params, f"{pfx}dec{l}", g, layers[f"dec{l}"], slope)
        g_up, skip_grads[l] = g[: ch[l]], g[ch[l] :]
        uc, um = layers[f"dec{l}.up"]
        g_up, gw, gb = _conv3_backward(
            _lrelu_backward(g_up, um, slope), uc, params[f"{pfx}dec{l}.up.w"]
        )
        grads[f"{pfx}dec{l}.up.w"] += gw
        grads[f"{pfx}dec{l}.up.b"] += gb
        g = _upsample2_backward(g_up)

    for l in range(cfg.levels - 1, -1, -1):
        g = _block_backward(grads, params, f"enc{l}", g, layers[f"enc{l}"], slope)
        if l > 0:
            dc, dm = layers[f"down{l - 1}"]
            g, gw, gb = _conv3_backward(
                _lrelu_backward(g, dm, slope), dc, params[f"down{l - 1}.w"]
            )
            grads[f"down{l - 1}.w"] += gw
            grads[f"down{l - 1}.b"] += gb
            g = g + skip_grads[l - 1]

    return grads


# ---------------------------------------------------------------------------
# optimizer

AdamState = dict[str, tuple[np.ndarray, np.ndarray]]


def init_adam_state(params: ModelParams) -> AdamState:
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}


def adam_step(
    params: ModelParams,
    grads: ParamGrads,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place; ``t`` is the 1-based step index."""
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m, v = state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints

def _config_to_json(cfg: ModelConfig) -> bytes:
    payload = {
        "levels": cfg.levels,
        "base_channels": cfg.base_channels,
        "in_channels": cfg.in_channels,
        "out_channels": cfg.out_channels,
        "leaky_slope": cfg.leaky_slope,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str | Path) -> None:
    """Serialize config + tensors (float32 LE, sorted by name; bit-exact round-trip)."""
    cfg_json = _config_to_json(cfg)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            tensor = np.ascontiguousarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint and validate its tensors against the declared config."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad checkpoint magic")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig(**json.loads(rd.take(rd.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FileFormatError(f"invalid checkpoint config: {exc}") from exc

    params: ModelParams = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        if rank > 8:
            raise FileFormatError(f"tensor {name!r} declares implausible rank {rank}")
        shape = tuple(rd.u32() for _ in range(rank))
        if any(d > (1 << 24) for d in shape):
            raise FileFormatError(f"tensor {name!r} declares implausible shape {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count > (1 << 28):
            raise FileFormatError(f"tensor {name!r} declares implausible size {count}")
        data = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.copy()

    expected = param_shapes(cfg)
    if set(params) != set(expected) or any(params[k].shape != expected[k] for k in expected):
        raise FileFormatError("checkpoint tensors inconsistent with its config")
    return params, cfg
