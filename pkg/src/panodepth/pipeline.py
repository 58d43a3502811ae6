"""Depth decoding, training losses, evaluation metrics, and Adam.

The decoder mirrors the encoder: from the fused bottleneck it repeats
(bilinear x2 upsample -> concat the matching skip -> 3x3 conv -> relu)
until full resolution, then a 3x3 head, a sigmoid, and a multiply by the
depth cap -- so predictions live in [0, max_depth] by construction.

Losses follow the reverse-Huber recipe: absolute error up to the threshold
c, quadratic above, applied to raw residuals and to forward-difference
image derivatives (a stencil contributes only when both taps are valid).
All reductions are means over valid pixels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import ErpFeaturePyramid
from .params import Conv3x3
from .tensor import Tensor, UsageError

BERHU_C = 0.2


def default_decoder_widths(channels: int, blocks: int = 5) -> list[int]:
    widths = []
    w = channels
    for _ in range(blocks):
        widths.append(max(w, 4))
        w //= 2
    return widths


class DepthDecoder:
    """Skip-connected upsampling decoder with a bounded depth head."""

    def __init__(self, rng, in_channels: int, skip_widths: dict,
                 widths=None, max_depth: float = 10.0, dtype=np.float32,
                 head_bias: float = -1.4, bottleneck_scale: int = 32):
        # skip_widths: {scale: channel width}; each block halves the scale
        # and consumes the matching skip, except the final block to scale 1.
        self.max_depth = float(max_depth)
        blocks = int(np.log2(bottleneck_scale))
        if 2 ** blocks != bottleneck_scale:
            raise UsageError("bottleneck scale must be a power of two")
        widths = list(widths) if widths is not None else \
            default_decoder_widths(in_channels, blocks)
        if len(widths) != blocks:
            raise UsageError(f"decoder needs {blocks} block widths for "
                             f"bottleneck scale {bottleneck_scale}")
        self.scales = [bottleneck_scale // 2 ** (i + 1) for i in range(blocks)]
        self.convs = []
        cin = in_channels
        for scale, cout in zip(self.scales, widths):
            skip = skip_widths.get(scale, 0) if scale > 1 else 0
            self.convs.append(Conv3x3(rng, cin + skip, cout, dtype))
            cin = cout
        self.head = Conv3x3(rng, cin, 1, dtype, bias_init=head_bias)

    def forward(self, bottleneck: Tensor, pyramid: ErpFeaturePyramid) -> Tensor:
        """bottleneck: (C, H/32, W/32) -> depth (1, H, W) in [0, max_depth]."""
        x = bottleneck
        for scale, conv in zip(self.scales, self.convs):
            _, h, w = x.shape
            x = T.bilinear_resize(x, 2 * h, 2 * w)
            if scale > 1:
                x = T.concat([x, pyramid.at_scale(scale)], axis=0)
            x = T.relu(conv(x))
        logits = self.head(x)
        return T.sigmoid(logits) * self.max_depth

    def param_slots(self):
        slots = []
        for scale, conv in zip(self.scales, self.convs):
            slots += conv.slots(f"dec.to_scale{scale}")
        slots += self.head.slots("dec.head")
        return slots


# ---------------------------------------------------------------------------
# Losses


def _as_map(pred: Tensor) -> Tensor:
    if pred.ndim == 3 and pred.shape[0] == 1:
        return T.reshape(pred, pred.shape[1:])
    if pred.ndim == 2:
        return pred
    raise UsageError(f"expected (H, W) or (1, H, W) prediction, got {pred.shape}")


def berhu(residual: Tensor, c: float = BERHU_C) -> Tensor:
    """Elementwise reverse Huber: |x| below c, (x^2 + c^2) / (2c) above.

    Branch selection uses forward values only; at |x| = c both branches and
    both derivatives coincide, so the split is gradient-safe.
    """
    absr = T.absolute(residual)
    small = Tensor((absr.data <= c).astype(residual.data.dtype))
    quad = (T.mul(residual, residual) + c * c) * (1.0 / (2.0 * c))
    return T.add(T.mul(small, absr), T.mul(1.0 - small, quad))


def _masked_mean(values: Tensor, mask: np.ndarray, what: str) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        raise UsageError(f"{what}: no valid pixels")
    m = Tensor(mask.astype(values.data.dtype))
    return T.tensor_sum(T.mul(values, m)) * (1.0 / count)


def berhu_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray,
               c: float = BERHU_C) -> Tensor:
    """Mean reverse-Huber depth error over valid pixels."""
    p = _as_map(pred)
    gt = np.asarray(gt)
    if p.shape != gt.shape or gt.shape != mask.shape:
        raise UsageError(f"shape mismatch: pred {p.shape}, gt {gt.shape}, "
                         f"mask {mask.shape}")
    residual = T.sub(p, Tensor(gt, dtype=p.data.dtype))
    return _masked_mean(berhu(residual, c), mask, "berhu_loss")


def _horizontal_diff(x: Tensor) -> Tensor:
    w = x.shape[1]
    xt = T.permute(x, (1, 0))
    d = T.sub(T.gather_rows(xt, np.arange(1, w)), T.gather_rows(xt, np.arange(w - 1)))
    return T.permute(d, (1, 0))


def _vertical_diff(x: Tensor) -> Tensor:
    h = x.shape[0]
    return T.sub(T.gather_rows(x, np.arange(1, h)), T.gather_rows(x, np.arange(h - 1)))


def gradient_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray,
                  c: float = BERHU_C) -> Tensor:
    """Reverse-Huber on forward-difference derivative residuals.

    Horizontal and vertical terms are mean-reduced separately over stencils
    whose two taps are both valid, then summed.
    """
    p = _as_map(pred)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    gx = np.diff(gt, axis=1)
    gy = np.diff(gt, axis=0)
    mx = mask[:, 1:] & mask[:, :-1]
    my = mask[1:, :] & mask[:-1, :]
    rx = T.sub(_horizontal_diff(p), Tensor(gx, dtype=p.data.dtype))
    ry = T.sub(_vertical_diff(p), Tensor(gy, dtype=p.data.dtype))
    lx = _masked_mean(berhu(rx, c), mx, "gradient_loss/horizontal")
    ly = _masked_mean(berhu(ry, c), my, "gradient_loss/vertical")
    return T.add(lx, ly)


def total_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray,
               c: float = BERHU_C) -> Tensor:
    """Depth term plus derivative term."""
    return T.add(berhu_loss(pred, gt, mask, c), gradient_loss(pred, gt, mask, c))


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    valid_px: int

    def to_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel,
                "rmse": self.rmse, "d1": self.delta1, "d2": self.delta2,
                "d3": self.delta3, "valid_px": self.valid_px}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                    alpha: float = 1.25) -> MetricsReport:
    """Standard depth metrics over valid pixels with positive ground truth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise UsageError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
                         f"mask {mask.shape}")
    nonpos = mask & (gt <= 0)
    if nonpos.any():
        warnings.warn(f"compute_metrics: excluded {int(nonpos.sum())} "
                      f"masked pixels with nonpositive ground truth")
    use = mask & (gt > 0)
    n = int(use.sum())
    if n == 0:
        raise UsageError("compute_metrics: no valid pixels with positive depth")
    p = pred[use]
    g = gt[use]
    diff = p - g
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    deltas = [float(np.mean(ratio < alpha ** t)) for t in (1, 2, 3)]
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
        valid_px=n,
    )


# ---------------------------------------------------------------------------
# Optimizer


def adam_step(params: list, grads: list, state: dict | None,
              lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One Adam update (no schedule); mutates param data, returns the state."""
    if state is None:
        state = {"t": 0,
                 "m": [np.zeros_like(p.data) for p in params],
                 "v": [np.zeros_like(p.data) for p in params]}
    if len(grads) != len(params) or len(state["m"]) != len(params):
        raise UsageError("adam_step: params/grads/state lengths differ")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = np.asarray(g, dtype=p.data.dtype)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class Adam:
    """Holds optimizer state; reads `.grad` off the tracked tensors."""

    def __init__(self, params: list, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict | None = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        self.state = adam_step(self.params, grads, self.state, self.lr,
                               self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
