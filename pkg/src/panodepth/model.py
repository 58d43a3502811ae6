"""Full model assembly, configuration, checkpointing, and overfit training.

The model wires the four learnable pieces together: ERP pyramid encoder ->
point encoder -> bi-attention fusion at the deepest scale -> skip-connected
decoder.  `fusion` selects the bottleneck combination: "gated" (default),
"add", "concat", or "erp" (fusion bypassed entirely; the ERP bottleneck
feeds the decoder unchanged).
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import b2f as b2f_mod
from . import tensor as T
from .b2f import B2FWeights
from .encoders import ErpEncoder, PointEncoder, point_feature_count
from .icosap import build_mesh, face_center_point_set
from .params import load_parameters as _load_parameters
from .params import load_param_arrays as _load_param_arrays
from .params import named_parameters as _named_parameters
from .pipeline import Adam, DepthDecoder, berhu_loss, compute_metrics, \
    gradient_loss
from .sphere import erp_pixel_dirs
from .tensor import NumericError, Tensor, UsageError, backward

FUSION_MODES = ("gated", "add", "concat", "erp")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 128
    channels: int = 32          # deepest ERP width; fusion dim defaults to it
    dim: int | None = None
    level: int = 3              # icosahedron subdivision level
    blocks: int = 3             # transition-down blocks in the point encoder
    knn: int = 8
    seed: int = 0
    max_depth: float = 10.0
    fusion: str = "gated"
    encoder_widths: list | None = None
    decoder_widths: list | None = None
    head_bias: float = -1.4     # sigmoid head starts near 0.2 * max_depth

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise UsageError("config: width must equal 2 * height")
        if self.fusion not in FUSION_MODES:
            raise UsageError(f"config: unknown fusion mode {self.fusion!r}")
        point_feature_count(self.level, self.blocks)  # validates the pair
        if self.dim is not None and self.dim != self.channels:
            # bottleneck and skips share the decoder; keep the widths equal
            raise UsageError("config: dim must equal channels (or be omitted)")

    @property
    def fusion_dim(self) -> int:
        return self.channels if self.dim is None else self.dim

    @property
    def point_count(self) -> int:
        return point_feature_count(self.level, self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise UsageError(f"config: unknown model keys {sorted(extra)}")
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 2000
    log_every: int = 50
    berhu_c: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise UsageError(f"config: unknown train keys {sorted(extra)}")
        return cls(**d)


class DepthModel:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.erp = ErpEncoder(rng, cfg.channels, cfg.encoder_widths, dtype)
        if self.erp.widths[-1] != cfg.channels:
            raise UsageError("config: deepest encoder width must equal channels")
        self.point = PointEncoder(rng, cfg.channels, cfg.blocks, cfg.knn, dtype)
        self.fusion = B2FWeights.create(cfg.channels, cfg.fusion_dim, rng, dtype)
        scale = self.erp.max_scale
        if cfg.height % scale or cfg.width % scale:
            raise UsageError(f"config: {cfg.height}x{cfg.width} not divisible "
                             f"by bottleneck scale {scale}")
        skips = {2 ** (i + 1): w for i, w in enumerate(self.erp.widths)}
        self.decoder = DepthDecoder(rng, cfg.fusion_dim, skips,
                                    cfg.decoder_widths, cfg.max_depth, dtype,
                                    cfg.head_bias, bottleneck_scale=scale)
        self.bottleneck_dirs = erp_pixel_dirs(cfg.height // scale,
                                              cfg.width // scale)

    # -- data preparation ----------------------------------------------------

    def prepare_points(self, img: np.ndarray) -> np.ndarray:
        """ERP image -> (20 * 4^level, 6) face-center records."""
        mesh = build_mesh(self.cfg.level)
        return face_center_point_set(mesh, img).points

    # -- forward -------------------------------------------------------------

    def forward(self, img: np.ndarray, points: np.ndarray) -> Tensor:
        """(H, W, 3) image + point records -> (1, H, W) depth prediction."""
        pyramid = self.erp.forward(img)
        deep = pyramid.deepest                      # (C, h, w)
        fe = T.permute(deep, (1, 2, 0))             # (h, w, C)
        if self.cfg.fusion == "erp":
            fused = fe
        else:
            pf = self.point.forward(points)
            fused = b2f_mod.b2f_forward(fe, pf.features, pf.coords,
                                        self.bottleneck_dirs, self.fusion,
                                        mode=self.cfg.fusion)
        bottleneck = T.permute(fused, (2, 0, 1))    # (d, h, w)
        return self.decoder.forward(bottleneck, pyramid)

    # -- parameters ----------------------------------------------------------

    def param_slots(self):
        return (self.erp.param_slots() + self.point.param_slots()
                + self.fusion.param_slots() + self.decoder.param_slots())

    def named_parameters(self):
        return _named_parameters(self.param_slots())

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def load_parameters(self, tensors):
        _load_parameters(self.param_slots(), tensors)

    def load_param_arrays(self, arrays):
        _load_param_arrays(self.param_slots(), arrays)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, path: str):
        save_checkpoint(path, self.named_parameters())

    def load_checkpoint(self, path: str):
        stored = load_checkpoint(path)
        arrays = []
        for name, p in self.named_parameters():
            if name not in stored:
                raise UsageError(f"checkpoint missing tensor {name!r}")
            arrays.append(stored[name])
        self.load_param_arrays(arrays)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "E36W", u32 tensor count, then per tensor
# u32 name length + UTF-8 name, u32 rank, u32 dims, f32 LE payload.

CHECKPOINT_MAGIC = b"E36W"


def save_checkpoint(path: str, named_tensors):
    named_tensors = list(named_tensors)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(named_tensors)))
        for name, t in named_tensors:
            raw = name.encode("utf-8")
            data = t.numpy() if isinstance(t, Tensor) else np.asarray(t)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_checkpoint(path: str) -> dict:
    out = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise UsageError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            payload = f.read(size * 4)
            if len(payload) != size * 4:
                raise UsageError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# Overfit training


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the failing step."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"non-finite loss at step {step}: {cause}")
        self.step = step


def train_overfit(model: DepthModel, train_cfg: TrainConfig, img: np.ndarray,
                  depth: np.ndarray, mask: np.ndarray, points: np.ndarray,
                  log=None, stop_when=None, eval_every: int = 0):
    """Adam on the total loss against one scene; returns (history, metrics,
    prediction).

    history rows are (step, total, berhu, gradient) floats sampled every
    `log_every` steps plus the final step.  `log`, when given, receives each
    row as it is produced.  With `eval_every` > 0, metrics are computed on
    that cadence and `stop_when(metrics)` may end the run early.
    """
    opt = Adam(model.parameters(), lr=train_cfg.lr)
    history = []
    c = train_cfg.berhu_c
    for step in range(train_cfg.steps):
        try:
            # overflow surfaces as NumericError from the op finiteness
            # checks; numpy's own warning would just duplicate it
            with np.errstate(over="ignore", invalid="ignore"):
                pred = model.forward(img, points)
                l_depth = berhu_loss(pred, depth, mask, c)
                l_grad = gradient_loss(pred, depth, mask, c)
                loss = T.add(l_depth, l_grad)
                backward(loss)
        except NumericError as e:
            raise TrainAbort(step, e) from e
        opt.step()
        opt.zero_grad()
        last = step == train_cfg.steps - 1
        if step % train_cfg.log_every == 0 or last:
            row = (step, loss.item(), l_depth.item(), l_grad.item())
            history.append(row)
            if log is not None:
                log(row)
        if eval_every and stop_when is not None \
                and (step % eval_every == eval_every - 1 or last):
            with T.no_grad():
                snap = model.forward(img, points)
            if stop_when(compute_metrics(snap.numpy()[0], depth, mask)):
                if history and history[-1][0] != step:
                    history.append((step, loss.item(), l_depth.item(),
                                    l_grad.item()))
                break
    with T.no_grad():
        final = model.forward(img, points)
    metrics = compute_metrics(final.numpy()[0], depth, mask)
    return history, metrics, final.numpy()[0]


def write_train_log(path: str, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "total_loss", "berhu", "grad_loss"])
        for row in history:
            writer.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}",
                             f"{row[3]:.9g}"])
