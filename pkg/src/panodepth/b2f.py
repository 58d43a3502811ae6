"""Bi-projection bi-attention fusion.

Every pixel feature of the deep ERP map queries the whole point feature set
through two parallel attention blocks, and a gated blend merges them:

* semantic branch: plain dot-product attention, softmax(Q K^T / sqrt(d)) V,
  with Q from the pixel and K, V from the point set;
* distance branch: subtraction attention.  Per (pixel, point) pair two
  embeddings are formed -- exp(-|dx|, -|dy|, -|dz|) of the unit-sphere
  offsets projected by a 3xd matrix, and exp(-|q - k|) channelwise on
  projected features -- summed over channels and softmaxed over the points;
* gating: sigmoid projections of [semantic ; distance] weight the two
  branch outputs elementwise.

Fusion happens once, at the deepest feature scale; pixel coordinates enter
only through their unit directions, so h and w are arbitrary here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import uniform_init
from .tensor import ShapeError, Tensor

GATE_MODES = ("gated", "add", "concat")

_LAYOUT = (
    ("w_sem_q", "cd"), ("w_sem_k", "cd"), ("w_sem_v", "cd"),
    ("w_spatial", "3d"),
    ("w_dist_q", "cd"), ("w_dist_k", "cd"), ("w_dist_v", "cd"),
    ("w_gate_sem", "2dd"), ("w_gate_dist", "2dd"),
    ("w_concat", "2dd"),
)


def _layout_shapes(c: int, d: int):
    table = {"cd": (c, d), "3d": (3, d), "2dd": (2 * d, d)}
    return [(name, table[kind]) for name, kind in _LAYOUT]


@dataclass
class B2FWeights:
    """Projection matrices of both attention branches and the fusion gates.

    `w_concat` backs the concat ablation mode only; the gated path ignores
    it.  All projections are bias-free.
    """

    w_sem_q: Tensor
    w_sem_k: Tensor
    w_sem_v: Tensor
    w_spatial: Tensor
    w_dist_q: Tensor
    w_dist_k: Tensor
    w_dist_v: Tensor
    w_gate_sem: Tensor
    w_gate_dist: Tensor
    w_concat: Tensor

    @classmethod
    def create(cls, channels: int, dim: int | None = None,
               rng: np.random.Generator | None = None,
               dtype=np.float32) -> "B2FWeights":
        dim = channels if dim is None else dim
        rng = rng if rng is not None else np.random.default_rng(0)
        tensors = [Tensor(uniform_init(rng, shape, shape[0], dtype),
                          requires_grad=True)
                   for _, shape in _layout_shapes(channels, dim)]
        return cls(*tensors)

    @staticmethod
    def param_layout(channels: int, dim: int):
        names = [name for name, _ in _LAYOUT]
        shapes = [shape for _, shape in _layout_shapes(channels, dim)]
        return names, shapes

    @classmethod
    def from_params(cls, channels: int, dim: int, tensors) -> "B2FWeights":
        _, shapes = cls.param_layout(channels, dim)
        if [t.shape for t in tensors] != shapes:
            raise ShapeError("fusion weight tensors do not match the layout")
        return cls(*tensors)

    @property
    def dim(self) -> int:
        return self.w_sem_q.shape[1]

    @property
    def channels(self) -> int:
        return self.w_sem_q.shape[0]

    @property
    def dtype(self):
        return self.w_sem_q.dtype

    def param_slots(self, prefix: str = "b2f"):
        return [(f"{prefix}.{name}", self, name) for name, _ in _LAYOUT]


def _pixel_rows(fe: Tensor) -> tuple[Tensor, int, int]:
    if fe.ndim != 3:
        raise ShapeError(f"expected an (h, w, C) feature map, got {fe.shape}")
    h, w, c = fe.shape
    return T.reshape(fe, (h * w, c)), h, w


def exp_neg_abs_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """exp(-|a - b|) pairwise: (P, 3) x (N, 3) -> (P, N, 3), values in (0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.exp(-np.abs(a[:, None, :] - b[None, :, :]))


def semantic_affinity_attention(fe: Tensor, fi: Tensor, weights: B2FWeights,
                                return_attention: bool = False):
    """Dot-product attention of every pixel over the point set -> (h, w, d)."""
    rows, h, w = _pixel_rows(fe)
    if rows.shape[1] != weights.channels or fi.shape[1] != weights.channels:
        raise ShapeError("feature width does not match the fusion weights")
    d = weights.dim
    q = T.matmul(rows, weights.w_sem_q)
    k = T.matmul(fi, weights.w_sem_k)
    v = T.matmul(fi, weights.w_sem_v)
    logits = T.matmul(q, T.permute(k, (1, 0))) * (1.0 / math.sqrt(d))
    attn = T.softmax_lastdim(logits)
    out = T.reshape(T.matmul(attn, v), (h, w, d))
    return (out, attn) if return_attention else out


def spatial_distance_embedding(erp_dirs: np.ndarray, point_coords: np.ndarray,
                               w_spatial: Tensor) -> Tensor:
    """Componentwise exp(-|delta|) of pixel-to-point offsets, projected 3->d.

    Returns (h, w, N, d).  The exponentials are constants; gradients flow
    through the projection only.
    """
    dirs = np.asarray(erp_dirs, dtype=np.float64)
    if dirs.ndim != 3 or dirs.shape[2] != 3:
        raise ShapeError(f"erp_dirs must be (h, w, 3), got {dirs.shape}")
    h, w = dirs.shape[:2]
    coords = np.asarray(point_coords, dtype=np.float64)
    n = coords.shape[0]
    e = exp_neg_abs_diff(dirs.reshape(-1, 3), coords)       # (hw, N, 3)
    e_t = Tensor(e.reshape(-1, 3), dtype=w_spatial.dtype)
    emb = T.matmul(e_t, w_spatial)
    return T.reshape(emb, (h, w, n, w_spatial.shape[1]))


def semantic_distance_embedding(fe_rows: Tensor, fi: Tensor, w_dist_q: Tensor,
                                w_dist_k: Tensor) -> Tensor:
    """exp(-|q_c - k_c|) per channel: (P, C) x (N, C) -> (P, N, d), in (0, 1]."""
    q = T.matmul(fe_rows, w_dist_q)
    k = T.matmul(fi, w_dist_k)
    p, d = q.shape
    n = k.shape[0]
    diff = T.sub(T.reshape(q, (p, 1, d)), T.reshape(k, (1, n, d)))
    return T.exp(T.neg(T.absolute(diff)))


def distance_affinity_attention(fe: Tensor, fi: Tensor,
                                point_coords: np.ndarray,
                                erp_dirs: np.ndarray,
                                weights: B2FWeights,
                                return_attention: bool = False):
    """Subtraction attention combining spatial and semantic distance
    embeddings -> (h, w, d)."""
    rows, h, w = _pixel_rows(fe)
    d = weights.dim
    n = fi.shape[0]
    dis_sp = spatial_distance_embedding(erp_dirs, point_coords, weights.w_spatial)
    dis_se = semantic_distance_embedding(rows, fi, weights.w_dist_q,
                                         weights.w_dist_k)
    combined = T.add(T.reshape(dis_sp, (h * w, n, d)), dis_se)
    logits = T.tensor_sum(combined, axis=2) * (1.0 / math.sqrt(d))
    attn = T.softmax_lastdim(logits)                        # (hw, N)
    v = T.matmul(fi, weights.w_dist_v)
    out = T.reshape(T.matmul(attn, v), (h, w, d))
    return (out, attn) if return_attention else out


def gated_fusion(f_sem: Tensor, f_dist: Tensor, w_gate_sem: Tensor,
                 w_gate_dist: Tensor) -> Tensor:
    """Sigmoid-gated blend g_s * F_sem + g_d * F_dist, gates per channel."""
    if f_sem.shape != f_dist.shape:
        raise ShapeError(f"branch shapes differ: {f_sem.shape} vs {f_dist.shape}")
    rows_s, h, w = _pixel_rows(f_sem)
    rows_d, _, _ = _pixel_rows(f_dist)
    cat = T.concat([rows_s, rows_d], axis=1)
    g_s = T.sigmoid(T.matmul(cat, w_gate_sem))
    g_d = T.sigmoid(T.matmul(cat, w_gate_dist))
    out = T.add(T.mul(g_s, rows_s), T.mul(g_d, rows_d))
    return T.reshape(out, f_sem.shape)


def fuse_branches(f_sem: Tensor, f_dist: Tensor, weights: B2FWeights,
                  mode: str = "gated") -> Tensor:
    """Final fusion: learned gates (default), plain add, or concat+project."""
    if mode == "gated":
        return gated_fusion(f_sem, f_dist, weights.w_gate_sem, weights.w_gate_dist)
    if mode == "add":
        return T.add(f_sem, f_dist)
    if mode == "concat":
        rows_s, h, w = _pixel_rows(f_sem)
        rows_d, _, _ = _pixel_rows(f_dist)
        cat = T.concat([rows_s, rows_d], axis=1)
        return T.reshape(T.matmul(cat, weights.w_concat), f_sem.shape)
    raise ShapeError(f"unknown fusion mode {mode!r} (expected one of {GATE_MODES})")


def b2f_forward(fe: Tensor, fi: Tensor, point_coords: np.ndarray,
                erp_dirs: np.ndarray, weights: B2FWeights,
                mode: str = "gated") -> Tensor:
    """Both attention branches plus fusion: (h, w, C) -> (h, w, d)."""
    f_sem = semantic_affinity_attention(fe, fi, weights)
    f_dist = distance_affinity_attention(fe, fi, point_coords, erp_dirs, weights)
    return fuse_branches(f_sem, f_dist, weights, mode)
