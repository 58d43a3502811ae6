"""Feature encoders: a small multi-scale ERP CNN and a point-set encoder.

The image encoder is a stem plus four downsampling stages producing feature
maps at scales 2, 4, 8, 16 and 32.  Each stage is a shape-preserving 3x3
convolution followed by an exact x1/2 bilinear reduction (a 2x2 mean) --
the conv contract here requires integral output sizes, which rules out
literal stride-2 odd-kernel convolutions on even resolutions.

The point encoder embeds (x, y, z, r, g, b) records and stacks
transition-down blocks: farthest-point sampling to a quarter of the points,
kNN grouping, a shared MLP on the concatenated (relative position, feature)
rows, and a max over each neighborhood.  Coordinates always remain a subset
of the input coordinates; sampling never invents points.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import Conv3x3, Linear, named_parameters
from .tensor import Tensor, UsageError


def default_widths(channels: int) -> list[int]:
    """Stage widths (stem + 4 stages) for a given deepest-channel count."""
    if channels % 4 != 0:
        raise UsageError("channel count must be divisible by 4")
    q = channels // 4
    return [q, q, channels // 2, channels, channels]


@dataclass
class ErpFeaturePyramid:
    """Feature maps as (C, H/s, W/s) tensors, shallowest to deepest."""

    maps: list
    scales: list

    @property
    def deepest(self) -> Tensor:
        return self.maps[-1]

    def at_scale(self, scale: int) -> Tensor:
        if scale not in self.scales:
            raise UsageError(f"no pyramid map at scale {scale} (have {self.scales})")
        return self.maps[self.scales.index(scale)]


class ErpEncoder:
    """Stem plus downsampling stages; one halving per width entry.

    The default five widths bottleneck at scale 32; a shorter list shrinks
    the pyramid for toy resolutions.
    """

    def __init__(self, rng: np.random.Generator, channels: int = 32,
                 widths=None, dtype=np.float32):
        self.widths = list(widths) if widths is not None else default_widths(channels)
        if not self.widths:
            raise UsageError("encoder needs at least one stage width")
        self.convs = []
        cin = 3
        for w in self.widths:
            self.convs.append(Conv3x3(rng, cin, w, dtype))
            cin = w

    @property
    def max_scale(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, img: np.ndarray) -> ErpFeaturePyramid:
        """img: (H, W, 3) in [0, 1]; H and W must be divisible by max_scale."""
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise UsageError(f"encoder expects HxWx3, got {img.shape}")
        h, w = img.shape[:2]
        if h % self.max_scale or w % self.max_scale:
            raise UsageError(f"resolution {h}x{w} not divisible by {self.max_scale}")
        x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)),
                   dtype=self.convs[0].w.dtype)
        maps, scales = [], []
        scale = 1
        for conv in self.convs:
            x = T.relu(conv(x))
            scale *= 2
            x = T.bilinear_resize(x, h // scale, w // scale)
            maps.append(x)
            scales.append(scale)
        return ErpFeaturePyramid(maps, scales)

    def param_slots(self):
        names = ["stem"] + [f"stage{i}" for i in range(1, len(self.convs))]
        slots = []
        for name, conv in zip(names, self.convs):
            slots += conv.slots(f"erp.{name}")
        return slots

    def named_parameters(self):
        return named_parameters(self.param_slots())

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


# ---------------------------------------------------------------------------
# Point sampling


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling (squared Euclidean, deterministic).

    Starts at `start` (default 0); each pick maximizes the minimum distance
    to the chosen set; chosen points are masked out so ties and duplicates
    can never re-pick an index, and remaining ties go to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if k > m:
        raise UsageError(f"cannot sample {k} from {m} points")
    if k < 1:
        raise UsageError("k must be >= 1")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    d2 = ((points - points[start]) ** 2).sum(axis=1)
    d2[start] = -1.0
    for t in range(1, k):
        idx = int(np.argmax(d2))
        chosen[t] = idx
        nd = ((points - points[idx]) ** 2).sum(axis=1)
        np.minimum(d2, nd, out=d2)
        d2[idx] = -1.0
    return chosen


def knn_indices(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """(Q, k) nearest-neighbor indices, stable-sorted so ties keep the
    lowest index first."""
    if k > points.shape[0]:
        raise UsageError(f"knn {k} > point count {points.shape[0]}")
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


# ---------------------------------------------------------------------------
# Point encoder


@dataclass
class PointFeatureSet:
    coords: np.ndarray  # (N, 3), a subset of the input coordinates
    features: Tensor    # (N, C)

    def __len__(self):
        return self.coords.shape[0]


class TransitionDown:
    """FPS to k_out centers, kNN grouping, shared MLP, neighborhood max."""

    def __init__(self, rng, channels: int, knn: int = 8, dtype=np.float32):
        self.knn = knn
        self.mlp = Linear(rng, 3 + channels, channels, dtype=dtype)

    def plan(self, coords: np.ndarray, k_out: int):
        """Precompute (center indices, neighbor indices) for fixed coords."""
        if k_out > coords.shape[0]:
            raise UsageError(f"transition_down: k_out {k_out} > "
                             f"{coords.shape[0]} points")
        knn = min(self.knn, coords.shape[0])
        centers_idx = farthest_point_sample(coords, k_out)
        nbr = knn_indices(coords[centers_idx], coords, knn)
        return centers_idx, nbr

    def forward(self, pf: PointFeatureSet, k_out: int,
                plan=None) -> PointFeatureSet:
        coords = pf.coords
        centers_idx, nbr = plan if plan is not None else self.plan(coords, k_out)
        centers = coords[centers_idx]
        knn = nbr.shape[1]
        flat = nbr.reshape(-1)
        rel = coords[flat] - np.repeat(centers, knn, axis=0)
        rel_t = Tensor(rel, dtype=self.mlp.w.dtype)
        gathered = T.gather_rows(pf.features, flat)      # (k_out*knn, C)
        grouped = T.concat([rel_t, gathered], axis=1)
        hidden = T.relu(self.mlp(grouped))
        c = hidden.shape[1]
        pooled = T.tensor_max(T.reshape(hidden, (k_out, knn, c)), axis=1)
        return PointFeatureSet(centers, pooled)

    def slots(self, prefix: str):
        return self.mlp.slots(f"{prefix}.mlp")


class PointEncoder:
    """Embed 6-value point records, then `blocks` 4-to-1 transition downs."""

    def __init__(self, rng, channels: int = 32, blocks: int = 3, knn: int = 8,
                 dtype=np.float32):
        if blocks < 0:
            raise UsageError("blocks must be >= 0")
        self.embed = Linear(rng, 6, channels, dtype=dtype)
        self.blocks = [TransitionDown(rng, channels, knn, dtype)
                       for _ in range(blocks)]
        self._plan_key = None
        self._plan = None

    def _sampling_plan(self, points: np.ndarray):
        # FPS/kNN depend only on coordinates, which are fixed per scene;
        # cache the plan so repeated forwards skip the geometry work.
        key = (points.shape, hashlib.blake2b(points.tobytes(),
                                             digest_size=16).digest())
        if key != self._plan_key:
            plan = []
            coords = np.ascontiguousarray(points[:, :3])
            for block in self.blocks:
                entry = block.plan(coords, coords.shape[0] // 4)
                plan.append(entry)
                coords = coords[entry[0]]
            self._plan_key = key
            self._plan = plan
        return self._plan

    def forward(self, points: np.ndarray) -> PointFeatureSet:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 6:
            raise UsageError(f"point encoder expects (M, 6), got {points.shape}")
        m = points.shape[0]
        if m % (4 ** len(self.blocks)) != 0:
            raise UsageError(
                f"{len(self.blocks)} transition blocks do not divide {m} points")
        plan = self._sampling_plan(points)
        feats = T.relu(self.embed(Tensor(points, dtype=self.embed.w.dtype)))
        pf = PointFeatureSet(points[:, :3].copy(), feats)
        for block, entry in zip(self.blocks, plan):
            pf = block.forward(pf, len(pf) // 4, plan=entry)
        return pf

    def output_count(self, m: int) -> int:
        return m // (4 ** len(self.blocks))

    def param_slots(self):
        slots = self.embed.slots("point.embed")
        for i, block in enumerate(self.blocks):
            slots += block.slots(f"point.td{i}")
        return slots

    def named_parameters(self):
        return named_parameters(self.param_slots())


def point_feature_count(level: int, blocks: int) -> int:
    """N = 20 * 4^level / 4^blocks; a config error if not integral."""
    m = 20 * 4 ** level
    if blocks < 0 or m % (4 ** blocks) != 0:
        raise UsageError(f"blocks={blocks} inconsistent with level={level}")
    return m // (4 ** blocks)
