"""Synthetic ground truth: a camera at the center of an axis-aligned box.

Depth has a closed form -- along a unit ray d the box boundary |p_a| = e_a
is first reached at t = min_a(e_a / |d_a|) -- which makes the scene an
exact oracle for the whole pipeline.  Colors identify the hit face, with an
optional checkerboard to give the encoders texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sphere import erp_pixel_dirs
from .tensor import UsageError

# +x, -x, +y, -y, +z, -z
DEFAULT_FACE_COLORS = np.array([
    [0.85, 0.25, 0.25],
    [0.25, 0.85, 0.35],
    [0.25, 0.45, 0.85],
    [0.9, 0.8, 0.25],
    [0.8, 0.3, 0.8],
    [0.3, 0.8, 0.8],
])


@dataclass
class BoxScene:
    half_extents: tuple = (2.0, 1.5, 1.2)
    face_colors: np.ndarray = field(default_factory=lambda: DEFAULT_FACE_COLORS.copy())
    checker: int = 0  # checker cells across each face axis; 0 = flat faces

    def __post_init__(self):
        self.half_extents = tuple(float(v) for v in self.half_extents)
        if len(self.half_extents) != 3 or min(self.half_extents) <= 0:
            raise UsageError("box half-extents must be three positive numbers")
        self.face_colors = np.asarray(self.face_colors, dtype=np.float64)
        if self.face_colors.shape != (6, 3):
            raise UsageError("face_colors must be (6, 3)")
        if self.checker < 0:
            raise UsageError("checker must be >= 0")

    def to_dict(self) -> dict:
        return {"half_extents": list(self.half_extents),
                "face_colors": self.face_colors.tolist(),
                "checker": self.checker}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxScene":
        kwargs = {}
        if "half_extents" in d:
            kwargs["half_extents"] = tuple(d["half_extents"])
        if "face_colors" in d:
            kwargs["face_colors"] = np.asarray(d["face_colors"], dtype=np.float64)
        if "checker" in d:
            kwargs["checker"] = int(d["checker"])
        return cls(**kwargs)


# local (u, v) axes per face for the checker pattern
_FACE_UV = {0: (1, 2), 1: (1, 2), 2: (0, 2), 3: (0, 2), 4: (0, 1), 5: (0, 1)}


def ray_box_depth(scene: BoxScene, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic depth and hit-face index for unit rays from the center."""
    dirs = np.asarray(dirs, dtype=np.float64)
    e = np.asarray(scene.half_extents)
    with np.errstate(divide="ignore"):
        t_axis = e / np.abs(dirs)  # inf where the ray is parallel to the axis
    t = t_axis.min(axis=-1)
    axis = np.argmin(t_axis, axis=-1)
    sign_neg = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] < 0
    face = 2 * axis + sign_neg
    return t, face


def synth_box_scene(scene: BoxScene, height: int, width: int):
    """Render (ERP image, depth map, valid mask) for a box scene.

    Returns float64 (H, W, 3) colors in [0, 1], (H, W) metric depth, and an
    all-valid boolean mask.
    """
    if width != 2 * height:
        raise UsageError("ERP resolution requires W == 2H")
    dirs = erp_pixel_dirs(height, width)
    depth, face = ray_box_depth(scene, dirs)
    img = scene.face_colors[face]

    if scene.checker:
        hit = dirs * depth[..., None]
        e = np.asarray(scene.half_extents)
        shade = np.zeros(depth.shape)
        for f in range(6):
            sel = face == f
            if not sel.any():
                continue
            ua, va = _FACE_UV[f]
            cu = np.floor((hit[sel, ua] + e[ua]) / (2 * e[ua]) * scene.checker)
            cv = np.floor((hit[sel, va] + e[va]) / (2 * e[va]) * scene.checker)
            cu = np.clip(cu, 0, scene.checker - 1)
            cv = np.clip(cv, 0, scene.checker - 1)
            shade[sel] = (cu + cv) % 2
        img = img * np.where(shade[..., None] > 0, 0.55, 1.0)

    mask = np.ones(depth.shape, dtype=bool)
    return img, depth, mask
