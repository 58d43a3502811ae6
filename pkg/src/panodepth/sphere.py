"""Equirectangular, cubemap and tangent (gnomonic) projection geometry.

Conventions (fixed; every test anchors on them):

* An ERP image is an (H, W, C) array with W == 2H.  Pixel centers sit at
  offsets of 0.5: row i covers latitude pi/2 - (i+0.5)/H*pi, column j covers
  longitude (j+0.5)/W*2*pi - pi.  Latitude is measured from the equator,
  z points at the north pole (row 0 side), and direction (1, 0, 0) is the
  equator at the prime meridian (the image center).
* Horizontal sampling wraps (column W-1 interpolates with column 0);
  vertical sampling clamps at the poles (no pole wrap).
* Cubemap faces come in the fixed order +x, -x, +y, -y, +z, -z with file
  suffixes px, nx, py, ny, pz, nz.  Each face is a 90-degree-FoV gnomonic
  projection; the per-face image axes are given by _FACE_AXES below.

All functions are pure and vectorized over trailing dimensions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor import UsageError

FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")

# face -> (normal, image-right axis, image-down axis)
_FACE_AXES = {
    "px": ((1, 0, 0), (0, -1, 0), (0, 0, -1)),
    "nx": ((-1, 0, 0), (0, 1, 0), (0, 0, -1)),
    "py": ((0, 1, 0), (1, 0, 0), (0, 0, -1)),
    "ny": ((0, -1, 0), (-1, 0, 0), (0, 0, -1)),
    "pz": ((0, 0, 1), (0, 1, 0), (1, 0, 0)),
    "nz": ((0, 0, -1), (0, 1, 0), (-1, 0, 0)),
}


def check_erp(img: np.ndarray) -> np.ndarray:
    """Validate the (H, W, C) equirectangular layout; returns the array."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise UsageError(f"ERP image must be HxWxC, got shape {img.shape}")
    h, w = img.shape[:2]
    if w != 2 * h:
        raise UsageError(f"ERP image must have W == 2H, got {h}x{w}")
    return img


# ---------------------------------------------------------------------------
# Pixel <-> direction


def pixel_to_dir(i, j, height: int, width: int) -> np.ndarray:
    """Unit sphere direction of (possibly fractional) pixel coordinates.

    Accepts scalars or arrays; returns (..., 3).  Out-of-range indices are a
    usage error (the continuous domain is [0, H) x [0, W)).
    """
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    if np.any(i < 0) or np.any(i >= height) or np.any(j < 0) or np.any(j >= width):
        raise UsageError(f"pixel index out of range for {height}x{width}")
    lat = np.pi / 2 - (i + 0.5) / height * np.pi
    lon = (j + 0.5) / width * 2 * np.pi - np.pi
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.cos(lon), cos_lat * np.sin(lon), np.sin(lat)],
                    axis=-1)


def dir_to_pixel(d: np.ndarray, height: int, width: int):
    """Continuous (i, j) pixel coordinates of unit directions.

    Inverse of :func:`pixel_to_dir` at pixel centers.  Longitude wraps into
    [-pi, pi); the north pole maps to the i = -0.5 boundary (callers that
    sample clamp there, see `sample_erp_bilinear`).
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm < 1e-12):
        raise UsageError("zero direction vector")
    dn = d / norm[..., None]
    lat = np.arcsin(np.clip(dn[..., 2], -1.0, 1.0))
    lon = np.arctan2(dn[..., 1], dn[..., 0])
    lon = np.where(lon >= np.pi, lon - 2 * np.pi, lon)  # atan2 yields +pi
    i = (np.pi / 2 - lat) / np.pi * height - 0.5
    j = (lon + np.pi) / (2 * np.pi) * width - 0.5
    return i, j


def erp_pixel_dirs(height: int, width: int) -> np.ndarray:
    """(H, W, 3) unit directions of all pixel centers."""
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return pixel_to_dir(ii, jj, height, width)


# ---------------------------------------------------------------------------
# Sampling


def sample_erp_bilinear(img: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear ERP lookup along unit directions.

    dirs: (..., 3) -> values (..., C).  Columns wrap around the seam; rows
    clamp at the poles.  Exact at pixel centers.
    """
    img = check_erp(img)
    h, w = img.shape[:2]
    i, j = dir_to_pixel(dirs, h, w)
    return _bilinear_wrap(img, i, j)


def _bilinear_wrap(img: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    i0 = np.floor(i).astype(np.int64)
    j0 = np.floor(j).astype(np.int64)
    fi = i - i0
    fj = j - j0
    r0 = np.clip(i0, 0, h - 1)
    r1 = np.clip(i0 + 1, 0, h - 1)
    c0 = np.mod(j0, w)
    c1 = np.mod(j0 + 1, w)
    fi = fi[..., None]
    fj = fj[..., None]
    return ((1 - fi) * (1 - fj) * img[r0, c0]
            + (1 - fi) * fj * img[r0, c1]
            + fi * (1 - fj) * img[r1, c0]
            + fi * fj * img[r1, c1])


# ---------------------------------------------------------------------------
# Cubemap


@dataclass
class CubemapFaces:
    """Six square gnomonic faces in the order +x,-x,+y,-y,+z,-z."""

    faces: np.ndarray  # (6, S, S, C)

    def __post_init__(self):
        if self.faces.ndim != 4 or self.faces.shape[0] != 6 \
                or self.faces.shape[1] != self.faces.shape[2]:
            raise UsageError(f"cubemap faces must be (6,S,S,C), got {self.faces.shape}")

    @property
    def face_size(self) -> int:
        return self.faces.shape[1]

    def face(self, name: str) -> np.ndarray:
        return self.faces[FACE_NAMES.index(name)]


def cubemap_face_dirs(name: str, size: int) -> np.ndarray:
    """(S, S, 3) unit ray directions through the pixel centers of one face."""
    normal, right, down = (np.array(v, dtype=np.float64) for v in _FACE_AXES[name])
    t = (np.arange(size) + 0.5) / size * 2.0 - 1.0  # plane coords in (-1, 1)
    u = t[None, :, None]  # columns -> right
    v = t[:, None, None]  # rows    -> down
    rays = normal + u * right + v * down
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def erp_to_cubemap(img: np.ndarray, face_size: int) -> CubemapFaces:
    """Resample an ERP image onto six 90-degree gnomonic faces."""
    img = check_erp(img)
    if face_size < 2:
        raise UsageError("face_size must be >= 2")
    faces = np.stack([sample_erp_bilinear(img, cubemap_face_dirs(n, face_size))
                      for n in FACE_NAMES])
    return CubemapFaces(faces)


def sample_cubemap(cube: CubemapFaces, dirs: np.ndarray) -> np.ndarray:
    """Look a set of directions up in a cubemap (per-face bilinear, clamped).

    Used by the resampling-consistency checks and by cubemap -> ERP
    back-projection; seams are clamped per face, not blended.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    size = cube.face_size
    out = None
    absd = np.abs(flat)
    axis = np.argmax(absd, axis=1)
    for fi, name in enumerate(FACE_NAMES):
        normal, right, down = (np.array(v, dtype=np.float64) for v in _FACE_AXES[name])
        sel_axis = fi // 2
        positive = fi % 2 == 0
        sel = (axis == sel_axis) & ((flat[:, sel_axis] > 0) == positive) \
            & (flat[:, sel_axis] != 0)
        if not np.any(sel):
            continue
        d = flat[sel]
        depth = d @ normal
        u = (d @ right) / depth
        v = (d @ down) / depth
        col = np.clip((u + 1.0) / 2.0 * size - 0.5, 0, size - 1)
        row = np.clip((v + 1.0) / 2.0 * size - 0.5, 0, size - 1)
        vals = _bilinear_clamped(cube.faces[fi], row, col)
        if out is None:
            out = np.zeros((flat.shape[0], vals.shape[-1]), dtype=vals.dtype)
        out[sel] = vals
    return out.reshape(dirs.shape[:-1] + (out.shape[-1],))


def _bilinear_clamped(img: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    i0 = np.floor(i).astype(np.int64)
    j0 = np.floor(j).astype(np.int64)
    fi = (i - i0)[..., None]
    fj = (j - j0)[..., None]
    r0 = np.clip(i0, 0, h - 1)
    r1 = np.clip(i0 + 1, 0, h - 1)
    c0 = np.clip(j0, 0, w - 1)
    c1 = np.clip(j0 + 1, 0, w - 1)
    return ((1 - fi) * (1 - fj) * img[r0, c0] + (1 - fi) * fj * img[r0, c1]
            + fi * (1 - fj) * img[r1, c0] + fi * fj * img[r1, c1])


def cubemap_to_erp(cube: CubemapFaces, height: int, width: int) -> np.ndarray:
    """Back-project a cubemap onto the ERP grid."""
    dirs = erp_pixel_dirs(height, width)
    return sample_cubemap(cube, dirs)


# ---------------------------------------------------------------------------
# Tangent patches


@dataclass
class TangentPatchSet:
    """Gnomonic patches: unit centers, their lat/lon, one grid per center."""

    centers: np.ndarray     # (N, 3) unit vectors
    latlon: np.ndarray      # (N, 2) radians
    fov: float              # full field of view, radians
    patches: np.ndarray     # (N, S, S, C)

    def __len__(self):
        return self.centers.shape[0]


def tangent_patch_centers(count: int = 18) -> np.ndarray:
    """Default tangent layout: 3 latitude rings (+45, 0, -45 deg) of count/3
    equally spaced longitudes each.  Returns (count, 2) lat/lon radians."""
    if count % 3 != 0 or count < 3:
        raise UsageError("tangent layout uses 3 rings; count must be a multiple of 3")
    per_ring = count // 3
    lats = np.deg2rad([45.0, 0.0, -45.0])
    lons = np.arange(per_ring) / per_ring * 2 * np.pi - np.pi
    grid = [(lat, lon) for lat in lats for lon in lons]
    return np.array(grid, dtype=np.float64)


def latlon_to_dir(latlon: np.ndarray) -> np.ndarray:
    latlon = np.asarray(latlon, dtype=np.float64)
    lat, lon = latlon[..., 0], latlon[..., 1]
    return np.stack([np.cos(lat) * np.cos(lon),
                     np.cos(lat) * np.sin(lon),
                     np.sin(lat)], axis=-1)


def tangent_patch_dirs(center: np.ndarray, fov: float, patch_size: int) -> np.ndarray:
    """(S, S, 3) ray directions of a gnomonic patch around a unit center.

    Local axes: east = z x center (normalized), down = -north.  Degenerates
    at the poles, so centers must stay off +-z.
    """
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    if abs(c[2]) > 1.0 - 1e-9:
        raise UsageError("tangent patch center may not be a pole")
    east = np.cross([0.0, 0.0, 1.0], c)
    east /= np.linalg.norm(east)
    north = np.cross(c, east)
    half = np.tan(fov / 2.0)
    t = ((np.arange(patch_size) + 0.5) / patch_size * 2.0 - 1.0) * half
    u = t[None, :, None]
    v = t[:, None, None]
    rays = c + u * east - v * north
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def erp_to_tangent_patches(img: np.ndarray, centers=None, fov: float = np.deg2rad(80.0),
                           patch_size: int = 32) -> TangentPatchSet:
    """Extract gnomonic patches around each center.

    `centers` may be (N, 2) lat/lon radians or (N, 3) unit directions;
    omitted, the default 18-center ring layout is used.
    """
    img = check_erp(img)
    if not 0 < fov < np.pi:
        raise UsageError("tangent fov must be in (0, pi)")
    if centers is None:
        latlon = tangent_patch_centers(18)
    else:
        centers = np.asarray(centers, dtype=np.float64)
        if centers.ndim == 2 and centers.shape[1] == 3:
            norms = np.linalg.norm(centers, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise UsageError("direction centers must be unit-norm")
            latlon = np.stack([np.arcsin(np.clip(centers[:, 2], -1, 1)),
                               np.arctan2(centers[:, 1], centers[:, 0])], axis=1)
        elif centers.ndim == 2 and centers.shape[1] == 2:
            latlon = centers
        else:
            raise UsageError("centers must be (N, 2) lat/lon or (N, 3) unit dirs")
    dirs = latlon_to_dir(latlon)
    patches = np.stack([sample_erp_bilinear(img, tangent_patch_dirs(d, fov, patch_size))
                        for d in dirs])
    return TangentPatchSet(dirs, latlon, float(fov), patches)


def write_tangent_patches(patch_set: TangentPatchSet, out_dir: str) -> list[str]:
    """Write patches as an indexed directory of PNGs plus a JSON manifest."""
    from .imgio import write_png

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k in range(len(patch_set)):
        path = os.path.join(out_dir, f"patch_{k:02d}.png")
        write_png(path, patch_set.patches[k])
        paths.append(path)
    manifest = {
        "count": len(patch_set),
        "fov": patch_set.fov,
        "patch_size": int(patch_set.patches.shape[1]),
        "centers": [{"lat": float(lat), "lon": float(lon)}
                    for lat, lon in patch_set.latlon],
        "files": [os.path.basename(p) for p in paths],
    }
    mpath = os.path.join(out_dir, "patches.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    paths.append(mpath)
    return paths
