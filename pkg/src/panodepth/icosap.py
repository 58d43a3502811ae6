"""Geodesic icosahedron meshes and face-center point sets.

The base solid is oriented with one vertex at the north pole (0, 0, 1): the
other vertices form two pentagonal rings at z = +-1/sqrt(5), the lower ring
rotated half a step.  Subdivision splits every face into four via edge
midpoints pushed back onto the unit sphere; a level-l mesh has 20*4^l faces
and 10*4^l + 2 vertices.

Face-center records keep the raw vertex mean as their coordinates, so their
norms are strictly inside the sphere (0.7946... at level 0, approaching 1 as
faces flatten).  RGB comes from sampling an ERP image at the three unit
vertex directions and averaging.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .sphere import check_erp, sample_erp_bilinear
from .tensor import UsageError


@dataclass
class IcosapMesh:
    level: int
    vertices: np.ndarray  # (V, 3) float64 unit vectors
    faces: np.ndarray     # (F, 3) int64 vertex indices

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    def edges(self) -> set:
        es = set()
        for a, b, c in self.faces:
            es.add((min(a, b), max(a, b)))
            es.add((min(b, c), max(b, c)))
            es.add((min(a, c), max(a, c)))
        return es

    def euler_characteristic(self) -> int:
        return self.vertex_count - len(self.edges()) + self.face_count

    def rotated(self, rotation: np.ndarray) -> "IcosapMesh":
        """Mesh with every vertex mapped through a 3x3 rotation matrix."""
        rotation = np.asarray(rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise UsageError("rotation must be a 3x3 matrix")
        return IcosapMesh(self.level, self.vertices @ rotation.T, self.faces.copy())


@dataclass
class IcosapPointSet:
    """One record per face: centroid xyz (raw vertex mean) + RGB in [0,1]."""

    level: int
    points: np.ndarray  # (M, 6) float64

    def __len__(self):
        return self.points.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def colors(self) -> np.ndarray:
        return self.points[:, 3:]


def build_icosahedron() -> IcosapMesh:
    """Regular icosahedron, circumradius 1, one vertex at the north pole."""
    verts = [(0.0, 0.0, 1.0)]
    zr = 1.0 / np.sqrt(5.0)        # ring height
    rr = 2.0 / np.sqrt(5.0)        # ring radius
    for k in range(5):             # upper ring
        a = 2.0 * np.pi * k / 5.0
        verts.append((rr * np.cos(a), rr * np.sin(a), zr))
    for k in range(5):             # lower ring, offset half a step
        a = 2.0 * np.pi * k / 5.0 + np.pi / 5.0
        verts.append((rr * np.cos(a), rr * np.sin(a), -zr))
    verts.append((0.0, 0.0, -1.0))
    vertices = np.array(verts, dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)

    faces = []
    for k in range(5):
        kn = (k + 1) % 5
        up, upn = 1 + k, 1 + kn
        lo, lon_ = 6 + k, 6 + kn
        faces.append((0, up, upn))        # cap around the north pole
        faces.append((up, lo, upn))       # upper band
        faces.append((upn, lo, lon_))     # lower band
        faces.append((11, lon_, lo))      # cap around the south pole
    faces = np.array(faces, dtype=np.int64)

    mesh = IcosapMesh(0, vertices, faces)
    _orient_outward(mesh)
    return mesh


def _orient_outward(mesh: IcosapMesh):
    """Flip any face whose winding is inward (negative triple product)."""
    v = mesh.vertices
    for fi, (a, b, c) in enumerate(mesh.faces):
        if np.linalg.det(np.stack([v[a], v[b], v[c]])) < 0:
            mesh.faces[fi] = (a, c, b)


def subdivide(mesh: IcosapMesh) -> IcosapMesh:
    """One 4-to-1 split: edge midpoints, normalized onto the sphere.

    Midpoints on shared edges are created exactly once (keyed by the sorted
    endpoint index pair), which keeps the vertex count at 10*4^l + 2.
    """
    verts = list(map(tuple, mesh.vertices))
    midpoint_of: dict[tuple, int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = midpoint_of.get(key)
        if idx is None:
            m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            idx = len(verts) - 1
            midpoint_of[key] = idx
        return idx

    faces = []
    for a, b, c in mesh.faces:
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        faces.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])

    out = IcosapMesh(mesh.level + 1,
                     np.array(verts, dtype=np.float64),
                     np.array(faces, dtype=np.int64))
    _orient_outward(out)
    return out


def build_mesh(level: int) -> IcosapMesh:
    """Icosahedron subdivided `level` times."""
    if level < 0:
        raise UsageError("subdivision level must be >= 0")
    mesh = build_icosahedron()
    for _ in range(level):
        mesh = subdivide(mesh)
    return mesh


def face_center_point_set(mesh: IcosapMesh, img: np.ndarray,
                          renormalize: bool = False) -> IcosapPointSet:
    """Per-face records of centroid coordinates and mean vertex RGB.

    Coordinates are the raw arithmetic mean of the three vertices (inside
    the sphere); pass ``renormalize=True`` to push them back onto it.  RGB
    is the mean of the three vertices' bilinear ERP samples.
    """
    img = check_erp(img)
    if img.shape[2] != 3:
        raise UsageError("point-set sampling expects a 3-channel ERP image")
    vertex_rgb = sample_erp_bilinear(img, mesh.vertices)
    tri = mesh.vertices[mesh.faces]         # (F, 3, 3)
    centers = tri.mean(axis=1)
    if renormalize:
        centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    rgb = vertex_rgb[mesh.faces].mean(axis=1)
    return IcosapPointSet(mesh.level, np.concatenate([centers, rgb], axis=1))


# ---------------------------------------------------------------------------
# Export formats

BINARY_MAGIC = b"ICOP"


def write_point_csv(point_set: IcosapPointSet, path: str):
    """CSV with header x,y,z,r,g,b at 9 significant digits."""
    with open(path, "w") as f:
        f.write("x,y,z,r,g,b\n")
        for row in point_set.points:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_point_csv(path: str) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64)
    return data.reshape(-1, 6)


def write_point_binary(point_set: IcosapPointSet, path: str):
    """Binary sidecar: magic "ICOP", u32 level, u32 count, count*6 f32 LE."""
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<II", point_set.level, len(point_set)))
        f.write(point_set.points.astype("<f4").tobytes())


def read_point_binary(path: str) -> IcosapPointSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BINARY_MAGIC:
            raise UsageError(f"{path}: bad magic {magic!r}")
        level, count = struct.unpack("<II", f.read(8))
        raw = f.read(count * 6 * 4)
    if len(raw) != count * 6 * 4:
        raise UsageError(f"{path}: truncated point payload")
    pts = np.frombuffer(raw, dtype="<f4").reshape(count, 6).astype(np.float64)
    return IcosapPointSet(level, pts)


def write_obj(mesh: IcosapMesh, path: str):
    """Wavefront OBJ dump (v/f records, 1-indexed faces)."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for a, b, c in mesh.faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")
