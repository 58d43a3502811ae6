"""
Geodesic icosahedron point sets
===============================

Subdivision doubles nothing and quadruples everything: faces go 20, 80,
320, ... and vertices 12, 42, 162, ...  Face centers (vertex means) stay
strictly inside the unit sphere and drift outward as the mesh flattens.
Each center carries the mean RGB of its three vertices, sampled from an
ERP image.
"""

import numpy as np

from panodepth import icosap
from panodepth.scenes import BoxScene, synth_box_scene

# Subdivision table.
mesh = icosap.build_icosahedron()
print("level  faces  vertices  edges  euler")
for level in range(5):
    if level:
        mesh = icosap.subdivide(mesh)
    print(f"{mesh.level:5d}  {mesh.face_count:5d}  {mesh.vertex_count:8d}  "
          f"{len(mesh.edges()):5d}  {mesh.euler_characteristic():5d}")

# Face centroids: norm 0.7946545 on the base solid, approaching 1 with level.
img, _, _ = synth_box_scene(BoxScene(checker=6), 64, 128)
for level in (0, 2, 4):
    ps = icosap.face_center_point_set(icosap.build_mesh(level), img)
    norms = np.linalg.norm(ps.coords, axis=1)
    print(f"level {level}: {len(ps):5d} records, centroid norm "
          f"{norms.min():.5f}..{norms.max():.5f}")

# Records are (x, y, z, r, g, b); exports: CSV, a binary sidecar with the
# "ICOP" magic, and the mesh as OBJ.
ps = icosap.face_center_point_set(icosap.build_mesh(2), img)
icosap.write_point_csv(ps, "demo_out_points.csv")
icosap.write_point_binary(ps, "demo_out_points.icop")
icosap.write_obj(icosap.build_mesh(2), "demo_out_mesh.obj")
print("first record:", np.round(ps.points[0], 4))

back = icosap.read_point_binary("demo_out_points.icop")
print("binary round trip:", back.level, len(back), "records, max diff",
      np.abs(back.points - ps.points).max())
