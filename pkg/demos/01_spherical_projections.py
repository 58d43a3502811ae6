"""
Spherical projections of a panorama
===================================

A walk through the projection geometry: the equirectangular (ERP)
pixel-direction convention, bilinear sphere sampling with seam wrap,
cubemap faces, and tangent (gnomonic) patches.
"""

import numpy as np

from panodepth import sphere
from panodepth.imgio import write_png
from panodepth.scenes import BoxScene, synth_box_scene

# A synthetic panorama: the inside of a colored box, 64x128.
scene = BoxScene(half_extents=(2.0, 1.5, 1.2), checker=6)
erp, depth, _ = synth_box_scene(scene, 64, 128)
write_png("demo_out_erp.png", erp)
print(f"ERP image 64x128, depth range [{depth.min():.2f}, {depth.max():.2f}] m")

# The convention anchor: the image center looks along +x at the equator.
center = sphere.pixel_to_dir(31.5, 63.5, 64, 128)
print("center pixel direction:", np.round(center, 6))

# Round trip: every pixel center survives dir<->pixel exactly.
ii, jj = np.meshgrid(np.arange(64.0), np.arange(128.0), indexing="ij")
d = sphere.pixel_to_dir(ii, jj, 64, 128)
ri, rj = sphere.dir_to_pixel(d, 64, 128)
print("round-trip max error:",
      max(np.abs(ri - ii).max(), np.abs(rj - jj).max()), "pixels")

# Sampling wraps horizontally: a direction just west of the seam blends the
# last and first columns.
lon = np.pi - 0.01
seam_dir = np.array([np.cos(lon), np.sin(lon), 0.0])
print("seam sample:", np.round(sphere.sample_erp_bilinear(erp, seam_dir), 4))

# Six 90-degree cubemap faces; the +x face center matches the ERP center.
cube = sphere.erp_to_cubemap(erp, 32)
for i, name in enumerate(sphere.FACE_NAMES):
    write_png(f"demo_out_cube_{name}.png", cube.faces[i])
print("cubemap faces written; +x center color:",
      np.round(cube.face("px")[16, 16], 4))

# Eighteen tangent patches: 3 latitude rings x 6 longitudes, 80-degree FoV.
patches = sphere.erp_to_tangent_patches(erp, patch_size=16)
print(f"tangent patches: {len(patches)} of "
      f"{patches.patches.shape[1]}x{patches.patches.shape[2]}, "
      f"fov {np.rad2deg(patches.fov):.0f} deg")

# The patch set is exported as an indexed directory plus a JSON manifest by
# `panodepth project --mode tangent --erp demo_out_erp.png --out <dir>`.
