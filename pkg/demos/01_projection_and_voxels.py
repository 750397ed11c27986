"""Walk through the camera model and the frustum voxel grid.

A pinhole camera projects world points to (u, v) pixel coordinates plus
a camera-space depth z.  The view frustum between the nearest and
farthest point is sliced into P depth slabs, giving one voxel per pixel
per slab; each projected point lands in exactly one voxel and carries
two distances that later drive its blending weight:

  d1  distance to its pixel center, in pixels (0 .. sqrt(2)/2)
  d2  depth above the nearest point sharing the voxel (filled in by the
      voxelizer's min-depth pass)
"""

import numpy as np

from mprender.camera import (FrustumPartition, fit_partition, locate, make_camera,
                             project)

view = make_camera(64, 64, focal=70.0)
print(f"camera: {view.width}x{view.height}, fx={view.fx}, principal point "
      f"({view.cx}, {view.cy})")

# project a few points sitting on the optical axis and off to the side
for point in [(0.0, 0.0, 2.0), (0.25, -0.1, 2.0), (0.0, 0.0, 4.0)]:
    u, v, z = project(point, view)
    print(f"  {point} -> u={u:7.3f} v={v:7.3f} z={z:.3f}")

print("\npoints behind the camera are reported, not errors:")
print("  (0, 0, -1) ->", project((0.0, 0.0, -1.0), view))

# fit a 8-plane partition to a depth range, as training does per view
depths = np.random.default_rng(0).uniform(1.8, 2.7, 500)
part = fit_partition(depths, planes=8)
print(f"\nfitted partition: near={part.near:.4f} far={part.far:.4f} "
      f"slab depth={part.slab_depth:.4f}")

# the same pixel at increasing depth walks through the planes
print("\nvoxel for pixel (32.2, 31.7) at increasing depth:")
for z in np.linspace(part.near, part.far, 5):
    coord = locate(32.2, 31.7, z, part, view)
    print(f"  z={z:.3f} -> plane {coord.p}, cell (h={coord.h}, w={coord.w}), "
          f"d1={coord.d1:.3f}")

# d1 is extremal at pixel corners and zero at centers
part1 = FrustumPartition(near=1.0, far=3.0, planes=1)
center = locate(10.5, 20.5, 2.0, part1, view)
corner = locate(10.0, 20.0, 2.0, part1, view)
print(f"\nd1 at a pixel center: {center.d1:.4f}")
print(f"d1 at a pixel corner: {corner.d1:.4f}  (= sqrt(2)/2 = {np.sqrt(2)/2:.4f})")
