"""
Camera geometry and inverse perspective mapping
===============================================

Project ground points into the image, lift pixels back onto the road and
look at where the horizon cuts off the lift.
"""
import numpy as np

from lane3d.errors import HorizonError
from lane3d.geometry import (BevGridSpec, build_ipm_grid, default_camera, ground_homography, horizon_row,
                             ipm_pixel_to_ground, project_ground_to_pixel)

cam = default_camera()
print(f"camera: fx={cam.fx:g} fy={cam.fy:g} c=({cam.cx:g}, {cam.cy:g}) pitch={cam.pitch:g} rad h={cam.height:g} m")

# a few road points 1.75 m to the left, at growing distance
ground = np.array([[-1.75, y, 0.0] for y in (5, 10, 20, 40, 80)])
pixels = project_ground_to_pixel(ground, cam)
for g, p in zip(ground, pixels):
    print(f"  ground ({g[0]:6.2f}, {g[1]:5.1f})  ->  pixel ({p[0]:7.2f}, {p[1]:7.2f})")

# lifting the pixels lands back on the same points
back = ipm_pixel_to_ground(pixels, cam)
print("round-trip error (m):", float(np.abs(back - ground).max()))

# the ground-to-image homography gives the same pixels
H = ground_homography(cam)
h = np.column_stack([ground[:, :2], np.ones(len(ground))]) @ H.T
print("homography vs projection (px):", float(np.abs(h[:, :2] / h[:, 2:] - pixels).max()))

# rows at or above the horizon have no ground intersection
vh = horizon_row(cam)
print(f"horizon row: v = {vh:.3f}")
for v in (vh + 1.0, vh + 0.01, vh):
    try:
        y = ipm_pixel_to_ground([cam.cx, v], cam)[1]
        print(f"  v = {v:8.3f}: ground y = {y:9.1f} m")
    except HorizonError as e:
        print(f"  v = {v:8.3f}: {e}")

# the BEV grid samples the image at the projection of every cell center
grid = build_ipm_grid(cam, BevGridSpec())
print(f"BEV grid {grid.valid.shape}, {100 * grid.valid_fraction:.1f}% of cells in front of the camera")
