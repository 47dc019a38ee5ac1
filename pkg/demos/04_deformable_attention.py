"""
Deformable cross-attention at desk scale
========================================

BEV queries read front-view features at their IPM reference point plus a few
learned offsets. With zero offsets the block reduces to a plain IPM warp.
"""
import numpy as np

from lane3d.core import DeformAttnParams, FeaturePyramid, TransformerParams, deformable_cross_attention, \
    ipm_warp, persformer_forward
from lane3d.core.gradcheck import grad_check_suite
from lane3d.geometry import BevGridSpec, build_ipm_grid, default_camera

rng = np.random.default_rng(0)
spec = BevGridSpec(width_cells=6, height_cells=6)
# the 12x16 feature map sees the camera scaled down from 480x360
cam = default_camera().scaled(16 / 480, 12 / 360)
ref, valid = build_ipm_grid(cam, spec).flat()
print(f"{valid.sum()} of {len(valid)} BEV cells have a reference point in front of the camera")

C = 8
f = rng.normal(size=(12, 16, C))
q = rng.normal(size=(36, C))

# zero offsets and identity projections reproduce the IPM warp exactly
ident = DeformAttnParams.ipm_identity(C, heads=2, points=4)
print("zero-offset block vs IPM warp:", float(np.abs(deformable_cross_attention(q, f, ref, ident, valid)
                                                      - ipm_warp(f, ref, valid)).max()))

# random weights move the sampling points away from the reference
prm = DeformAttnParams.random(rng, C, heads=2, points=4, offset_scale=0.2)
out = deformable_cross_attention(q, f, ref, prm, valid)
print("random block output norm per valid query:", np.round(np.linalg.norm(out[valid], axis=1)[:6], 3))

# full forward over a two-level pyramid and a batch of 2
pyr = FeaturePyramid.random(rng, shapes=((12, 16), (6, 8)), channels=C, batch=2)
params = TransformerParams.random(rng, spec, n_levels=2, channels=C)
bev = persformer_forward(pyr, default_camera(), spec, params)
print("BEV outputs:", [b.shape for b in bev])

print("finite-difference gradient check (max relative error):")
for op, err in grad_check_suite(0).items():
    print(f"  {op:<28}{err:.2e}")
