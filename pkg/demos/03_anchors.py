"""
Lane anchors: layout, association and offsets
=============================================
"""
import numpy as np

from lane3d.anchors import associate, build_anchor_set, decode_prediction, distance_matrix, encode_targets
from lane3d.lanes import Lane3D, resample_at_y

anchors = build_anchor_set()
print(f"{len(anchors)} anchors = {len(anchors.starts_x)} starts x {len(anchors.angles)} angles")
print("angles (deg):", np.round(np.degrees(anchors.angles), 2))

# a gently curving lane and a straight one
ys = np.linspace(4, 95, 40)
lanes = [Lane3D(np.column_stack([-1.8 + 0.02 * ys + 2e-4 * ys ** 2, ys, 0.01 * ys]), category=1),
         Lane3D(np.column_stack([np.full_like(ys, 1.75), ys, np.zeros_like(ys)]), category=2)]

D = distance_matrix(lanes, anchors)
match = associate(lanes, anchors)
for g, a in match.items():
    s, k = anchors.start_index[a], anchors.angle_index[a]
    print(f"lane {g}: anchor {a} (start x {anchors.starts_x[s]:.2f} m, angle {np.degrees(anchors.angles[k]):.1f} deg),"
          f" mean distance {D[g, a]:.3f} m")

# offsets relative to the anchor, then back
lane, a = lanes[0], match[0]
t = encode_targets(lane, None, a, anchors)
print("x offsets (m):", np.round(t.x_off, 3))
decoded, _ = decode_prediction(a, t, anchors)
x, _, _ = resample_at_y(lane, anchors.y_samples_3d)
print("decode error (m):", float(np.abs(decoded.x - x).max()))
