"""
Scoring 3D lanes
================

Predictions are matched to ground truth on ten fixed forward positions.
A pair counts when most of the ground truth's positions fall within 1.5 m.
"""
import numpy as np

from lane3d.evaluation import eval3d, lane_pair_distance
from lane3d.lanes import Lane3D

ys = np.linspace(3, 100, 60)


def lane(x0, bend=0.0, z=0.0, y=ys, cat=1):
    return Lane3D(np.column_stack([x0 + bend * (y / 100) ** 2, y, np.full_like(y, z)]), category=cat)


gts = [lane(-3.5), lane(0.0, cat=2), lane(3.5)]
d, _ = lane_pair_distance(lane(0.3, bend=2.0), gts[1])
print("per-position distance for a bending prediction:", np.round(d, 2))

preds = [
    lane(-3.4, z=0.05),              # close: TP
    lane(0.3, bend=2.0, cat=3),      # drifts past 1.5 m only far out: TP, wrong category
    lane(5.1),                       # 1.6 m off the right lane: FP, and that lane is missed
    lane(8.0, y=ys[:20]),            # nothing there: FP
]
print(eval3d([preds], [gts]).format_text())
