"""Synthetic drive segments and the LiDAR-assisted 3D label pipeline."""
from .fitting import fit_with_rotation, smooth_fit
from .pipeline import (LabelConfig, filter_points_near_lane, generate_labels, interpolate_lane_3d,
                       mark_visibility, remove_points_in_boxes, splice_segment)
from .synth import LaneSpec, LidarFrame, SceneSpec, synth_scene, uturn_polyline

__all__ = ["fit_with_rotation", "smooth_fit", "LabelConfig", "filter_points_near_lane", "generate_labels",
           "interpolate_lane_3d", "mark_visibility", "remove_points_in_boxes", "splice_segment", "LaneSpec",
           "LidarFrame", "SceneSpec", "synth_scene", "uturn_polyline"]
