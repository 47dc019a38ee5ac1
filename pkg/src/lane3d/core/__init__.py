"""Attention kernels, the BEV transformer and its lane heads."""
from .model import (FeaturePyramid, HeadWeights, RawPrediction, TransformerParams,
                    persformer_forward, prediction_heads)
from .ops import (DeformAttnParams, SelfAttnParams, bilinear_sample, deformable_cross_attention,
                  ipm_warp, self_attention)

__all__ = ["FeaturePyramid", "HeadWeights", "RawPrediction", "TransformerParams", "persformer_forward",
           "prediction_heads", "DeformAttnParams", "SelfAttnParams", "bilinear_sample",
           "deformable_cross_attention", "ipm_warp", "self_attention"]
