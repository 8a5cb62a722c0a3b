"""Semantic enhancement: segmentation-guided region salience and fusion.

The segmentation feature map is average-pooled and projected to the joint
space; each region is weighted by a squashed cosine between its projection
and that segmentation embedding, then gated and conditionally fused with
it.  The cosine is divided by sqrt(embed_dim) before squashing, which in
sigmoid mode pins every salience weight strictly inside
(sigmoid(-1/sqrt(D)), sigmoid(1/sqrt(D))).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import DimConfig, ModelConfig
from .errors import ConfigError


@dataclass
class VsemParams:
    seg_fc_w: Tensor      # (D, C_s)  FC applied to the pooled segmentation
    seg_fc_b: Tensor      # (D,)
    region_proj: Tensor   # (D, D_l)  bare projection of region features
    gate_proj: Tensor     # (D, D)    inner projection of the tanh gate
    fuse_proj: Tensor     # (D, D)    outer projection of the fused rows

    def named(self, prefix="vsem"):
        return {
            prefix + ".seg_fc_w": self.seg_fc_w,
            prefix + ".seg_fc_b": self.seg_fc_b,
            prefix + ".region_proj": self.region_proj,
            prefix + ".gate_proj": self.gate_proj,
            prefix + ".fuse_proj": self.fuse_proj,
        }


@dataclass
class VsemOutput:
    seg_embed: Tensor     # (D,)   pooled segmentation embedding
    alphas: Tensor        # (K,)   per-region salience weights
    enhanced: Tensor      # (K, D) semantically enhanced region rows


def init_vsem_params(cfg: ModelConfig, dims: DimConfig, rng) -> VsemParams:
    d = cfg.embed_dim

    def lin(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                      requires_grad=True)

    return VsemParams(
        seg_fc_w=lin(d, dims.C_s),
        seg_fc_b=Tensor(np.zeros(d), requires_grad=True),
        region_proj=lin(d, dims.D_l),
        gate_proj=lin(d, d),
        fuse_proj=lin(d, d),
    )


def seg_embed_from_pooled(pooled: Tensor, p: VsemParams) -> Tensor:
    return ag.matmul(p.seg_fc_w, pooled) + p.seg_fc_b


def pool_segmentation(seg_feat: Tensor, p: VsemParams) -> Tensor:
    """Average-pool an (H, W, C_s) map and project it to the joint space."""
    return seg_embed_from_pooled(ag.avg_pool_spatial(seg_feat), p)


def project_regions(regions: Tensor, p: VsemParams) -> Tensor:
    return ag.matmul(regions, ag.transpose(p.region_proj))


def salience_weights(seg_embed: Tensor, regions: Tensor, p: VsemParams,
                     mode: str = "sigmoid", projected: Tensor | None = None) -> Tensor:
    """Per-region salience from scaled region/segmentation cosines.

    sigmoid mode squashes each scaled cosine independently; softmax mode
    normalises them across regions with smoothing factor 1.
    """
    if projected is None:
        projected = project_regions(regions, p)
    d = seg_embed.shape[0]
    cos = ag.cosine_rows(ag.reshape(seg_embed, (1, d)), projected)
    scaled = cos * (1.0 / math.sqrt(d))
    if mode == "sigmoid":
        out = ag.sigmoid(scaled)
    elif mode == "softmax":
        out = ag.smoothed_softmax(scaled, 1.0)
    else:
        raise ConfigError("salience mode must be 'sigmoid' or 'softmax', got %r"
                          % (mode,))
    return ag.reshape(out, (projected.shape[0],))


def semantic_fuse(alphas: Tensor, regions: Tensor, seg_embed: Tensor,
                  p: VsemParams, projected: Tensor | None = None) -> Tensor:
    """Weight, gate and conditionally fuse regions with the segmentation.

    rows_i = fuse_proj @ (tanh(gate_proj @ (a_i r_i)) * (a_i r_i) + seg)
    where r_i is the projected region.
    """
    if projected is None:
        projected = project_regions(regions, p)
    weighted = ag.mul(ag.reshape(alphas, (alphas.shape[0], 1)), projected)
    gate = ag.tanh(ag.matmul(weighted, ag.transpose(p.gate_proj)))
    fused = ag.mul(gate, weighted) + seg_embed
    return ag.matmul(fused, ag.transpose(p.fuse_proj))


def vsem_forward(regions: Tensor, seg_feat_or_pooled: Tensor, p: VsemParams,
                 mode: str = "sigmoid") -> VsemOutput:
    """Full semantic branch for one image.

    ``seg_feat_or_pooled`` is either the raw (H, W, C_s) map or an already
    pooled (C_s,) vector; pooling is average so both routes agree exactly.
    """
    if seg_feat_or_pooled.ndim == 3:
        pooled = ag.avg_pool_spatial(seg_feat_or_pooled)
    else:
        pooled = seg_feat_or_pooled
    seg_embed = seg_embed_from_pooled(pooled, p)
    projected = project_regions(regions, p)
    alphas = salience_weights(seg_embed, regions, p, mode, projected=projected)
    enhanced = semantic_fuse(alphas, regions, seg_embed, p, projected=projected)
    return VsemOutput(seg_embed=seg_embed, alphas=alphas, enhanced=enhanced)
