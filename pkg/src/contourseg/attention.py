"""Global-contrast attention and the hierarchical attention chain.

The attention map of a feature block is the ReLU of its spatially
standardized channels averaged into one plane, plus a floor `lam`. There
are no learned parameters in the attention function itself; the chain
steps fuse pooled context, compressed encoder features and the previous
level's message with small convolutions before computing attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    LayerParams,
    ShapeMismatchError,
    Tensor,
    avgpool2d,
    concat_channels,
    conv2d,
    maxpool2d,
    mean,
    mul,
    relu,
    sqrt,
    upsample_bilinear,
)


@dataclass
class AttentionConfig:
    """lam is the additive floor of attention maps; eps guards zero variance."""

    lam: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class HgamState:
    """Outputs of one chain step: the message passed down and its attention map."""

    message: Tensor
    attention: Tensor


@dataclass
class HgamLevelParams:
    """Convolutions of one chain level.

    h1/h2 transform max/avg-pooled context, h3 compresses the encoder
    feature (1x1), h4 transforms the incoming message, and fuse mixes the
    concatenated branches (1x1).
    """

    h1: LayerParams
    h2: LayerParams
    h3: LayerParams
    h4: LayerParams
    fuse: LayerParams


def global_contrast_attention(f: Tensor, cfg: AttentionConfig | None = None) -> Tensor:
    """Attention plane from spatial standardization of each channel.

    Each channel is standardized over its spatial extent with population
    variance, the standardized channels are averaged into a single plane,
    negatives are zeroed, and `lam` is added. A zero-variance channel
    contributes exactly zero. Output values are therefore >= lam, and the
    map is invariant to positive affine rescaling of the input wherever
    the channel variance dominates eps.
    """
    if cfg is None:
        cfg = AttentionConfig()
    if f.ndim != 4:
        raise ShapeMismatchError(f"attention input must be 4-d, got shape {tuple(f.shape)}")
    mu = mean(f, (2, 3), keepdims=True)
    centered = f - mu
    var = mean(mul(centered, centered), (2, 3), keepdims=True)
    z = centered / sqrt(var + cfg.eps)
    return relu(mean(z, (1,), keepdims=True)) + cfg.lam


def hgam_step(
    e_i: Tensor,
    u_i: Tensor,
    prev_msg: Tensor | None,
    level: int,
    num_levels: int,
    params: HgamLevelParams,
    cfg: AttentionConfig | None = None,
) -> HgamState:
    """One top-down chain step at `level` (1 = finest, num_levels = deepest).

    e_i is the encoder feature at the level grid, u_i the full-resolution
    resampled feature. At the deepest level the message branch pools e_i
    to half resolution, convolves and upsamples back; below that it
    consumes `prev_msg` from the level above (at half this level's grid).
    """
    if cfg is None:
        cfg = AttentionConfig()
    grid_h, grid_w = e_i.shape[2], e_i.shape[3]
    h1 = relu(conv2d(maxpool2d(u_i, grid_h, grid_w), params.h1))
    h2 = relu(conv2d(avgpool2d(u_i, grid_h, grid_w), params.h2))
    h3 = relu(conv2d(e_i, params.h3))
    if level == num_levels:
        pooled = maxpool2d(e_i, max(grid_h // 2, 1), max(grid_w // 2, 1))
        h4 = upsample_bilinear(relu(conv2d(pooled, params.h4)), grid_h, grid_w)
    else:
        if prev_msg is None:
            raise ValueError(f"level {level} of {num_levels} requires the previous message")
        if prev_msg.shape[2] * 2 != grid_h or prev_msg.shape[3] * 2 != grid_w:
            raise ShapeMismatchError(
                f"previous message grid {prev_msg.shape[2]}x{prev_msg.shape[3]} does not "
                f"upsample by 2 onto {grid_h}x{grid_w}"
            )
        h4 = relu(conv2d(upsample_bilinear(prev_msg, grid_h, grid_w), params.h4))
    message = relu(conv2d(concat_channels([h1, h2, h3, h4]), params.fuse))
    return HgamState(message=message, attention=global_contrast_attention(message, cfg))


def guide(res_i: Tensor, attention: Tensor) -> Tensor:
    """Scale a feature block by its attention plane, broadcast over channels."""
    if attention.ndim != 4 or attention.shape[1] != 1:
        raise ShapeMismatchError(
            f"attention must be N x 1 x H x W, got shape {tuple(attention.shape)}"
        )
    if res_i.shape[0] != attention.shape[0] or res_i.shape[2:] != attention.shape[2:]:
        raise ShapeMismatchError(
            f"attention {tuple(attention.shape)} does not match features {tuple(res_i.shape)}"
        )
    return mul(res_i, attention)
