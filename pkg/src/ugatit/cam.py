"""Class-activation-map attention shared by the generator and discriminators.

A global-average and a global-max branch each carry one weight per feature
channel. The weighted sums of the pooled features are the auxiliary
classifier logits, and the same weights rescale the feature maps into two
attention stacks that a 1x1 convolution fuses back to ``n`` channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, concat, conv2d, fully_connected, global_pool, leaky_relu,
                     relu, reshape)


@dataclass
class CamModule:
    w_avg: Tensor          # [n]
    w_max: Tensor          # [n]
    fuse_weight: Tensor    # [n, 2n, 1, 1]
    fuse_bias: Tensor      # [n]

    @property
    def channels(self) -> int:
        return self.w_avg.shape[0]


@dataclass
class CamOutput:
    logits: Tensor          # [B, 2]: (avg, max) per item
    attended: Tensor        # [B, n, H, W]

    @property
    def heatmap(self) -> np.ndarray:
        return cam_heatmap(self.attended)


def _check(features: Tensor, cam: CamModule) -> None:
    if features.shape[1] != cam.channels or cam.w_max.shape[0] != cam.channels:
        raise ValueError(
            f"CAM expects {cam.channels} channels, features have {features.shape[1]}")


def cam_logits(features: Tensor, cam: CamModule) -> Tensor:
    """Raw (pre-sigmoid) avg- and max-branch logits, shape ``[B, 2]``."""
    _check(features, cam)
    n = cam.channels
    avg = fully_connected(global_pool(features, "avg"), reshape(cam.w_avg, (1, n)))
    mx = fully_connected(global_pool(features, "max"), reshape(cam.w_max, (1, n)))
    return concat([avg, mx], axis=1)


def cam_attend(features: Tensor, cam: CamModule, act: str = "relu") -> Tensor:
    _check(features, cam)
    n = cam.channels
    stacked = concat([features * reshape(cam.w_avg, (1, n, 1, 1)),
                      features * reshape(cam.w_max, (1, n, 1, 1))], axis=1)
    fused = conv2d(stacked, cam.fuse_weight, cam.fuse_bias)
    return relu(fused) if act == "relu" else leaky_relu(fused, 0.2)


def cam_heatmap(attended) -> np.ndarray:
    """Channel sum, min-max scaled to [0, 1] per image (constant maps -> 0)."""
    data = attended.data if isinstance(attended, Tensor) else np.asarray(attended)
    summed = data.sum(axis=1, keepdims=True).astype(np.float64)
    lo = summed.min(axis=(1, 2, 3), keepdims=True)
    span = summed.max(axis=(1, 2, 3), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (summed - lo) / safe, 0.0)


def cam_forward(features: Tensor, cam: CamModule, act: str = "relu") -> CamOutput:
    logits = cam_logits(features, cam)
    attended = cam_attend(features, cam, act)
    return CamOutput(logits, attended)
