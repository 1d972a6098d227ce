"""Image and mask encoders producing four-level pyramids (strides 2, 4, 8, 16)."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import ConvBlock, Module
from .tensor import ShapeError, Tensor

N_LEVELS = 4


class ImageEncoder(Module):
    """Four stages of (strided conv block, conv block); level l is the stage-l output."""

    def __init__(self, channels, rng, dtype=np.float32, in_channels: int = 3):
        if len(channels) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel widths, got {channels}")
        self.stages = []
        cin = in_channels
        for c in channels:
            self.stages.append(_Stage(cin, c, rng, dtype))
            cin = c
        self.channels = tuple(channels)

    def __call__(self, img: Tensor) -> list[Tensor]:
        if img.data.ndim != 3:
            raise ShapeError(f"image must be H x W x C, got {img.shape}")
        h, w, _ = img.shape
        if h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} must be divisible by 16")
        feats = []
        x = img
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _Stage(Module):
    def __init__(self, cin, cout, rng, dtype):
        self.down = ConvBlock(cin, cout, rng, dtype, stride=2)
        self.refine = ConvBlock(cout, cout, rng, dtype, stride=1)

    def __call__(self, x):
        return self.refine(self.down(x))


class MaskEncoder(Module):
    def __init__(self, channels, rng, dtype=np.float32):
        if len(channels) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} mask channel widths, got {channels}")
        self.layers = []
        cin = 1
        for c in channels:
            self.layers.append(ConvBlock(cin, c, rng, dtype, stride=2))
            cin = c
        self.channels = tuple(channels)

    def __call__(self, mask) -> list[Tensor]:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        if m.ndim != 2:
            raise ShapeError(f"mask must be H x W, got {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask encoder expects a binary mask")
        dtype = self.layers[0].conv.weight.dtype
        x = Tensor(m.astype(dtype)[:, :, None])
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def image_encoder(img: Tensor, params: ImageEncoder) -> list[Tensor]:
    return params(img)


def mask_encoder(mask, params: MaskEncoder) -> list[Tensor]:
    return params(mask)
