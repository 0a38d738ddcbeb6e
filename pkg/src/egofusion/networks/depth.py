"""U-Net style inverse-depth network with four output scales."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ops
from .layers import BatchNorm2d, Conv2d, Module

NUM_SCALES = 4


@dataclass
class DepthNetConfig:
    encoder_channels: tuple = (16, 32, 64, 128)
    decoder_channels: tuple = (8, 16, 32, 64)
    num_scales: int = NUM_SCALES
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.num_scales != NUM_SCALES:
            raise ValueError(f"num_scales is fixed at {NUM_SCALES}")
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("need four encoder and four decoder widths")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("require 0 < min_depth < max_depth")


def sigmoid_to_inv_depth(sigma, min_depth, max_depth):
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return sigma * (hi - lo) + lo


class ResidualUnit(Module):
    """Two 3x3 conv/BN layers with an identity shortcut."""

    def __init__(self, ch, rng):
        self.conv1 = Conv2d(ch, ch, 3, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(ch)
        self.conv2 = Conv2d(ch, ch, 3, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(ch)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return ops.relu(y + x)


class DepthEncoder(Module):
    def __init__(self, widths, rng):
        self.down, self.down_bn, self.res = [], [], []
        cin = 3
        for c in widths:
            self.down.append(Conv2d(cin, c, 3, stride=2, padding=1, bias=False, rng=rng))
            self.down_bn.append(BatchNorm2d(c))
            self.res.append(ResidualUnit(c, rng))
            cin = c

    def forward(self, x):
        feats = []
        for conv, bn, res in zip(self.down, self.down_bn, self.res):
            x = res(ops.relu(bn(conv(x))))
            feats.append(x)
        return feats


class DepthNet(Module):
    """Image (N, 3, H, W) -> inverse depth at scales 1, 1/2, 1/4, 1/8."""

    def __init__(self, cfg: DepthNetConfig | None = None, seed=0):
        self.cfg = cfg or DepthNetConfig()
        rng = np.random.default_rng(seed)
        enc, dec = self.cfg.encoder_channels, self.cfg.decoder_channels
        self.encoder = DepthEncoder(enc, rng)
        # index 0 holds the finest level; built coarse to fine
        self.upconv_a, self.upconv_b, self.head = [None] * 4, [None] * 4, [None] * 4
        cin = enc[3]
        for i in (3, 2, 1, 0):
            self.upconv_a[i] = Conv2d(cin, dec[i], 3, padding=1, rng=rng)
            skip = enc[i - 1] if i > 0 else 0
            self.upconv_b[i] = Conv2d(dec[i] + skip, dec[i], 3, padding=1, rng=rng)
            self.head[i] = Conv2d(dec[i], 1, 3, padding=1, rng=rng)
            cin = dec[i]
        self.name_parameters()

    def forward(self, image):
        N, C, H, W = image.shape
        if C != 3:
            raise ValueError(f"depth network expects 3-channel images, got {C}")
        if H % 16 or W % 16:
            raise ValueError(f"image extents {H}x{W} must be divisible by 16")
        feats = self.encoder((image - 0.45) * (1 / 0.225))
        x = feats[3]
        out = [None] * NUM_SCALES
        for i in (3, 2, 1, 0):
            x = ops.activation(self.upconv_a[i](x), "elu")
            x = ops.upsample_bilinear(x, x.shape[2] * 2, x.shape[3] * 2)
            if i > 0:
                x = ops.concat([x, feats[i - 1]], axis=1)
            x = ops.activation(self.upconv_b[i](x), "elu")
            sigma = ops.sigmoid(self.head[i](x))
            out[i] = sigmoid_to_inv_depth(sigma, self.cfg.min_depth, self.cfg.max_depth)
        return out


def depth_forward(image, cfg: DepthNetConfig | None = None, net: DepthNet | None = None):
    net = net or DepthNet(cfg)
    return net(image)
