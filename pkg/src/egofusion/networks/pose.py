"""Relative-pose network over RGB and inferred inverse depth.

Six wirings are available (see :class:`FusionStrategy`). The multi-layer
variant runs two streams through one residual encoder whose convolutions
are shared while every BN layer is private to its modality; after each BN
of a residual main branch, channels whose BN scale fell under a threshold
are overwritten with the other modality's activations.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..losses import ExchangeLayer
from ..tensor import Parameter, Tensor, ops
from .layers import BatchNorm2d, Conv2d, Linear, Module

MODALITIES = ("rgb", "depth")


class FusionStrategy(enum.Enum):
    RGB_ONLY = "RgbOnly"
    DEPTH_ONLY = "DepthOnly"
    EARLY = "Early"
    LATE = "Late"
    MIDDLE = "Middle"
    MULTI_LAYER_CE = "MultiLayerCE"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).replace("_", "").replace("-", "").lower()
        for s in cls:
            if s.value.lower() == key or s.name.replace("_", "").lower() == key:
                return s
        raise ValueError(f"unknown fusion strategy {text!r}; choose from {[s.value for s in cls]}")

    @property
    def uses_rgb(self):
        return self is not FusionStrategy.DEPTH_ONLY

    @property
    def uses_depth(self):
        return self is not FusionStrategy.RGB_ONLY


@dataclass
class PoseNetConfig:
    strategy: FusionStrategy = FusionStrategy.MULTI_LAYER_CE
    widths: tuple = (8, 16, 32, 64)
    blocks: tuple = (2, 2, 2, 2)
    ce_threshold: float = 0.02
    regressor_hidden: tuple = (64, 64)
    output_scale: float = 0.01
    normalize_depth: bool = False

    def __post_init__(self):
        self.strategy = FusionStrategy.parse(self.strategy)
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.regressor_hidden = tuple(int(h) for h in self.regressor_hidden)
        if not self.ce_threshold > 0:
            raise ValueError("ce_threshold must be positive")
        if len(self.widths) != 4 or len(self.blocks) != 4 or len(self.regressor_hidden) != 2:
            raise ValueError("need four stage widths, four block counts and two hidden widths")
        if self.strategy is FusionStrategy.MULTI_LAYER_CE and any(w % 2 for w in self.widths):
            raise ValueError("channel exchange needs even widths")

    def as_dict(self):
        return {
            "strategy": self.strategy.value, "widths": list(self.widths), "blocks": list(self.blocks),
            "ce_threshold": self.ce_threshold, "regressor_hidden": list(self.regressor_hidden),
            "output_scale": self.output_scale, "normalize_depth": self.normalize_depth,
        }


# -- fusion primitives --------------------------------------------------------

def _gamma_values(g):
    return np.abs(g.data if isinstance(g, Tensor) else np.asarray(g))


def exchange_masks(gamma_rgb, gamma_depth, threshold):
    """Boolean per-channel replacement masks for the RGB and depth streams."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    g_r, g_d = _gamma_values(gamma_rgb), _gamma_values(gamma_depth)
    C = g_r.shape[0]
    if C % 2:
        raise ValueError(f"channel exchange needs an even channel count, got {C}")
    half = C // 2
    m_r = np.zeros(C, dtype=bool)
    m_d = np.zeros(C, dtype=bool)
    m_r[:half] = g_r[:half] < threshold
    m_d[half:] = g_d[half:] < threshold
    return m_r, m_d


def exchangeable_indices(C):
    half = C // 2
    return {"rgb": np.arange(half), "depth": np.arange(half, C)}


def channel_exchange(feat_rgb, feat_depth, gamma_rgb, gamma_depth, threshold=0.02):
    """Swap low-importance channels between the two post-BN feature maps.

    RGB may only lose channels of the first half, depth only of the second.
    A replaced channel takes the other stream's activation, so gradients
    flow across modalities. Returns the new maps and ``(n_rgb, n_depth)``.
    """
    if feat_rgb.shape != feat_depth.shape:
        raise ValueError("feature maps must have identical shapes")
    m_r, m_d = exchange_masks(gamma_rgb, gamma_depth, threshold)
    if m_r.shape[0] != feat_rgb.shape[1]:
        raise ValueError("gamma length does not match channel count")
    out_r = ops.where(m_r.reshape(1, -1, 1, 1), feat_depth, feat_rgb) if m_r.any() else feat_rgb
    out_d = ops.where(m_d.reshape(1, -1, 1, 1), feat_rgb, feat_depth) if m_d.any() else feat_depth
    return out_r, out_d, (int(m_r.sum()), int(m_d.sum()))


def soft_fusion(feat_rgb, feat_depth, gate: Linear):
    """Sigmoid-gated selection over the concatenated feature vector."""
    if feat_rgb.shape[0] != feat_depth.shape[0]:
        raise ValueError("batch mismatch")
    both = ops.concat([feat_rgb, feat_depth], axis=1)
    if gate.weight.shape[1] != both.shape[1]:
        raise ValueError("gate width does not match concatenated features")
    return ops.sigmoid(gate(both)) * both


def late_combine(pose_rgb, pose_depth, logits):
    """Softmax-weighted sum of the two streams' pose vectors."""
    w = ops.softmax(logits, axis=0)
    return pose_rgb * w[0] + pose_depth * w[1]


# -- encoder ------------------------------------------------------------------

class _ModalBN(Module):
    """One BN per modality behind a single name."""

    def __init__(self, ch, modalities):
        self.bn = {m: BatchNorm2d(ch) for m in modalities}

    def forward(self, xs):
        return [self.bn[m](x) for m, x in zip(self.bn, xs)]


class BasicBlock(Module):
    expansion = 1

    def __init__(self, cin, cout, stride, modalities, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn1 = _ModalBN(cout, modalities)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False, rng=rng)
        self.bn2 = _ModalBN(cout, modalities)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = Conv2d(cin, cout, 1, stride=stride, bias=False, rng=rng)
            self.ds_bn = _ModalBN(cout, modalities)


def _shared_conv(conv, xs):
    if len(xs) == 1:
        return [conv(xs[0])]
    n = xs[0].shape[0]
    y = conv(ops.concat(xs, axis=0))
    return [y[i * n:(i + 1) * n] for i in range(len(xs))]


class ResNetEncoder(Module):
    """ResNet-18 topology (7x7 stem, max-pool, four stages of basic blocks).

    With several modalities the convolutions are shared and each BN is
    per-modality; ``exchange=True`` enables channel exchange after the BNs
    of the residual main branches (never after the stem or shortcut BNs).
    """

    def __init__(self, in_ch, widths, blocks, modalities=("rgb",), exchange=False,
                 threshold=0.02, rng=None):
        rng = rng or np.random.default_rng(0)
        self.modalities = tuple(modalities)
        if exchange and self.modalities != MODALITIES:
            raise ValueError("exchange needs exactly the rgb and depth streams")
        self.exchange = exchange
        self.threshold = threshold
        self.stem = Conv2d(in_ch, widths[0], 7, stride=2, padding=3, bias=False, rng=rng)
        self.stem_bn = _ModalBN(widths[0], self.modalities)
        self.blocks = []
        cin = widths[0]
        for stage, (w, n) in enumerate(zip(widths, blocks)):
            for b in range(n):
                stride = 2 if (stage > 0 and b == 0) else 1
                self.blocks.append(BasicBlock(cin, w, stride, self.modalities, rng))
                cin = w
        self.out_channels = cin
        self.exchange_counts = []

    def exchange_bns(self):
        """(BN module, per-modality BNs) pairs where exchange is applied."""
        out = []
        for blk in self.blocks:
            out.append(blk.bn1)
            out.append(blk.bn2)
        return out

    def _maybe_exchange(self, xs, mbn):
        if not self.exchange:
            return xs
        r, d, counts = channel_exchange(xs[0], xs[1], mbn.bn["rgb"].gamma, mbn.bn["depth"].gamma,
                                        self.threshold)
        self.exchange_counts.append(counts)
        return [r, d]

    def forward(self, xs):
        """``xs``: one (N, C, H, W) tensor per modality. Returns pooled (N, F) features per modality."""
        if len(xs) != len(self.modalities):
            raise ValueError(f"expected {len(self.modalities)} streams, got {len(xs)}")
        self.exchange_counts = []
        xs = self.stem_bn(_shared_conv(self.stem, xs))
        xs = [ops.max_pool2d(ops.relu(x), 3, 2, 1) for x in xs]
        for blk in self.blocks:
            y = blk.bn1(_shared_conv(blk.conv1, xs))
            y = self._maybe_exchange(y, blk.bn1)
            y = [ops.relu(v) for v in y]
            y = blk.bn2(_shared_conv(blk.conv2, y))
            y = self._maybe_exchange(y, blk.bn2)
            if blk.downsample is not None:
                sc = blk.ds_bn(_shared_conv(blk.downsample, xs))
            else:
                sc = xs
            xs = [ops.relu(a + b) for a, b in zip(y, sc)]
        return [x.mean(axis=(2, 3)) for x in xs]

    def conv_parameters(self):
        return [m.weight for m in self.modules() if isinstance(m, Conv2d)]


class PoseRegressor(Module):
    """FC-ReLU-FC-ReLU-FC to a 6-vector, scaled by ``output_scale``."""

    def __init__(self, in_f, hidden, output_scale, rng):
        self.fc1 = Linear(in_f, hidden[0], rng)
        self.fc2 = Linear(hidden[0], hidden[1], rng)
        self.fc3 = Linear(hidden[1], 6, rng)
        self.output_scale = output_scale

    def forward(self, feat):
        if feat.shape[1] != self.fc1.weight.shape[1]:
            raise ValueError(f"regressor expects {self.fc1.weight.shape[1]} features, got {feat.shape[1]}")
        x = ops.relu(self.fc1(feat))
        x = ops.relu(self.fc2(x))
        return self.fc3(x) * self.output_scale


def regressor_forward(feature, regressor: PoseRegressor):
    return regressor(feature)


class PoseNet(Module):
    """Relative pose ``T_a_to_b`` from a frame pair and its inverse depths."""

    def __init__(self, cfg: PoseNetConfig | None = None, seed=0):
        self.cfg = cfg or PoseNetConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        s = c.strategy
        S = FusionStrategy
        enc = lambda in_ch, mods=("rgb",), ex=False: ResNetEncoder(  # noqa: E731
            in_ch, c.widths, c.blocks, mods, ex, c.ce_threshold, rng)
        reg = lambda f: PoseRegressor(f, c.regressor_hidden, c.output_scale, rng)  # noqa: E731
        if s is S.RGB_ONLY:
            self.encoder = enc(6)
            self.regressor = reg(self.encoder.out_channels)
        elif s is S.DEPTH_ONLY:
            self.encoder = enc(2, ("depth",))
            self.regressor = reg(self.encoder.out_channels)
        elif s is S.EARLY:
            self.encoder = enc(8)
            self.regressor = reg(self.encoder.out_channels)
        elif s in (S.LATE, S.MIDDLE):
            self.encoder_rgb = enc(6)
            self.encoder_depth = enc(2, ("depth",))
            f = self.encoder_rgb.out_channels
            if s is S.LATE:
                self.regressor_rgb = reg(f)
                self.regressor_depth = reg(f)
                self.combine_logits = Parameter(np.zeros(2))
            else:
                self.gate = Linear(2 * f, 2 * f, rng)
                self.regressor = reg(2 * f)
        else:
            # depth is replicated to 3 channels per frame so both streams are 6-channel
            self.encoder = enc(6, MODALITIES, True)
            f = self.encoder.out_channels
            self.regressor_rgb = reg(f)
            self.regressor_depth = reg(f)
            self.combine_logits = Parameter(np.zeros(2))
        self.name_parameters()
        self.diagnostics = {}

    @property
    def strategy(self):
        return self.cfg.strategy

    def _prep_depth(self, depth_pair):
        if self.cfg.normalize_depth:
            mu = depth_pair.mean(axis=(2, 3), keepdims=True)
            var = ((depth_pair - mu) * (depth_pair - mu)).mean(axis=(2, 3), keepdims=True)
            depth_pair = (depth_pair - mu) / (var + 1e-12).sqrt()
        return depth_pair

    def forward(self, rgb_pair, depth_pair=None):
        """``rgb_pair`` (N, 6, H, W), ``depth_pair`` (N, 2, H, W) -> (N, 6) pose vectors."""
        S = FusionStrategy
        s = self.cfg.strategy
        if s.uses_rgb and (rgb_pair is None or rgb_pair.shape[1] != 6):
            raise ValueError(f"{s.value} needs a 6-channel RGB pair")
        if s.uses_depth:
            if depth_pair is None or depth_pair.shape[1] != 2:
                raise ValueError(f"{s.value} needs a 2-channel inverse-depth pair")
            depth_pair = self._prep_depth(depth_pair)
        diag = {}
        if s is S.RGB_ONLY:
            (f,) = self.encoder([rgb_pair])
            pose = self.regressor(f)
        elif s is S.DEPTH_ONLY:
            (f,) = self.encoder([depth_pair])
            pose = self.regressor(f)
        elif s is S.EARLY:
            (f,) = self.encoder([ops.concat([rgb_pair, depth_pair], axis=1)])
            pose = self.regressor(f)
        elif s is S.LATE:
            (fr,) = self.encoder_rgb([rgb_pair])
            (fd,) = self.encoder_depth([depth_pair])
            pr, pd = self.regressor_rgb(fr), self.regressor_depth(fd)
            pose = late_combine(pr, pd, self.combine_logits)
            diag.update(pose_rgb=pr.data, pose_depth=pd.data)
        elif s is S.MIDDLE:
            (fr,) = self.encoder_rgb([rgb_pair])
            (fd,) = self.encoder_depth([depth_pair])
            pose = self.regressor(soft_fusion(fr, fd, self.gate))
        else:
            d3 = ops.concat([depth_pair[:, 0:1]] * 3 + [depth_pair[:, 1:2]] * 3, axis=1)
            fr, fd = self.encoder([rgb_pair, d3])
            pr, pd = self.regressor_rgb(fr), self.regressor_depth(fd)
            pose = late_combine(pr, pd, self.combine_logits)
            diag.update(pose_rgb=pr.data, pose_depth=pd.data,
                        exchange_counts=list(self.encoder.exchange_counts),
                        regressor_input_rgb=fr.data)
        if "combine_logits" in vars(self):
            w = np.exp(self.combine_logits.data - self.combine_logits.data.max())
            diag["stream_weights"] = w / w.sum()
        self.diagnostics = diag
        return pose

    def exchange_layers(self):
        """Scaling factors entering the polarization regularizer (empty unless multi-layer CE)."""
        if self.cfg.strategy is not FusionStrategy.MULTI_LAYER_CE:
            return []
        layers = []
        for mbn in self.encoder.exchange_bns():
            C = mbn.bn["rgb"].channels
            layers.append(ExchangeLayer(
                gammas={m: mbn.bn[m].gamma for m in MODALITIES},
                index_sets=exchangeable_indices(C)))
        return layers

    def exchangeable_gammas(self):
        """Flat array of all exchangeable |gamma| values across layers and modalities."""
        vals = [np.abs(layer.gammas[m].data[layer.index_sets[m]])
                for layer in self.exchange_layers() for m in MODALITIES]
        return np.concatenate(vals) if vals else np.zeros(0)


def pose_forward(rgb_pair, depth_pair, cfg: PoseNetConfig | None = None, net: PoseNet | None = None):
    net = net or PoseNet(cfg)
    pose = net(rgb_pair, depth_pair)
    return pose, net.diagnostics
