"""Channel and spatial attention gates and their channel-then-spatial cascade.

Channel gate: sigmoid(MLP(global avg pool F) + MLP(global max pool F)), one
weight per channel, with a bias-free two-layer MLP shared by both pooled
descriptors (hidden width C/8, ReLU in between).

Spatial gate: sigmoid(conv7x7([mean over channels; max over channels])), one
weight per position, from a bias-free 1×2×7×7 kernel (98 parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, add, concat, conv2d, dense, mul, pool2d, record, relu, reshape, sigmoid

SPATIAL_KERNEL = 7


def hidden_width(channels: int) -> int:
    return max(1, channels // 8)


@dataclass
class ChannelAttentionParams:
    w1: Tensor  # C × hidden
    w2: Tensor  # hidden × C

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    def count(self) -> int:
        return self.w1.data.size + self.w2.data.size


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # 1 × 2 × 7 × 7

    def count(self) -> int:
        return self.kernel.data.size


@dataclass
class AttentionBlock:
    """Attention applied to one feature map; either gate may be disabled."""

    channel: ChannelAttentionParams | None
    spatial: SpatialAttentionParams | None



def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_channel_params(channels: int, rng: np.random.Generator) -> ChannelAttentionParams:
    hidden = hidden_width(channels)
    return ChannelAttentionParams(
        w1=Tensor(_kaiming(rng, (channels, hidden), channels), requires_grad=True),
        w2=Tensor(_kaiming(rng, (hidden, channels), hidden), requires_grad=True),
    )


def init_spatial_params(rng: np.random.Generator) -> SpatialAttentionParams:
    k = SPATIAL_KERNEL
    return SpatialAttentionParams(Tensor(_kaiming(rng, (1, 2, k, k), 2 * k * k), requires_grad=True))


def zero_block(channels: int, channel: bool = True, spatial: bool = True) -> AttentionBlock:
    hidden = hidden_width(channels)
    k = SPATIAL_KERNEL
    return AttentionBlock(
        channel=ChannelAttentionParams(Tensor(np.zeros((channels, hidden))), Tensor(np.zeros((hidden, channels))))
        if channel
        else None,
        spatial=SpatialAttentionParams(Tensor(np.zeros((1, 2, k, k)))) if spatial else None,
    )


def _gate(z) -> Tensor:
    """sigmoid(z) kept strictly inside (0, 1) at the storage precision.

    Saturated values are nudged to the nearest representable interior
    number; the gradient is that of the plain sigmoid.
    """
    s = sigmoid(z)
    info = np.finfo(s.data.dtype)
    out = np.clip(s.data, info.tiny, 1.0 - info.epsneg)
    return record("gate", (s,), out, lambda g: (g,))


def channel_attention(F, p: ChannelAttentionParams) -> Tensor:
    """Per-channel gate of shape N×C×1×1, each entry in (0, 1)."""
    if F.ndim != 4 or F.shape[1] != p.channels:
        raise ContractError(f"channel attention expects N×{p.channels}×H×W input, got {F.shape}")
    n, c = F.shape[:2]

    def mlp(v):
        return dense(relu(dense(v, p.w1)), p.w2)

    avg = reshape(pool2d(F, "avg", scope="global_spatial"), (n, c))
    mx = reshape(pool2d(F, "max", scope="global_spatial"), (n, c))
    return reshape(_gate(add(mlp(avg), mlp(mx))), (n, c, 1, 1))


def spatial_attention(F, p: SpatialAttentionParams) -> Tensor:
    """Per-position gate of shape N×1×H×W, each entry in (0, 1)."""
    if F.ndim != 4:
        raise ContractError(f"spatial attention expects N×C×H×W input, got {F.shape}")
    desc = concat([pool2d(F, "avg", scope="global_channel"), pool2d(F, "max", scope="global_channel")], axis=1)
    return _gate(conv2d(desc, p.kernel, stride=1, padding="same"))


def apply_attention(F, w) -> Tensor:
    n, c, h, wd = F.shape
    if tuple(w.shape) not in ((n, c, 1, 1), (n, 1, h, wd)):
        raise ContractError(f"attention weights {tuple(w.shape)} do not broadcast over features {F.shape}")
    return mul(F, w)


def cbam_refine(F, block: AttentionBlock) -> Tensor:
    """Channel gate first, then spatial gate on the channel-refined map."""
    if block.channel is not None:
        F = apply_attention(F, channel_attention(F, block.channel))
    if block.spatial is not None:
        F = apply_attention(F, spatial_attention(F, block.spatial))
    return F


def param_count(block: AttentionBlock) -> tuple[int, int]:
    channel = block.channel.count() if block.channel is not None else 0
    spatial = block.spatial.count() if block.spatial is not None else 0
    return channel, spatial
