"""ResNet-style encoders, attention blocks and the deconvolutional header.

Bias conventions are fixed by the published parameter totals: encoder
convolutions carry no bias, header and attention convolutions do. The
``*_params`` functions give the closed forms the built modules are checked
against.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .data_model import N_CHANNELS
from .nn_backend import (
    batch_norm,
    batchnorm_params,
    conv2d_params,
    conv_transpose2d_params,
    global_avg_pool,
    softmax_axis,
)

EMBED_CHANNELS = 512
STEM_CHANNELS = 64
WIDTHS = (64, 128, 256, 512)
DOWNSAMPLE = 16
DEFAULT_HEADER_CHANNELS = 7

VARIANTS = {
    "resnet18": {"depths": (2, 2, 2, 2), "attention": False},
    "resnet34": {"depths": (3, 4, 6, 3), "attention": False},
    "resnet18attn": {"depths": (2, 2, 2, 2), "attention": True},
}
ENCODER_NAMES = tuple(VARIANTS)


def canonical_variant(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in VARIANTS:
        raise ValueError(f"unknown encoder variant {name!r}; expected one of {ENCODER_NAMES}")
    return key


class DownBlock(nn.Module):
    """Two 3x3 conv-BN-ReLU stages plus a shortcut; the sum is the last op."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = batch_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = batch_norm(out_channels)
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                batch_norm(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        return out + self.shortcut(x)


class UpBlock(nn.Module):
    """2x transposed conv halving the channels, then two conv-BN-ReLU stages."""

    def __init__(self, in_channels: int):
        super().__init__()
        if in_channels % 2:
            raise ValueError("UpBlock needs an even channel count")
        out = in_channels // 2
        self.deconv = nn.ConvTranspose2d(in_channels, out, 2, stride=2, bias=True)
        self.conv1 = nn.Conv2d(out, out, 3, padding=1, bias=True)
        self.bn1 = batch_norm(out)
        self.conv2 = nn.Conv2d(out, out, 3, padding=1, bias=True)
        self.bn2 = batch_norm(out)

    def forward(self, x):
        x = self.deconv(x)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class AttnBlock(nn.Module):
    """Self-attention over spatial positions, gated by a scalar ``gamma`` (init 0)."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 8:
            raise ValueError("attention channels must be divisible by 8")
        self.query = nn.Conv2d(channels, channels // 8, 1)
        self.key = nn.Conv2d(channels, channels // 8, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(1))

    def attention_map(self, x):
        b, _, h, w = x.shape
        q = self.query(x).view(b, -1, h * w)
        k = self.key(x).view(b, -1, h * w)
        energy = torch.bmm(q.transpose(1, 2), k)  # [B, N(query), N(key)]
        return softmax_axis(energy, axis=-1)

    def forward(self, x):
        b, c, h, w = x.shape
        attn = self.attention_map(x)
        v = self.value(x).view(b, c, h * w)
        out = torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)
        return self.gamma * out + x


def make_layer(in_channels: int, out_channels: int, depth: int, stride: int) -> nn.Sequential:
    blocks = [DownBlock(in_channels, out_channels, stride)]
    blocks += [DownBlock(out_channels, out_channels, 1) for _ in range(depth - 1)]
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    """[B, 14, H, W] -> [B, 512, H/16, W/16]."""

    def __init__(self, variant: str = "resnet18", in_channels: int = N_CHANNELS):
        super().__init__()
        self.variant = canonical_variant(variant)
        spec = VARIANTS[self.variant]
        self.conv1 = nn.Conv2d(in_channels, STEM_CHANNELS, 7, stride=2, padding=3, bias=False)
        self.bn1 = batch_norm(STEM_CHANNELS)
        prev = STEM_CHANNELS
        for i, (width, depth) in enumerate(zip(WIDTHS, spec["depths"]), start=1):
            setattr(self, f"layer{i}", make_layer(prev, width, depth, 1 if i == 1 else 2))
            prev = width
        self.attention = spec["attention"]
        if self.attention:
            self.attn1 = AttnBlock(WIDTHS[2])
            self.attn2 = AttnBlock(WIDTHS[3])

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer2(self.layer1(x))
        x = self.layer3(x)
        if self.attention:
            x = self.attn1(x)
        x = self.layer4(x)
        if self.attention:
            x = self.attn2(x)
        return x


class DeconvHeader(nn.Module):
    """[B, 512, h, w] -> [B, nc, 16h, 16w] via four UpBlocks and a 1x1 conv."""

    def __init__(self, out_channels: int = DEFAULT_HEADER_CHANNELS, in_channels: int = EMBED_CHANNELS):
        super().__init__()
        if out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        self.out_channels = out_channels
        self.layer1 = UpBlock(in_channels)
        self.layer2 = UpBlock(in_channels // 2)
        self.layer3 = UpBlock(in_channels // 4)
        self.layer4 = UpBlock(in_channels // 8)
        self.conv1 = nn.Conv2d(in_channels // 16, out_channels, 1, bias=True)

    def forward(self, x):
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.conv1(x)


class SegmentationModel(nn.Module):
    def __init__(self, encoder: Encoder, header: DeconvHeader):
        super().__init__()
        self.encoder = encoder
        self.header = header

    def forward(self, x):
        return self.header(self.encoder(x))


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """He-normal convolutions, zero biases, BN affine (1, 0), attention gates 0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
            elif isinstance(m, AttnBlock):
                m.gamma.zero_()
    return module


def build_encoder(variant: str, seed: int = 0) -> Encoder:
    return init_weights(Encoder(variant), seed)


def build_deconv_header(nc: int = DEFAULT_HEADER_CHANNELS, seed: int = 0) -> DeconvHeader:
    return init_weights(DeconvHeader(nc), seed)


def build_attn_block(channels: int, seed: int = 0) -> AttnBlock:
    return init_weights(AttnBlock(channels), seed)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def forward_embed(network: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[1] != N_CHANNELS:
        raise ValueError(f"expected [B, {N_CHANNELS}, H, W], got {list(batch.shape)}")
    if batch.shape[-1] % DOWNSAMPLE or batch.shape[-2] % DOWNSAMPLE:
        raise ValueError(f"spatial size must be divisible by {DOWNSAMPLE}, got {list(batch.shape[-2:])}")
    out = network(batch)
    if not torch.isfinite(out).all():
        raise FloatingPointError("encoder produced non-finite values")
    return out


def pool_embedding(latent: torch.Tensor) -> torch.Tensor:
    """Global average over spatial positions: [B, C, h, w] -> [B, C]."""
    return global_avg_pool(latent)


# closed forms

def downblock_params(in_channels: int, out_channels: int, stride: int = 1) -> int:
    n = conv2d_params(in_channels, out_channels, 3, False) + batchnorm_params(out_channels)
    n += conv2d_params(out_channels, out_channels, 3, False) + batchnorm_params(out_channels)
    if stride != 1 or in_channels != out_channels:
        n += conv2d_params(in_channels, out_channels, 1, False) + batchnorm_params(out_channels)
    return n


def upblock_params(in_channels: int) -> int:
    out = in_channels // 2
    return (
        conv_transpose2d_params(in_channels, out, 2, True)
        + 2 * (conv2d_params(out, out, 3, True) + batchnorm_params(out))
    )


def attnblock_params(channels: int) -> int:
    c8 = channels // 8
    return 2 * conv2d_params(channels, c8, 1, True) + conv2d_params(channels, channels, 1, True) + 1


def encoder_param_table(variant: str) -> dict[str, int]:
    """Per-layer parameter counts, keyed like the module's children."""
    spec = VARIANTS[canonical_variant(variant)]
    table = {
        "conv1": conv2d_params(N_CHANNELS, STEM_CHANNELS, 7, False),
        "bn1": batchnorm_params(STEM_CHANNELS),
    }
    prev = STEM_CHANNELS
    for i, (width, depth) in enumerate(zip(WIDTHS, spec["depths"]), start=1):
        stride = 1 if i == 1 else 2
        table[f"layer{i}"] = downblock_params(prev, width, stride) + (depth - 1) * downblock_params(width, width)
        prev = width
    if spec["attention"]:
        table["attn1"] = attnblock_params(WIDTHS[2])
        table["attn2"] = attnblock_params(WIDTHS[3])
    return table


def header_param_table(nc: int = DEFAULT_HEADER_CHANNELS) -> dict[str, int]:
    c = EMBED_CHANNELS
    return {
        "layer1": upblock_params(c),
        "layer2": upblock_params(c // 2),
        "layer3": upblock_params(c // 4),
        "layer4": upblock_params(c // 8),
        "conv1": conv2d_params(c // 16, nc, 1, True),
    }


def layer_parameter_counts(network: nn.Module) -> dict[str, int]:
    return {name: count_parameters(child) for name, child in network.named_children()}
