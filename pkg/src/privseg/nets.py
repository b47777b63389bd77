"""Network architectures: a conditional denoising UNet and a segmentation UNet.

Both are small encoder/decoder UNets with GroupNorm (no running statistics, so
parameters alone fully determine behaviour). The denoiser is conditioned on
the source image via channel concatenation and on the timestep via a
sinusoidal embedding injected into every conv block.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style embedding of integer timesteps, shape (B, dim)."""
    if t.ndim != 1:
        raise ValueError("t must be a 1D batch of timesteps")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ConvBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU; optional additive time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(self.conv1(x))
        if self.time_proj is not None:
            if t_emb is None:
                raise ValueError("block built with time conditioning but no t_emb given")
            h = h + self.time_proj(t_emb)[:, :, None, None]
        h = F.silu(h)
        h = F.silu(self.norm2(self.conv2(h)))
        return h


class UNetBackbone(nn.Module):
    """Shared UNet skeleton: avg-pool downsampling, bilinear upsampling, skip concat."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        base_channels: int,
        depth: int,
        time_dim: int | None = None,
    ):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        self.depth = depth
        widths = [base_channels * (2**i) for i in range(depth)]
        self.encoders = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.encoders.append(ConvBlock(ch, w, time_dim))
            ch = w
        self.decoders = nn.ModuleList()
        for i in range(depth - 2, -1, -1):
            self.decoders.append(ConvBlock(widths[i + 1] + widths[i], widths[i], time_dim))
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            h = enc(h, t_emb)
            if i < self.depth - 1:
                skips.append(h)
                h = F.avg_pool2d(h, 2)
        for dec in self.decoders:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = dec(torch.cat([h, skip], dim=1), t_emb)
        return self.head(h)


class DenoiserUNet(nn.Module):
    """Noise predictor for conditional diffusion.

    Input is the noisy target concatenated with the conditioning source image
    (2 channels); output is the predicted noise (1 channel). The output conv
    starts at zero so an untrained model predicts zero noise.
    """

    def __init__(self, base_channels: int = 32, depth: int = 3, time_dim: int = 128):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.backbone = UNetBackbone(2, 1, base_channels, depth, time_dim)
        nn.init.zeros_(self.backbone.head.weight)
        nn.init.zeros_(self.backbone.head.bias)

    def forward(
        self, noisy: torch.Tensor, condition: torch.Tensor, t: torch.Tensor
    ) -> torch.Tensor:
        if noisy.shape != condition.shape:
            raise ValueError(f"noisy {tuple(noisy.shape)} != condition {tuple(condition.shape)}")
        # the embedding is a parameter-free constant, so casting it to the
        # working dtype keeps the whole forward pass in the caller's precision
        t_emb = self.time_mlp(sinusoidal_time_embedding(t, self.time_dim).to(noisy.dtype))
        return self.backbone(torch.cat([noisy, condition], dim=1), t_emb)


class SegUNet(nn.Module):
    """Lesion probability map from a (source, paired image) 2-channel input.

    ``in_channels=1`` is available for a strict single-modality variant; the
    default pipelines instead duplicate the source so every mode shares one
    architecture.
    """

    def __init__(self, base_channels: int = 16, depth: int = 3, in_channels: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.backbone = UNetBackbone(in_channels, 1, base_channels, depth)

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        if pair.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels}-channel input, got {pair.shape[1]}"
            )
        return torch.sigmoid(self.backbone(pair))
