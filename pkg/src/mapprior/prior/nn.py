"""Convolutional encoder, decoder, codebook and patch discriminator of the map prior."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from mapprior.presets import PriorArch


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    # fall back to fewer groups for narrow toy layers
    g = groups
    while channels % g:
        g //= 2
    return nn.GroupNorm(num_groups=max(g, 1), num_channels=channels, eps=1e-6, affine=True)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


class ResnetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int = 32):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(swish(self.norm1(x)))
        h = self.conv2(swish(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, channels: int, groups: int = 32):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) * c ** -0.5, dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    """Stride-2 3x3 conv with asymmetric (right/bottom) zero padding."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 2, 0)

    def forward(self, x):
        return self.conv(F.pad(x, (0, 1, 0, 1), value=0.0))


class Upsample(nn.Module):
    def __init__(self, channels: int, mode: str = "nearest"):
        super().__init__()
        self.mode = mode
        if mode == "nearest":
            self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        elif mode == "convT":
            self.conv = nn.ConvTranspose2d(channels, channels, 3, 2)
        else:
            raise ValueError(f"unknown upsample mode {mode!r}")

    def forward(self, x):
        if self.mode == "nearest":
            x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        return self.conv(x)


class Encoder(nn.Module):
    """Downsampling residual CNN mapping a layout to a D-channel latent grid."""

    def __init__(self, arch: PriorArch, in_channels: int | None = None, out_channels: int | None = None):
        super().__init__()
        g = arch.norm_groups
        in_channels = arch.in_channels if in_channels is None else in_channels
        out_channels = arch.embed_dim if out_channels is None else out_channels
        ch = arch.enc_levels[0][0]
        self.conv_in = nn.Conv2d(in_channels, ch, 3, 1, 1)
        blocks = []
        for out_ch, n_res, down in arch.enc_levels:
            for _ in range(n_res):
                blocks.append(ResnetBlock(ch, out_ch, g))
                ch = out_ch
            if down:
                blocks.append(Downsample(ch))
        self.down = nn.Sequential(*blocks)
        self.mid = nn.Sequential(ResnetBlock(ch, ch, g), AttnBlock(ch, g), ResnetBlock(ch, ch, g))
        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv2d(ch, out_channels, 3, 1, 1)

    def forward(self, x):
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(swish(self.norm_out(h)))


class Decoder(nn.Module):
    """Upsampling residual CNN with mid attention and a sigmoid output head."""

    def __init__(self, arch: PriorArch):
        super().__init__()
        g = arch.norm_groups
        ch = arch.dec_in_channels
        self.out_size = (arch.height, arch.width)
        self.conv_in = nn.Conv2d(arch.embed_dim, ch, 3, 1, 1)
        self.mid = nn.Sequential(ResnetBlock(ch, ch, g), AttnBlock(ch, g), ResnetBlock(ch, ch, g))
        blocks = []
        for out_ch, n_res, up in arch.dec_levels:
            for _ in range(n_res):
                blocks.append(ResnetBlock(ch, out_ch, g))
                ch = out_ch
            if up:
                blocks.append(Upsample(ch, up))
        self.up = nn.Sequential(*blocks)
        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv2d(ch, arch.in_channels, 3, 1, 1)

    @property
    def last_layer(self) -> torch.Tensor:
        return self.conv_out.weight

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        h = self.up(self.mid(self.conv_in(z)))
        if h.shape[-2:] != self.out_size:
            h = F.interpolate(h, size=self.out_size, mode="bilinear", align_corners=False)
        return self.conv_out(swish(self.norm_out(h)))

    def forward(self, z):
        return torch.sigmoid(self.logits(z))


class Codebook(nn.Module):
    """K learnable D-dimensional code vectors."""

    def __init__(self, n_codes: int, dim: int):
        super().__init__()
        if n_codes < 2:
            raise ValueError("codebook needs at least 2 codes")
        self.n_codes = n_codes
        self.dim = dim
        self.weight = nn.Parameter(torch.empty(n_codes, dim).uniform_(-1.0 / n_codes, 1.0 / n_codes))

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        return F.embedding(indices, self.weight)


class PatchDiscriminator(nn.Module):
    """Pix2pix-style patch discriminator with three normalized conv layers.

    Returns per-patch logits; probabilities are ``sigmoid`` of the output.
    """

    def __init__(self, in_channels: int, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, 4, stride, 1, bias=False),
                nn.BatchNorm2d(ndf * mult),
                nn.LeakyReLU(0.2, True),
            ]
        layers.append(nn.Conv2d(ndf * mult, 1, 4, 1, 1))
        self.main = nn.Sequential(*layers)

    def forward(self, x):
        return self.main(x)


class PriorModel(nn.Module):
    """Encoder, decoder, codebook and discriminator bundled as one module."""

    def __init__(self, arch: PriorArch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.codebook = Codebook(arch.n_codes, arch.embed_dim)
        self.discriminator = PatchDiscriminator(arch.in_channels, arch.disc_channels)

    def generator_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()
        yield from self.codebook.parameters()
