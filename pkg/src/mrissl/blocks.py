"""Differentiable building blocks for the hybrid residual-CNN / transformer generator.

Every block is a plain ``nn.Module``. Shapes are parametric: nothing is tied
to 256x256 inputs, so toy configurations (32x32, a few channels) exercise the
exact same code paths as the full-size model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 12
    heads: int = 12
    nd: int = 768
    hidden: int = 3072
    patch: int = 16
    downsample_factor: int = 4

    def __post_init__(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.nd < 1 or self.hidden < 1 or self.patch < 1:
            raise ValueError(f"transformer config values must be positive: {self}")
        if self.nd % self.heads:
            raise ValueError(f"nd={self.nd} is not divisible by heads={self.heads}")
        m = self.downsample_factor
        if m < 2 or m & (m - 1):
            raise ValueError(f"downsample_factor must be a power of two >= 2, got {m}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))


def _check_4d(x: Tensor, channels: int, who: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{who}: expected a 4D (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"{who}: expected {channels} channels, got {x.shape[1]}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """N(0, std) for conv/linear weights, zero biases, identity affine for norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.LayerNorm)) and m.weight is not None:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ConvNormAct(nn.Sequential):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        reflect: bool = False,
        transpose: bool = False,
        act: bool = True,
    ):
        layers: list[nn.Module] = []
        if transpose:
            layers.append(
                nn.ConvTranspose2d(in_ch, out_ch, kernel_size, stride, padding, output_padding=stride - 1)
            )
        elif reflect:
            layers += [nn.ReflectionPad2d(padding), nn.Conv2d(in_ch, out_ch, kernel_size, stride)]
        else:
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding))
        layers.append(nn.InstanceNorm2d(out_ch, affine=True))
        if act:
            layers.append(nn.ReLU())
        super().__init__(*layers)


class ResidualBlock(nn.Module):
    """out = x + F(x) with F = conv -> norm -> ReLU -> conv -> norm."""

    def __init__(self, channels: int, kernel_size: int = 3, norm: bool = True):
        super().__init__()
        self.channels = channels
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size)
        self.pad = nn.ReflectionPad2d(pad) if pad else nn.Identity()
        self.norm1 = nn.InstanceNorm2d(channels, affine=True) if norm else nn.Identity()
        self.norm2 = nn.InstanceNorm2d(channels, affine=True) if norm else nn.Identity()

    def residual(self, x: Tensor) -> Tensor:
        h = F.relu(self.norm1(self.conv1(self.pad(x))))
        return self.norm2(self.conv2(self.pad(h)))

    def forward(self, x: Tensor) -> Tensor:
        _check_4d(x, self.channels, "residual_block")
        return x + self.residual(x)


class Encoder(nn.Module):
    """Three convs: k7 s1 (reflection pad 3), then two k3 s2 convs."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, int, int] = (64, 128, 256)):
        super().__init__()
        self.in_channels = in_channels
        self.widths = tuple(widths)
        c1, c2, c3 = widths
        self.layers = nn.Sequential(
            ConvNormAct(in_channels, c1, 7, padding=3, reflect=True),
            ConvNormAct(c1, c2, 3, stride=2, padding=1),
            ConvNormAct(c2, c3, 3, stride=2, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_4d(x, self.in_channels, "encoder")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"encoder: spatial size {tuple(x.shape[2:])} is not divisible by 4")
        return self.layers(x)


class Decoder(nn.Module):
    """Two k3 s2 transposed convs then a k7 projection and tanh."""

    def __init__(self, out_channels: int = 3, widths: tuple[int, int, int] = (64, 128, 256)):
        super().__init__()
        c1, c2, c3 = widths
        self.in_channels = c3
        self.layers = nn.Sequential(
            ConvNormAct(c3, c2, 3, stride=2, padding=1, transpose=True),
            ConvNormAct(c2, c1, 3, stride=2, padding=1, transpose=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(c1, out_channels, 7),
        )

    def forward(self, f: Tensor) -> Tensor:
        _check_4d(f, self.in_channels, "decoder")
        return torch.tanh(self.layers(f))


class Downsampler(nn.Module):
    """log2(M) stride-2 k3 convs; channels go Nc -> Nc/M, spatial H -> H/M."""

    def __init__(self, channels: int, factor: int = 4):
        super().__init__()
        if channels % factor:
            raise ValueError(f"downsample: channels {channels} not divisible by M={factor}")
        self.channels = channels
        self.factor = factor
        n = int(math.log2(factor))
        widths = [channels // 2**i for i in range(n + 1)]
        self.layers = nn.Sequential(
            *[ConvNormAct(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(n)]
        )

    def forward(self, f: Tensor) -> Tensor:
        _check_4d(f, self.channels, "downsample")
        if f.shape[2] % self.factor or f.shape[3] % self.factor:
            raise ValueError(
                f"downsample: spatial size {tuple(f.shape[2:])} not divisible by M={self.factor}"
            )
        return self.layers(f)


class Upsampler(nn.Module):
    """Inverse of Downsampler: log2(M) stride-2 k3 transposed convs, Nc/M -> Nc."""

    def __init__(self, channels: int, factor: int = 4):
        super().__init__()
        n = int(math.log2(factor))
        widths = [channels // 2**i for i in range(n, -1, -1)]
        self.in_channels = widths[0]
        self.layers = nn.Sequential(
            *[
                ConvNormAct(widths[i], widths[i + 1], 3, stride=2, padding=1, transpose=True)
                for i in range(n)
            ]
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_4d(x, self.in_channels, "upsample")
        return self.layers(x)


def flatten_patches(f: Tensor, patch: int) -> Tensor:
    """(N, c, h, w) -> (N, NP, c*P*P); patches in row-major grid order, each flattened (c, py, px)."""
    n, c, h, w = f.shape
    if h % patch or w % patch:
        raise ValueError(f"patch_embed: spatial size {(h, w)} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = f.reshape(n, c, gh, patch, gw, patch).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * patch * patch)


def unflatten_patches(tokens: Tensor, channels: int, grid: tuple[int, int], patch: int) -> Tensor:
    """Exact inverse of :func:`flatten_patches`."""
    n, n_p, d = tokens.shape
    gh, gw = grid
    if n_p != gh * gw or d != channels * patch * patch:
        raise ValueError(
            f"deflatten: tokens {(n_p, d)} inconsistent with grid {grid}, "
            f"channels {channels}, patch {patch}"
        )
    x = tokens.reshape(n, gh, gw, channels, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(n, channels, gh * patch, gw * patch)


class PatchEmbed(nn.Module):
    """Shared linear projection of flattened patches plus learnable positional encoding."""

    def __init__(self, channels: int, grid: tuple[int, int], patch: int, nd: int):
        super().__init__()
        self.channels = channels
        self.grid = grid
        self.patch = patch
        self.proj = nn.Linear(channels * patch * patch, nd)
        self.pos = nn.Parameter(torch.zeros(1, grid[0] * grid[1], nd))
        nn.init.normal_(self.pos, 0.0, 0.02)

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def forward(self, f: Tensor) -> Tensor:
        _check_4d(f, self.channels, "patch_embed")
        tokens = flatten_patches(f, self.patch)
        if tokens.shape[1] != self.n_patches:
            raise ValueError(
                f"patch_embed: got {tokens.shape[1]} patches, positional encoding has {self.n_patches}"
            )
        return self.proj(tokens) + self.pos


class PatchDeflatten(nn.Module):
    """Project tokens back to patch pixels and rearrange them onto the spatial grid."""

    def __init__(self, channels: int, grid: tuple[int, int], patch: int, nd: int):
        super().__init__()
        self.channels = channels
        self.grid = grid
        self.patch = patch
        self.proj = nn.Linear(nd, channels * patch * patch)

    def forward(self, z: Tensor) -> Tensor:
        return unflatten_patches(self.proj(z), self.channels, self.grid, self.patch)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, nd: int, heads: int):
        super().__init__()
        if nd % heads:
            raise ValueError(f"nd={nd} not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = nd // heads
        self.qkv = nn.Linear(nd, 3 * nd)
        self.out = nn.Linear(nd, nd)

    def forward(self, z: Tensor, return_weights: bool = False):
        n, t, d = z.shape
        q, k, v = self.qkv(z).chunk(3, dim=-1)
        q, k, v = (a.reshape(n, t, self.heads, self.head_dim).transpose(1, 2) for a in (q, k, v))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(n, t, d)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""

    def __init__(self, nd: int, heads: int, hidden: int):
        super().__init__()
        self.nd = nd
        self.norm1 = nn.LayerNorm(nd)
        self.attn = MultiHeadSelfAttention(nd, heads)
        self.norm2 = nn.LayerNorm(nd)
        self.mlp = nn.Sequential(nn.Linear(nd, hidden), nn.GELU(), nn.Linear(hidden, nd))

    def forward(self, z: Tensor, return_weights: bool = False):
        if z.dim() != 3 or z.shape[-1] != self.nd:
            raise ValueError(f"transformer_layer: expected (N, NP, {self.nd}), got {tuple(z.shape)}")
        a, weights = self.attn(self.norm1(z), return_weights=True)
        z = z + a
        z = z + self.mlp(self.norm2(z))
        return (z, weights) if return_weights else z


class FuseCompress(nn.Module):
    """Channel-wise concat(g, f) followed by a 1x1 compression conv (2C -> C)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, g: Tensor, f: Tensor) -> Tensor:
        if g.shape[2:] != f.shape[2:]:
            raise ValueError(
                f"fuse_compress: spatial mismatch {tuple(g.shape[2:])} vs {tuple(f.shape[2:])}"
            )
        x = torch.cat([g, f], dim=1)
        _check_4d(x, 2 * self.channels, "fuse_compress")
        return self.conv(x)


class TransformerBranch(nn.Module):
    """downsample -> patch embed -> L layers -> deflatten -> upsample."""

    def __init__(self, channels: int, spatial: int, cfg: TransformerConfig):
        super().__init__()
        m = cfg.downsample_factor
        if spatial % m:
            raise ValueError(f"bottleneck size {spatial} not divisible by M={m}")
        h = spatial // m
        if h % cfg.patch:
            raise ValueError(f"downsampled size {h} not divisible by patch size {cfg.patch}")
        nc = channels // m
        grid = (h // cfg.patch, h // cfg.patch)
        self.down = Downsampler(channels, m)
        self.embed = PatchEmbed(nc, grid, cfg.patch, cfg.nd)
        self.layers = nn.ModuleList(
            [TransformerLayer(cfg.nd, cfg.heads, cfg.hidden) for _ in range(cfg.layers)]
        )
        self.deflatten = PatchDeflatten(nc, grid, cfg.patch, cfg.nd)
        self.up = Upsampler(channels, m)

    def forward(self, f: Tensor) -> Tensor:
        z = self.embed(self.down(f))
        for layer in self.layers:
            z = layer(z)
        return self.up(self.deflatten(z))


class ARTBlock(nn.Module):
    """Aggregated residual transformer block.

    With a transformer branch the block fuses global context ``g`` with the
    local input ``f`` and passes the compressed map through a residual block;
    without one it reduces to the residual block alone. Shape in == shape out.
    """

    def __init__(
        self,
        channels: int,
        spatial: int,
        cfg: TransformerConfig | None = None,
        has_transformer: bool = False,
    ):
        super().__init__()
        self.channels = channels
        self.has_transformer = has_transformer
        if has_transformer:
            if cfg is None:
                raise ValueError("an ART block with a transformer branch needs a TransformerConfig")
            self.transformer = TransformerBranch(channels, spatial, cfg)
            self.compress = FuseCompress(channels)
        self.res = ResidualBlock(channels)

    def forward(self, f: Tensor) -> Tensor:
        _check_4d(f, self.channels, "art_block")
        if self.has_transformer:
            f = self.compress(self.transformer(f), f)
        return self.res(f)


class MLPHead(nn.Module):
    """Global average pool -> dense+ReLU -> LayerNorm -> dropout -> dense -> softmax."""

    def __init__(self, channels: int, n_classes: int = 4, hidden: int = 256, dropout: float = 0.5):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_classes)

    def logits(self, f: Tensor) -> Tensor:
        _check_4d(f, self.channels, "mlp_head")
        h = f.mean(dim=(2, 3))
        h = self.norm(F.relu(self.fc1(h)))
        return self.fc2(self.drop(h))

    def forward(self, f: Tensor) -> Tensor:
        return torch.softmax(self.logits(f), dim=-1)
