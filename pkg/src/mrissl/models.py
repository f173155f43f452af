"""Generator, PatchGAN discriminator, classifier, and encoder+bottleneck weight transfer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import torch
import torch.nn as nn
from torch import Tensor

from .blocks import ARTBlock, Decoder, Encoder, MLPHead, TransformerConfig, init_weights


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 3
    widths: tuple[int, int, int] = (64, 128, 256)
    image_size: int = 256
    n_art: int = 9
    transformer_slots: tuple[int, ...] = (1, 6)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    n_classes: int = 4
    head_hidden: int = 256
    dropout: float = 0.5
    disc_width: int = 64
    disc_layers: int = 3

    def __post_init__(self) -> None:
        if len(self.widths) != 3:
            raise ValueError(f"widths must have three entries, got {self.widths}")
        if self.image_size % 4:
            raise ValueError(f"image_size {self.image_size} is not divisible by 4")
        bad = [s for s in self.transformer_slots if not 1 <= s <= self.n_art]
        if bad:
            raise ValueError(f"transformer slots {bad} outside 1..{self.n_art}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        s = self.image_size
        for _ in range(self.disc_layers):
            s = (s + 2 - 4) // 2 + 1
        if s < 3:
            raise ValueError(
                f"image_size {self.image_size} too small for a {self.disc_layers}-layer PatchGAN"
            )
        # fail at construction, not at first forward
        m, p = self.transformer.downsample_factor, self.transformer.patch
        if self.transformer_slots:
            if self.bottleneck_size % m or (self.bottleneck_size // m) % p:
                raise ValueError(
                    f"bottleneck size {self.bottleneck_size} incompatible with M={m}, patch={p}"
                )
            if self.bottleneck_size // m < 2:
                raise ValueError(
                    f"bottleneck size {self.bottleneck_size} / M={m} leaves a 1x1 map; instance norm needs more"
                )
            if self.widths[2] % m:
                raise ValueError(f"bottleneck width {self.widths[2]} not divisible by M={m}")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 4

    @property
    def transformer_flags(self) -> list[bool]:
        return [i in self.transformer_slots for i in range(1, self.n_art + 1)]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["transformer_slots"] = list(self.transformer_slots)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if "transformer" in d and isinstance(d["transformer"], dict):
            d["transformer"] = TransformerConfig(**d["transformer"])
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        if "transformer_slots" in d:
            d["transformer_slots"] = tuple(d["transformer_slots"])
        return cls(**d)

    @classmethod
    def toy(cls, image_size: int = 32, **overrides: Any) -> "ModelConfig":
        """Small configuration used by tests and the desk-scale reproductions."""
        base = dict(
            widths=(8, 16, 32),
            image_size=image_size,
            transformer=TransformerConfig(layers=2, heads=2, nd=32, hidden=64, patch=1),
            head_hidden=32,
            disc_width=8,
        )
        base.update(overrides)
        return cls(**base)


def _bottleneck(cfg: ModelConfig) -> nn.ModuleDict:
    c = cfg.widths[2]
    return nn.ModuleDict(
        {
            str(i + 1): ARTBlock(c, cfg.bottleneck_size, cfg.transformer, has_transformer=flag)
            for i, flag in enumerate(cfg.transformer_flags)
        }
    )


def _check_input(x: Tensor, cfg: ModelConfig, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"{who}: expected (N, {cfg.in_channels}, S, S), got {tuple(x.shape)}")
    if tuple(x.shape[2:]) != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"{who}: spatial size {tuple(x.shape[2:])} does not match config image_size {cfg.image_size}"
        )


class Generator(nn.Module):
    """encoder -> nine ART blocks -> decoder; output in [-1, 1]."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg.in_channels, self.cfg.widths)
        self.art = _bottleneck(self.cfg)
        self.decoder = Decoder(self.cfg.out_channels, self.cfg.widths)
        init_weights(self)

    def bottleneck(self, x: Tensor) -> Tensor:
        _check_input(x, self.cfg, "generator")
        f = self.encoder(x)
        for block in self.art.values():
            f = block(f)
        return f

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.bottleneck(x))


class Discriminator(nn.Module):
    """Conditional PatchGAN: (source, candidate) pair -> map of per-patch scores.

    With the default depth (three stride-2 convs, then two stride-1 convs, all
    kernel 4) the receptive field is 70x70 and a 256x256 pair yields 30x30 scores.
    """

    def __init__(self, in_channels: int = 6, width: int = 64, n_layers: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.n_layers = n_layers
        seq: list[nn.Module] = [nn.Conv2d(in_channels, width, 4, 2, 1), nn.LeakyReLU(0.2)]
        cur = width
        for i in range(1, n_layers):
            nxt = width * min(2**i, 8)
            seq += [nn.Conv2d(cur, nxt, 4, 2, 1), nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2)]
            cur = nxt
        nxt = width * min(2**n_layers, 8)
        seq += [nn.Conv2d(cur, nxt, 4, 1, 1), nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2)]
        seq.append(nn.Conv2d(nxt, 1, 4, 1, 1))
        self.layers = nn.Sequential(*seq)
        init_weights(self)

    def output_size(self, size: int) -> int:
        for _ in range(self.n_layers):
            size = (size + 2 - 4) // 2 + 1
        return size - 2

    def forward(self, pair: Tensor) -> Tensor:
        if pair.dim() != 4 or pair.shape[1] != self.in_channels:
            raise ValueError(
                f"discriminator: expected (N, {self.in_channels}, H, W), got {tuple(pair.shape)}"
            )
        return self.layers(pair)


class Classifier(nn.Module):
    """encoder -> nine ART blocks -> MLP head. ``forward`` returns class probabilities."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg.in_channels, self.cfg.widths)
        self.art = _bottleneck(self.cfg)
        self.head = MLPHead(self.cfg.widths[2], self.cfg.n_classes, self.cfg.head_hidden, self.cfg.dropout)
        init_weights(self)

    def bottleneck(self, x: Tensor) -> Tensor:
        _check_input(x, self.cfg, "classifier")
        f = self.encoder(x)
        for block in self.art.values():
            f = block(f)
        return f

    def logits(self, x: Tensor) -> Tensor:
        return self.head.logits(self.bottleneck(x))

    def forward(self, x: Tensor) -> Tensor:
        return torch.softmax(self.logits(x), dim=-1)


def build_discriminator(cfg: ModelConfig) -> Discriminator:
    return Discriminator(cfg.in_channels + cfg.out_channels, cfg.disc_width, cfg.disc_layers)


@dataclass
class TransferReport:
    transferred: list[str]
    skipped: list[str]
    fresh: list[str]

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in asdict(self).items()}


TRANSFER_GROUPS = ("encoder.", "art.")


def transfer_weights(src: dict[str, Tensor], dst: Classifier) -> TransferReport:
    """Copy every ``encoder.*`` and ``art.*`` tensor of a generator state into ``dst``.

    ``src`` is a flat name -> tensor mapping (e.g. ``Checkpoint.tensors``).
    The head keeps its current initialization; decoder and discriminator
    tensors are reported as skipped. Any missing or mismatched encoder/ART
    tensor raises before anything is copied.
    """
    dst_state = dst.state_dict()
    wanted = [k for k in dst_state if k.startswith(TRANSFER_GROUPS)]
    problems = []
    for name in wanted:
        if name not in src:
            problems.append(f"{name}: missing from source")
        elif tuple(src[name].shape) != tuple(dst_state[name].shape):
            problems.append(
                f"{name}: shape {tuple(src[name].shape)} != {tuple(dst_state[name].shape)}"
            )
    extra = [k for k in src if k.startswith(TRANSFER_GROUPS) and k not in dst_state]
    problems += [f"{name}: not present in classifier" for name in extra]
    if problems:
        raise ValueError("weight transfer failed: " + "; ".join(problems))

    with torch.no_grad():
        for name in wanted:
            dst_state[name].copy_(src[name].to(dst_state[name].dtype))
    skipped = [k for k in src if not k.startswith(TRANSFER_GROUPS) and not k.startswith("optim.")]
    fresh = [k for k in dst_state if not k.startswith(TRANSFER_GROUPS)]
    return TransferReport(transferred=wanted, skipped=skipped, fresh=fresh)
