"""Residual 3D U-Net denoiser and convolutional variational autoencoders."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .neural import (
    Conv3d,
    ConvTranspose3d,
    Dense,
    InstanceNorm3d,
    PReLU,
    kl_divergence,
    soft_dice_loss,
)


class NetKind(str, enum.Enum):
    DAE = "dae"
    VAE_SINGLE = "vae_single"
    VAE_MULTI = "vae_multi"


@dataclass(frozen=True)
class NetworkSpec:
    kind: NetKind
    in_channels: int
    out_channels: int
    channels: tuple[int, ...]
    strides: tuple[int, ...]
    num_res_units: int = 0
    latent_size: int = 0
    kl_weight: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", NetKind(self.kind))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be positive")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError("strides must be 1 or 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in/out channels must be positive")
        if self.num_res_units < 0:
            raise ValueError("num_res_units must be >= 0")
        if self.kind is NetKind.DAE:
            if len(self.strides) != len(self.channels) - 1:
                raise ValueError("a U-Net needs len(strides) == len(channels) - 1")
        else:
            # one stride per encoder stage, as in the VAE rows of Table 2
            if len(self.strides) != len(self.channels):
                raise ValueError("a VAE needs len(strides) == len(channels)")
            if self.latent_size < 1:
                raise ValueError("a VAE needs latent_size >= 1")
            if self.kl_weight < 0:
                raise ValueError("kl_weight must be >= 0")

    @property
    def is_vae(self) -> bool:
        return self.kind is not NetKind.DAE

    @property
    def downsampling(self) -> int:
        return math.prod(self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def table2_dae(n_organs: int) -> NetworkSpec:
    return NetworkSpec(NetKind.DAE, n_organs, n_organs,
                       (8, 16, 32, 64, 128, 256, 512, 1024, 2048), (2, 2, 2, 2, 1, 1, 1, 1), num_res_units=2)


def table2_vae_single() -> NetworkSpec:
    return NetworkSpec(NetKind.VAE_SINGLE, 1, 1, (32, 32, 64, 64), (2, 2, 2, 2), latent_size=10)


def table2_vae_multi(n_organs: int) -> NetworkSpec:
    return NetworkSpec(NetKind.VAE_MULTI, n_organs, n_organs,
                       (32, 32, 64, 64, 128, 128), (2, 2, 2, 2, 1, 1), latent_size=100)


class IndivisibleDimsError(ValueError):
    pass


def check_dims(spec: NetworkSpec, input_dims: Sequence[int]) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in input_dims)
    f = spec.downsampling
    if len(dims) != 3 or any(d <= 0 or d % f for d in dims):
        raise IndivisibleDimsError(f"input dims {dims} are not divisible by the total stride {f}")
    return dims


class ConvBlock(nn.Module):
    """conv(3^3) -> instance norm -> PReLU."""

    def __init__(self, in_ch, out_ch, stride=1, generator=None, device=None):
        super().__init__()
        self.conv = Conv3d(in_ch, out_ch, stride=stride, generator=generator, device=device)
        self.norm = InstanceNorm3d(out_ch, device=device)
        self.act = PReLU(device=device)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualUnit(nn.Module):
    """``subunits`` conv blocks plus an additive skip.

    The skip is a strided 1x1x1 conv when channels or stride change. With
    ``subunits == 0`` this is one plain conv block without a skip.
    """

    def __init__(self, in_ch, out_ch, stride=1, subunits=2, generator=None, device=None):
        super().__init__()
        n = max(subunits, 1)
        blocks = [ConvBlock(in_ch, out_ch, stride, generator, device)]
        blocks += [ConvBlock(out_ch, out_ch, 1, generator, device) for _ in range(n - 1)]
        self.blocks = nn.Sequential(*blocks)
        self.residual = subunits > 0
        self.skip = None
        if self.residual and (in_ch != out_ch or stride != 1):
            self.skip = Conv3d(in_ch, out_ch, kernel=1, stride=stride, generator=generator, device=device)

    def forward(self, x):
        y = self.blocks(x)
        if not self.residual:
            return y
        return y + (x if self.skip is None else self.skip(x))


class UpBlock(nn.Module):
    """Transpose conv -> norm -> PReLU."""

    def __init__(self, in_ch, out_ch, stride, generator=None, device=None):
        super().__init__()
        self.conv = ConvTranspose3d(in_ch, out_ch, stride=stride, generator=generator, device=device)
        self.norm = InstanceNorm3d(out_ch, device=device)
        self.act = PReLU(device=device)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class UNet(nn.Module):
    """Encoder-decoder with channel-concatenated skips, logits out."""

    def __init__(self, spec: NetworkSpec, generator=None, device=None):
        super().__init__()
        self.spec = spec
        ch, st, ru = spec.channels, spec.strides, spec.num_res_units
        self.down = nn.ModuleList([ResidualUnit(spec.in_channels, ch[0], 1, ru, generator, device)])
        for i, s in enumerate(st):
            self.down.append(ResidualUnit(ch[i], ch[i + 1], s, ru, generator, device))
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in reversed(range(len(st))):
            self.up.append(UpBlock(ch[i + 1], ch[i], st[i], generator, device))
            self.merge.append(ResidualUnit(2 * ch[i], ch[i], 1, ru, generator, device))
        self.head = Conv3d(ch[0], spec.out_channels, kernel=1, generator=generator, device=device)

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


class VarAutoEncoder(nn.Module):
    """Strided conv encoder -> Gaussian latent -> transpose-conv decoder.

    ``forward`` returns ``(logits, mean, logvar)``. The latent is the mean
    when ``noise`` is None and the model is in eval mode, otherwise
    ``mean + exp(logvar / 2) * noise`` (noise drawn from ``generator`` if not
    given).
    """

    def __init__(self, spec: NetworkSpec, input_dims, generator=None, device=None):
        super().__init__()
        self.spec = spec
        dims = check_dims(spec, input_dims)
        ch, st, ru = spec.channels, spec.strides, spec.num_res_units
        enc = []
        prev = spec.in_channels
        for c, s in zip(ch, st):
            enc.append(ResidualUnit(prev, c, s, ru, generator, device))
            prev = c
        self.encoder = nn.Sequential(*enc)
        self.bottleneck = (ch[-1],) + tuple(d // spec.downsampling for d in dims)
        flat = math.prod(self.bottleneck)
        self.mean_head = Dense(flat, spec.latent_size, generator, device)
        self.logvar_head = Dense(flat, spec.latent_size, generator, device)
        self.expand = Dense(spec.latent_size, flat, generator, device)
        self.expand_act = PReLU(device=device)
        dec = []
        for i in reversed(range(len(ch))):
            dec.append(UpBlock(ch[i], ch[i - 1] if i > 0 else ch[0], st[i], generator, device))
        self.decoder = nn.Sequential(*dec)
        self.head = Conv3d(ch[0], spec.out_channels, kernel=1, generator=generator, device=device)

    def encode(self, x):
        h = self.encoder(x).flatten(1)
        return self.mean_head(h), self.logvar_head(h)

    def decode(self, z):
        h = self.expand_act(self.expand(z)).reshape((z.shape[0],) + self.bottleneck)
        return self.head(self.decoder(h))

    def forward(self, x, noise=None, generator=None):
        mean, logvar = self.encode(x)
        if noise is None and self.training:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise
        return self.decode(z), mean, logvar


def _generator(seed: Optional[int]):
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed) % (1 << 63))
    return g


def build_unet(spec: NetworkSpec, input_dims, seed: int = 0, device=None) -> UNet:
    if spec.kind is not NetKind.DAE:
        raise ValueError(f"build_unet needs a DAE spec, got {spec.kind.value}")
    check_dims(spec, input_dims)
    return UNet(spec, _generator(seed), device)


def build_vae(spec: NetworkSpec, input_dims, seed: int = 0, device=None) -> VarAutoEncoder:
    if not spec.is_vae:
        raise ValueError(f"build_vae needs a VAE spec, got {spec.kind.value}")
    return VarAutoEncoder(spec, input_dims, _generator(seed), device)


def build_network(spec: NetworkSpec, input_dims, seed: int = 0, device=None) -> nn.Module:
    if spec.is_vae:
        return build_vae(spec, input_dims, seed, device)
    return build_unet(spec, input_dims, seed, device)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def vae_loss(recon_logits, target, mean, logvar, kl_weight: float):
    """Soft Dice loss plus ``kl_weight`` times the batch-mean KL to N(0, I)."""
    loss = soft_dice_loss(recon_logits, target)
    if kl_weight == 0:
        return loss
    return loss + kl_weight * kl_divergence(mean, logvar)
