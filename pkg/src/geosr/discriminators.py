"""Patch image critic and the location-matching projection discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from torch import Tensor, nn

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class ImageDiscriminatorConfig:
    base_features: int = 64
    num_downsamples: int = 4

    def __post_init__(self):
        if self.base_features <= 0 or self.num_downsamples < 0:
            raise ConfigError("invalid image discriminator config")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LocDiscriminatorConfig:
    base_features: int = 64
    num_downsamples: int = 3
    embed_proj_dim: int = 64
    embed_dim: int = 256

    def __post_init__(self):
        if self.base_features <= 0 or self.embed_proj_dim <= 0 or self.num_downsamples < 0:
            raise ConfigError("invalid location discriminator config")

    def to_dict(self):
        return asdict(self)


def _strided_trunk(base: int, num_down: int) -> tuple[nn.Sequential, int]:
    layers: list[nn.Module] = [nn.Conv2d(3, base, 3, 1, 1), nn.LeakyReLU(0.2)]
    ch = base
    for _ in range(num_down):
        nxt = min(ch * 2, base * 8)
        layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = nxt
    return nn.Sequential(*layers), ch


def _check_image(img: Tensor, num_down: int) -> None:
    if img.dim() != 4 or img.shape[1] != 3:
        raise InputError(f"expected (B, 3, H, W) image, got {tuple(img.shape)}")
    stride = 2**num_down
    if min(img.shape[-2:]) < stride:
        raise InputError(f"image {tuple(img.shape[-2:])} smaller than total stride {stride}")


class ImageDiscriminator(nn.Module):
    """Strided conv critic producing a (B, H / 2^n, W / 2^n) logit map."""

    def __init__(self, cfg: ImageDiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk, ch = _strided_trunk(cfg.base_features, cfg.num_downsamples)
        self.out = nn.Conv2d(ch, 1, 3, 1, 1)

    def forward(self, img: Tensor) -> Tensor:
        _check_image(img, self.cfg.num_downsamples)
        return self.out(self.trunk(img))[:, 0]


class LocationDiscriminator(nn.Module):
    """logit = psi(phi(x)) + <V c, phi(x)>, phi = conv trunk + global average pooling."""

    def __init__(self, cfg: LocDiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk, ch = _strided_trunk(cfg.base_features, cfg.num_downsamples)
        self.to_feat = nn.Conv2d(ch, cfg.embed_proj_dim, 1)
        self.psi = nn.Linear(cfg.embed_proj_dim, 1)
        self.embed = nn.Linear(cfg.embed_dim, cfg.embed_proj_dim, bias=False)

    def features(self, img: Tensor) -> Tensor:
        _check_image(img, self.cfg.num_downsamples)
        return self.to_feat(self.trunk(img)).mean(dim=(2, 3))

    def head(self, phi: Tensor, c: Tensor) -> Tensor:
        if c.shape[-1] != self.cfg.embed_dim:
            raise ConfigError(f"embedding dim {c.shape[-1]} != configured {self.cfg.embed_dim}")
        return self.psi(phi)[:, 0] + (self.embed(c) * phi).sum(dim=1)

    def forward(self, img: Tensor, c: Tensor) -> Tensor:
        if c.dim() == 1:
            c = c[None].expand(img.shape[0], -1)
        return self.head(self.features(img), c)


def discriminate_image(model: ImageDiscriminator, img: Tensor) -> Tensor:
    return model(img)


def discriminate_location(model: LocationDiscriminator, img: Tensor, c) -> Tensor:
    if not isinstance(c, Tensor):
        c = c.as_tensor(img.dtype)
    return model(img, c)
