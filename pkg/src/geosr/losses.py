"""Training objectives: pixel, perceptual, adversarial, location matching, total."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class LossWeights:
    pix: float = 1.0
    perceptual: float = 1.0
    gan: float = 0.1
    clip: float = 1.0
    osm: float = 0.3
    loc_match: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})

    def to_dict(self):
        return asdict(self)


# component key -> weight field
COMPONENT_WEIGHTS = {
    "pix": "pix",
    "perceptual": "perceptual",
    "gan_g": "gan",
    "loc_match_g": "loc_match",
    "clip": "clip",
    "osm": "osm",
}
REQUIRED_COMPONENTS = ("pix", "perceptual", "gan_g", "loc_match_g")
OPTIONAL_COMPONENTS = ("clip", "osm")


def _check_pair(sr: Tensor, hr: Tensor) -> None:
    if sr.shape != hr.shape:
        raise InputError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")


def pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    _check_pair(sr, hr)
    return (sr - hr).abs().mean()


class FeaturePyramid(nn.Module):
    """Frozen, seeded random conv pyramid used as the perceptual feature extractor."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        self.widths, self.seed = tuple(widths), seed
        gen = torch.Generator().manual_seed(seed)
        convs, ch = [], 3
        for w in self.widths:
            conv = nn.Conv2d(ch, w, 3, 1, 1)
            fan_in = ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            ch = w
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def config(self) -> dict:
        return {"widths": list(self.widths), "seed": self.seed}

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2, ceil_mode=True)
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual_loss(sr: Tensor, hr: Tensor, extractor: Callable[[Tensor], list[Tensor]]) -> Tensor:
    """Sum over pyramid levels of the L1 distance between features."""
    _check_pair(sr, hr)
    total = sr.new_zeros(())
    for fs, fh in zip(extractor(sr), extractor(hr)):
        total = total + (fs - fh).abs().mean()
    return total


def gan_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating BCE on logits: (discriminator loss, generator loss)."""
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    return d_loss, gan_generator_loss(fake_logits)


def gan_generator_loss(fake_logits: Tensor) -> Tensor:
    return F.softplus(-fake_logits).mean()


def loc_match_from_logits(hr_true: Tensor, hr_false: Tensor, sr_false: Tensor) -> Tensor:
    """Negated location-matching expectation, from the three discriminator logits.

    log sigma(z) = -softplus(-z) and log(1 - sigma(z)) = -softplus(z).
    """
    return (F.softplus(-hr_true) + F.softplus(hr_false) + F.softplus(sr_false)).mean()


def loc_match_g_from_logits(sr_true: Tensor) -> Tensor:
    return F.softplus(-sr_true).mean()


def loc_match_loss(
    d_loc: Callable[[Tensor, Tensor], Tensor],
    x_hr: Tensor,
    x_sr: Tensor,
    c_true: Tensor,
    c_false: Tensor,
    coords_true: Optional[Tensor] = None,
    coords_false: Optional[Tensor] = None,
    min_separation: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """Return (discriminator objective, generator matching term).

    The discriminator objective is minimised by a critic that accepts
    (x_hr, c_true) and rejects both false-location pairs. The generator term
    is -log sigma(D(x_sr, c_true)).
    """
    if c_true.shape != c_false.shape:
        raise InputError("true and false embeddings must have the same shape")
    same = (c_true == c_false).reshape(c_true.shape[0], -1).all(dim=1)
    if bool(same.any()):
        raise InputError("false location embedding equals the true one")
    if coords_true is not None and coords_false is not None:
        sep = (coords_true - coords_false).abs().max(dim=1).values
        if bool((sep < min_separation).any()):
            raise InputError(f"false location closer than min_separation {min_separation}")
    d_obj = loc_match_from_logits(d_loc(x_hr, c_true), d_loc(x_hr, c_false), d_loc(x_sr, c_false))
    g_term = loc_match_g_from_logits(d_loc(x_sr, c_true))
    return d_obj, g_term


def zero_hook(sr: Tensor, hr: Tensor) -> Tensor:
    """Stand-in for the CLIP and OSM losses; always contributes 0."""
    return sr.new_zeros(())


def total_loss(components: Mapping[str, object], weights: LossWeights):
    """Weighted sum of loss components; clip/osm default to 0 when absent."""
    unknown = set(components) - set(COMPONENT_WEIGHTS)
    if unknown:
        raise ConfigError(f"unknown loss components: {sorted(unknown)}")
    missing = [k for k in REQUIRED_COMPONENTS if k not in components]
    if missing:
        raise ConfigError(f"missing loss components: {missing}")
    total = 0.0
    for key, wname in COMPONENT_WEIGHTS.items():
        if key in components:
            total = total + getattr(weights, wname) * components[key]
    return total
