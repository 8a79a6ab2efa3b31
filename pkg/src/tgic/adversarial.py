"""Caption-conditioned discriminator and the adversarial losses."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .nets import ArchConfig

PROB_EPS = 1e-7


class Discriminator(nn.Module):
    """Global real/fake probability for an (image, caption) pair.

    The sentence feature is reshaped to a one-channel square map, convolved,
    upsampled to the image size and concatenated with the pixels; a strided
    conv stack and a linear head give one sigmoid probability per image.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.use_text = arch.text_in_discriminator
        self.side = math.isqrt(arch.text_dim)
        cin = 3
        if self.use_text:
            self.text_conv = nn.Conv2d(1, 3, 3, padding=1)
            cin = 6
        layers = [nn.Conv2d(cin, 6, 3, 1, 1), nn.LeakyReLU(0.2)]
        prev = 6
        for w in arch.disc_widths:
            layers += [nn.Conv2d(prev, w, 3, 2, 1), nn.LeakyReLU(0.2)]
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)

    def logits(self, image, text):
        x = image * 2.0 - 1.0
        if self.use_text:
            b = image.shape[0]
            t = text.sentence.reshape(b, 1, self.side, self.side)
            t = F.interpolate(self.text_conv(t), size=image.shape[-2:], mode="nearest")
            x = torch.cat([x, t], dim=1)
        return self.head(self.body(x).mean(dim=(2, 3)))[:, 0]

    def forward(self, image, text):
        return torch.sigmoid(self.logits(image, text))


def discriminate(disc: Discriminator, image: torch.Tensor, text) -> torch.Tensor:
    """Probability in (0, 1) per image; clamped away from the endpoints."""
    return disc(image, text).clamp(PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor, text):
    """``-[log D(real) + log(1 - D(fake))]``; ``fake`` is detached."""
    p_real = discriminate(disc, real, text)
    p_fake = discriminate(disc, fake.detach(), text)
    return -(torch.log(p_real) + torch.log(1.0 - p_fake)).mean()


def generator_loss(disc: Discriminator, fake: torch.Tensor, text):
    """Non-saturating ``-log D(fake)``."""
    return -torch.log(discriminate(disc, fake, text)).mean()


def gan_losses(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor, text):
    """Return ``(disc_loss, gen_loss)``, both batch means in nats.

    ``disc_loss`` sees ``fake`` detached; ``gen_loss`` is the non-saturating
    generator objective.
    """
    return discriminator_loss(disc, real, fake, text), generator_loss(disc, fake, text)
