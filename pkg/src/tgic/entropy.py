"""Hyperprior entropy model conditioned on caption features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError, NumericError
from .nets import ITA, ArchConfig, _Up

SCALE_MIN = 1e-6
P_MIN = 2.0 ** -30


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    scale: torch.Tensor


class HyperEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        cy, cz = arch.latent_channels, arch.hyper_channels
        self.net = nn.Sequential(
            nn.Conv2d(cy, cz, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(cz, cz, 5, 2, 2), nn.ReLU(),
            nn.Conv2d(cz, cz, 5, 2, 2),
        )

    def forward(self, y):
        return self.net(y)


class HyperDecoder(nn.Module):
    """Side information (and caption) to per-element mean and scale of y."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        cy, cz = arch.latent_channels, arch.hyper_channels
        self.use_text = arch.text_in_encoder
        self.up = nn.Sequential(_Up(cz, cz), nn.ReLU(), _Up(cz, cy), nn.ReLU())
        if self.use_text:
            self.ita = ITA(cy, arch.text_dim)
        self.mean_head = nn.Conv2d(cy, cy, 3, padding=1)
        self.scale_head = nn.Conv2d(cy, cy, 3, padding=1)

    def forward(self, z_hat, text, size: tuple[int, int] | None = None) -> GaussianParams:
        v = self.up(z_hat)
        if size is not None:
            # two stride-2 convs round up; crop back to the latent grid
            v = v[..., : size[0], : size[1]]
        if self.use_text:
            v = self.ita(v, text.words, text.mask)
        scale = F.softplus(self.scale_head(v)) + SCALE_MIN
        return GaussianParams(self.mean_head(v), scale)


class FactorizedPrior(nn.Module):
    """Per-channel non-parametric density with a monotone cumulative.

    Each channel's CDF is ``sigmoid`` of a scalar MLP whose weights are kept
    positive through softplus and whose gating factors are bounded by tanh,
    which makes the map strictly increasing.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` is (C, 1, N); returns CDF logits of the same shape."""
        dt = x.dtype
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = F.softplus(m.to(dt)) @ x + b.to(dt)
            if i < len(self.factors):
                x = x + torch.tanh(self.factors[i].to(dt)) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cdf(x))

    def bin_mass(self, values: torch.Tensor) -> torch.Tensor:
        """Unfloored mass of ``[v - 0.5, v + 0.5]``; ``values`` is (C, 1, N)."""
        lower = self.logits_cdf(values - 0.5)
        upper = self.logits_cdf(values + 0.5)
        # evaluate in the tail where the sigmoids are not saturated
        sign = torch.where(lower + upper > 0, -1.0, 1.0).to(lower.dtype).detach()
        return torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))


def _std_normal_cdf(x):
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


def likelihood_y(y_hat: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Gaussian mass of the unit bin around each element, floored at ``P_MIN``."""
    mean, scale = params
    if y_hat.shape != mean.shape or y_hat.shape != scale.shape:
        raise InputError(f"shape mismatch {tuple(y_hat.shape)} vs {tuple(mean.shape)}")
    if bool((scale <= 0).any()):
        raise NumericError("internal invariant violated: non-positive Gaussian scale")
    v = torch.abs(y_hat - mean)
    p = _std_normal_cdf((0.5 - v) / scale) - _std_normal_cdf((-0.5 - v) / scale)
    return p.clamp_min(P_MIN)


def likelihood_z(z_hat: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    b, c, h, w = z_hat.shape
    v = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
    p = prior.bin_mass(v).reshape(c, b, h, w).permute(1, 0, 2, 3)
    return p.clamp_min(P_MIN)


def bits(likelihoods: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihoods).sum()


@dataclass(frozen=True)
class RateReport:
    bits_y: float
    bits_z: float
    bits_text: float
    height: int
    width: int

    @property
    def bpp(self) -> float:
        return (self.bits_y + self.bits_z + self.bits_text) / (self.height * self.width)

    @property
    def bpp_image(self) -> float:
        return (self.bits_y + self.bits_z) / (self.height * self.width)

    @property
    def bpp_text(self) -> float:
        return self.bits_text / (self.height * self.width)


def estimate_rate(y_hat, z_hat, params: GaussianParams, prior: FactorizedPrior,
                  text_bytes: int, height: int, width: int) -> RateReport:
    """Model-estimated rate of one coded image, accumulated in double precision."""
    if height * width <= 0:
        raise InputError("image must have a positive pixel count")
    with torch.no_grad():
        by = float(bits(likelihood_y(y_hat.double(),
                                     GaussianParams(params.mean.double(), params.scale.double()))))
        bz = float(bits(likelihood_z(z_hat.double(), prior)))
    return RateReport(by, bz, 8.0 * text_bytes, height, width)


def text_bpp(caption_bytes: int, height: int, width: int) -> float:
    """Bits per pixel of a caption of ``caption_bytes`` bytes."""
    return caption_bytes * 8 / (height * width)


def prior_pmf(prior: FactorizedPrior, bound: int) -> np.ndarray:
    """(C, 2*bound+1) float64 bin masses of every integer in ``[-bound, bound]``."""
    with torch.no_grad():
        k = torch.arange(-bound, bound + 1, dtype=torch.float64)
        v = k.expand(prior.channels, 1, -1).contiguous()
        return prior.bin_mass(v)[:, 0].numpy()
