"""Distortion, perceptual and semantic losses; rate control; the global loss."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .semantic import batch_matching_loss


def lambda_a_for_target(rate_target: float) -> float:
    """High-rate penalty picked from {2^3, 2^2, 2^1} by the rate target."""
    if rate_target <= 0.1:
        return 8.0
    if rate_target <= 0.17:
        return 4.0
    return 2.0


@dataclass(frozen=True)
class LossWeights:
    k1: float = 0.075 * 2 ** -5
    k2: float = 0.15
    k3: float = 5.0
    k4: float = 0.005
    beta: float = 40.0
    lambda_a: float = 8.0
    lambda_b: float = 2 ** -4
    rate_target: float = 0.078
    # MSE is taken on this pixel scale inside the global loss (8-bit: 255)
    mse_peak: float = 255.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be non-negative")
        if self.lambda_a <= 0 or self.lambda_b <= 0 or self.rate_target <= 0:
            raise ConfigurationError("lambda_a, lambda_b and rate_target must be positive")
        if self.lambda_a <= self.lambda_b:
            raise ConfigurationError("lambda_a must exceed lambda_b")

    @classmethod
    def for_target(cls, rate_target: float, **kw) -> "LossWeights":
        kw.setdefault("lambda_a", lambda_a_for_target(rate_target))
        return cls(rate_target=rate_target, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    L_R: object
    L_G: object
    L_P: object
    L_IT: object
    L_II: object
    L_M: object
    L_Rate: object
    lambda_used: float
    total: object

    def as_floats(self) -> dict:
        def num(v):
            return v.item() if isinstance(v, torch.Tensor) else float(v)
        return {f.name: num(getattr(self, f.name)) for f in fields(self)}


def recon_loss(x_hat: torch.Tensor, x: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Mean squared error, with both images scaled by ``peak`` first."""
    if x_hat.shape != x.shape:
        raise InputError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return ((x_hat - x) * peak).pow(2).mean()


class AlexNetFeatures(nn.Module):
    """Frozen AlexNet convolutional trunk returning its five ReLU activations.

    Weights come from ``weights_path`` (a torchvision ``alexnet`` state dict)
    when given; otherwise the trunk is initialised from a fixed seed so that
    every process gets the identical feature extractor.
    """

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, weights_path: str | None = None, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.slices = nn.ModuleList([
                nn.Sequential(nn.Conv2d(3, 64, 11, 4, 2), nn.ReLU()),
                nn.Sequential(nn.MaxPool2d(3, 2), nn.Conv2d(64, 192, 5, padding=2), nn.ReLU()),
                nn.Sequential(nn.MaxPool2d(3, 2), nn.Conv2d(192, 384, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(384, 256, 3, padding=1), nn.ReLU()),
                nn.Sequential(nn.Conv2d(256, 256, 3, padding=1), nn.ReLU()),
            ])
        if weights_path:
            self._load_torchvision(torch.load(weights_path, weights_only=True))
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load_torchvision(self, sd):
        convs = [m for s in self.slices for m in s if isinstance(m, nn.Conv2d)]
        for conv, idx in zip(convs, (0, 3, 6, 8, 10)):
            conv.weight.data.copy_(sd[f"features.{idx}.weight"])
            conv.bias.data.copy_(sd[f"features.{idx}.bias"])

    def forward(self, x):
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for s in self.slices:
            h = s(h)
            feats.append(h)
        return feats


PERCEPTUAL_MIN_SIZE = 32


def perceptual_loss(x_hat: torch.Tensor, x: torch.Tensor, phi: nn.Module) -> torch.Tensor:
    """Mean squared distance of channel-normalised feature stacks, summed over layers."""
    if min(x.shape[-2:]) < PERCEPTUAL_MIN_SIZE:
        raise InputError(f"perceptual loss needs images of at least {PERCEPTUAL_MIN_SIZE} px")
    total = x_hat.new_zeros(())
    for a, b in zip(phi(x_hat), phi(x)):
        a = a / (a.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
        b = b / (b.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt()
        total = total + (a - b).pow(2).sum(dim=1).mean()
    return total


def semantic_consistent_loss(x_hat, x, text, image_encoder, beta: float = 40.0,
                             gamma: float = 10.0):
    """Return ``(L_IT, L_II, L_M)`` for a batch of reconstructions.

    ``L_IT`` is the batch-softmax matching loss between the reconstructions'
    global semantic features and the caption sentence features; ``L_II`` is
    ``beta`` times the mean squared distance between the global features of
    reconstruction and original.
    """
    if x_hat.shape[0] == 1:
        warnings.warn("semantic matching loss is degenerate (zero) for a batch of one",
                      stacklevel=2)
    g_hat = image_encoder(x_hat).global_feature
    with torch.no_grad():
        g = image_encoder(x).global_feature
    l_it = batch_matching_loss(g_hat, text.sentence.to(g_hat.dtype), gamma)
    l_ii = beta * (g_hat - g).pow(2).mean()
    return l_it, l_ii, l_it + l_ii


def select_lambda(current_rate_bpp: float, w: LossWeights) -> float:
    return w.lambda_a if current_rate_bpp > w.rate_target else w.lambda_b


def total_loss(L_Rate, L_R, L_G, L_P, L_IT, L_II, w: LossWeights, lam: float) -> LossBreakdown:
    L_M = L_IT + L_II
    total = lam * L_Rate + w.k1 * L_R + w.k2 * L_G + w.k3 * L_P + w.k4 * L_M
    return LossBreakdown(L_R, L_G, L_P, L_IT, L_II, L_M, L_Rate, lam, total)
