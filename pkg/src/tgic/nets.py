"""Analysis/synthesis transforms and the image-text fusion blocks.

Text enters the networks as a :class:`~tgic.semantic.TextEmbedding`; the
blocks only read its padded word tensor together with the word mask, so
padding positions never influence an output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError

LATENT_BOUND = 255


def _masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None, dim: int = -1):
    if mask is None:
        return torch.softmax(scores, dim=dim)
    scores = scores.masked_fill(~mask, float("-inf"))
    attn = torch.softmax(scores, dim=dim)
    # rows whose every entry is masked come out as NaN; they carry no words
    return torch.nan_to_num(attn, nan=0.0)


class ResBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 plus identity, channel preserving."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ResModule(nn.Sequential):
    def __init__(self, channels: int, blocks: int = 4):
        super().__init__(*[ResBlock(channels) for _ in range(blocks)])


class ITA(nn.Module):
    """Image-text attention.

    Multi-scale residual refinement of the image features, word-to-position
    attention with scaled dot products, and a 1x1 fusion of the refined
    features with the attended word context.
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.channels = channels
        self.w1 = nn.Conv2d(channels, channels, 1)
        self.w2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.w3 = nn.Conv2d(channels, channels, 5, padding=2)
        self.w4 = nn.Linear(text_dim, channels)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def attention(self, v: torch.Tensor, words: torch.Tensor,
                  mask: torch.Tensor | None = None):
        """Return ``(refined, projected_words, alpha)``; alpha is (B, N, T)."""
        refined = v + self.w1(v) + self.w2(v) + self.w3(v)
        e = self.w4(words)
        if e.shape[-1] != self.channels:
            raise ConfigurationError(
                f"word projection has {e.shape[-1]} channels, expected {self.channels}"
            )
        flat = refined.flatten(2).transpose(1, 2)
        scores = flat @ e.transpose(1, 2) / math.sqrt(self.channels)
        alpha = _masked_softmax(scores, None if mask is None else mask[:, None, :])
        return refined, e, alpha

    def forward(self, v, words, mask=None):
        refined, e, alpha = self.attention(v, words, mask)
        b, c, h, w = refined.shape
        context = (alpha @ e).transpose(1, 2).reshape(b, c, h, w)
        return self.fuse(torch.cat([refined, context], dim=1))


class IRC(nn.Module):
    """Image-request complement: re-weights word features before ITA fusion.

    With ``e`` the projected words (T x C) and ``V`` the flattened image
    features (N x C), the word-to-position correlation ``M = e V^T`` gives a
    word-word map ``M M^T``; a 1x1 convolution and row softmax turn it into
    ``A`` and the enhanced words ``A e + e`` are fused with ``V`` by ITA.
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.channels = channels
        self.project = nn.Linear(text_dim, channels, bias=False)
        self.w5 = nn.Conv2d(1, 1, 1)
        self.ita = ITA(channels, channels)

    def complement(self, v: torch.Tensor, words: torch.Tensor,
                   mask: torch.Tensor | None = None):
        """Return ``(enhanced_words, A)`` with A of shape (B, T, T)."""
        e = self.project(words)
        flat = v.flatten(2).transpose(1, 2)
        n = flat.shape[1]
        # fixed 1/sqrt(C) and 1/N factors keep M M^T O(1); w5 absorbs any scale
        m = e @ flat.transpose(1, 2) / math.sqrt(self.channels)
        s = self.w5((m @ m.transpose(1, 2) / n)[:, None])[:, 0]
        a = _masked_softmax(s, None if mask is None else mask[:, None, :])
        if mask is not None:
            a = a * mask[:, :, None]
        return a @ e + e, a

    def forward(self, v, words, mask=None):
        enhanced, _ = self.complement(v, words, mask)
        return self.ita(v, enhanced, mask)


@dataclass(frozen=True)
class ArchConfig:
    """Network widths and text-pathway switches; stored in every checkpoint."""

    widths: tuple[int, int, int] = (64, 128, 192)
    latent_channels: int = 192
    hyper_channels: int = 128
    text_dim: int = 256
    res_blocks: int = 4
    disc_widths: tuple[int, ...] = (64, 128, 256, 512)
    # ablation switches
    text_in_encoder: bool = True      # TGFR: encoder and hyper-decoder ITA
    text_in_decoder: bool = True      # TGIR: decoder IRC/ITA
    use_irc: bool = True              # IRC in front of the decoder ITA
    text_in_discriminator: bool = True  # TGAT

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "disc_widths", tuple(int(w) for w in self.disc_widths))
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ConfigurationError("widths must be three positive channel counts")
        if min(self.latent_channels, self.hyper_channels, self.text_dim) < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.latent_channels > 255 or self.hyper_channels > 255:
            raise ConfigurationError("latent channel counts are stored as one byte")
        side = math.isqrt(self.text_dim)
        if side * side != self.text_dim:
            raise ConfigurationError("text_dim must be a perfect square (discriminator map)")

    @classmethod
    def full(cls, **kw) -> "ArchConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ArchConfig":
        """Every codec width halved."""
        base = dict(widths=(32, 64, 96), latent_channels=96, hyper_channels=64,
                    disc_widths=(32, 64, 128, 256))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["widths"] = list(self.widths)
        d["disc_widths"] = list(self.disc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


class Encoder(nn.Module):
    """Four stride-2 stages; ITA after the second and the fourth."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2, c3 = arch.widths
        cy = arch.latent_channels
        self.use_text = arch.text_in_encoder
        self.stage1 = nn.Sequential(nn.Conv2d(3, c1, 3, 2, 1), nn.ReLU(),
                                    ResModule(c1, arch.res_blocks))
        self.stage2 = nn.Sequential(nn.Conv2d(c1, c2, 3, 2, 1), nn.ReLU(),
                                    ResModule(c2, arch.res_blocks))
        self.stage3 = nn.Sequential(nn.Conv2d(c2, c3, 3, 2, 1), nn.ReLU(),
                                    ResModule(c3, arch.res_blocks))
        self.stage4 = nn.Conv2d(c3, cy, 3, 2, 1)
        if self.use_text:
            self.ita2 = ITA(c2, arch.text_dim)
            self.ita4 = ITA(cy, arch.text_dim)

    def forward(self, x, text):
        h, w = x.shape[-2:]
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise InputError(f"encoder input must be a multiple of 16 and >= 16, got {h}x{w}")
        v = self.stage2(self.stage1(x))
        if self.use_text:
            v = self.ita2(v, text.words, text.mask)
        y = self.stage4(self.stage3(v))
        if self.use_text:
            y = self.ita4(y, text.words, text.mask)
        return y


class _Up(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Upsample(scale_factor=2, mode="nearest"),
                         nn.Conv2d(cin, cout, 3, padding=1))


class _ClampST(torch.autograd.Function):
    # clamp forward, identity backward so saturated pixels still train
    @staticmethod
    def forward(ctx, x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, g):
        return g


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`; IRC before the first and third upsampling."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2, c3 = arch.widths
        cy = arch.latent_channels
        self.use_text = arch.text_in_decoder
        fusion = IRC if arch.use_irc else ITA
        if self.use_text:
            self.fuse1 = fusion(cy, arch.text_dim)
            self.fuse3 = fusion(c2, arch.text_dim)
        self.up1 = nn.Sequential(_Up(cy, c3), nn.ReLU(), ResModule(c3, arch.res_blocks))
        self.up2 = nn.Sequential(_Up(c3, c2), nn.ReLU(), ResModule(c2, arch.res_blocks))
        self.up3 = nn.Sequential(_Up(c2, c1), nn.ReLU(), ResModule(c1, arch.res_blocks))
        self.up4 = _Up(c1, 3)

    def forward(self, y_hat, text):
        v = y_hat
        if self.use_text:
            v = self.fuse1(v, text.words, text.mask)
        v = self.up2(self.up1(v))
        if self.use_text:
            v = self.fuse3(v, text.words, text.mask)
        x = self.up4(self.up3(v))
        return _ClampST.apply(x)


def quantize(y: torch.Tensor, mode: str, generator: torch.Generator | None = None,
             bound: int = LATENT_BOUND) -> torch.Tensor:
    """Additive uniform noise in ``"train"`` mode, round-half-up in ``"eval"``."""
    if mode == "train":
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device)
        return y + (u - 0.5)
    if mode == "eval":
        return torch.floor(y + 0.5).clamp(-bound, bound)
    raise ValueError(f"unknown quantization mode {mode!r}")


def pad_to_multiple(x: torch.Tensor, multiple: int = 16) -> torch.Tensor:
    """Reflect-pad the bottom/right edges of a (B, 3, H, W) batch.

    Edges too short to reflect (padding >= size) are replicated instead.
    """
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise InputError(f"image must be non-empty, got {h}x{w}")
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)
