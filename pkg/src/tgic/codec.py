"""Sender and receiver: image + caption <-> ``.tgic`` bytes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .container import MAX_CAPTION_BYTES, Bitstream, pack_container, read_header, unpack_container
from .entropy import GaussianParams, RateReport, estimate_rate, prior_pmf
from .errors import FormatError, InputError
from .latent_coding import LatentCoder, check_decoded_range, gaussian_tables, prior_channel_tables
from .model import TGICModel, model_hash
from .nets import LATENT_BOUND, pad_to_multiple, quantize
from .semantic import SemanticSpace, normalize_caption


@dataclass
class CompressResult:
    data: bytes
    reconstruction: torch.Tensor  # (3, H, W), what the receiver will decode
    report: RateReport
    bitstream: Bitstream
    y_symbols: np.ndarray
    z_symbols: np.ndarray
    y_tables: list
    z_tables: list

    @property
    def file_bpp(self) -> float:
        return len(self.data) * 8 / (self.report.height * self.report.width)


def _latent_size(h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
    hp, wp = -(-h // 16) * 16, -(-w // 16) * 16
    yh, yw = hp // 16, wp // 16
    zh, zw = -(-(-(-yh // 2)) // 2), -(-(-(-yw // 2)) // 2)
    return (yh, yw), (zh, zw)


class Codec:
    """Deployable codec: frozen networks, caption encoder and coding tables.

    Inference only; safe to share between threads once constructed.
    """

    def __init__(self, model: TGICModel, semantic: SemanticSpace, bound: int = LATENT_BOUND):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.semantic = semantic
        self.arch = model.arch
        self.bound = bound
        self.coder = LatentCoder(bound)
        self.model_hash = model_hash(model, semantic)
        self._z_channel_tables = prior_channel_tables(prior_pmf(model.prior, bound), bound)

    def _text(self, caption: str):
        if len(caption.encode("utf-8")) > MAX_CAPTION_BYTES:
            raise InputError(f"caption exceeds {MAX_CAPTION_BYTES} UTF-8 bytes")
        if not normalize_caption(caption):
            raise InputError("caption has no words after normalization")
        return self.semantic.encode_captions([caption])

    def _z_tables(self, zh: int, zw: int) -> list:
        return [t for t in self._z_channel_tables for _ in range(zh * zw)]

    def _y_tables(self, params: GaussianParams) -> list:
        return gaussian_tables(params.mean[0].double().numpy(), params.scale[0].double().numpy())

    @torch.no_grad()
    def compress(self, image: torch.Tensor, caption: str) -> CompressResult:
        """``image`` is (3, H, W) in [0, 1]."""
        if image.dim() != 3 or image.shape[0] != 3:
            raise InputError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise InputError("image contains non-finite pixels")
        h, w = image.shape[-2:]
        text = self._text(caption)
        x = pad_to_multiple(image[None].float())
        m = self.model
        y = m.encoder(x, text)
        z = m.hyper_encoder(y)
        # round-trip the symbols through integers so sender and receiver feed
        # bit-identical tensors to the hyper-decoder and decoder
        z_sym = quantize(z, "eval", bound=self.bound)[0].to(torch.int64).numpy()
        y_sym = quantize(y, "eval", bound=self.bound)[0].to(torch.int64).numpy()
        z_hat = torch.from_numpy(z_sym).float()[None]
        y_hat = torch.from_numpy(y_sym).float()[None]
        params = m.hyper_decoder(z_hat, text, size=y.shape[-2:])
        z_tables = self._z_tables(*z_sym.shape[1:])
        y_tables = self._y_tables(params)
        bs = Bitstream(h, w, self.arch.latent_channels, self.arch.hyper_channels,
                       self.model_hash, caption,
                       self.coder.encode(z_sym, z_tables), self.coder.encode(y_sym, y_tables))
        recon = m.decoder(y_hat, text)[0, :, :h, :w]
        report = estimate_rate(y_hat, z_hat, params, m.prior, bs.caption_bytes, h, w)
        return CompressResult(pack_container(bs), recon, report, bs, y_sym, z_sym,
                              y_tables, z_tables)

    @torch.no_grad()
    def decompress(self, data: bytes) -> tuple[torch.Tensor, str]:
        """Return the (3, H, W) reconstruction and the transmitted caption."""
        bs = unpack_container(data, self.model_hash)
        if (bs.latent_channels, bs.hyper_channels) != (self.arch.latent_channels,
                                                       self.arch.hyper_channels):
            raise FormatError("latent channel counts differ from the loaded model")
        text = self._text(bs.caption)
        (yh, yw), (zh, zw) = _latent_size(bs.height, bs.width)
        cy, cz = self.arch.latent_channels, self.arch.hyper_channels
        z_sym = self.coder.decode(bs.z_payload, self._z_tables(zh, zw))
        check_decoded_range(z_sym, self.bound)
        z_hat = torch.from_numpy(z_sym.reshape(cz, zh, zw)).float()[None]
        params = self.model.hyper_decoder(z_hat, text, size=(yh, yw))
        y_sym = self.coder.decode(bs.y_payload, self._y_tables(params))
        check_decoded_range(y_sym, self.bound)
        y_hat = torch.from_numpy(y_sym.reshape(cy, yh, yw)).float()[None]
        x_hat = self.model.decoder(y_hat, text)[0, :, : bs.height, : bs.width]
        return x_hat, bs.caption


def peek_dimensions(data: bytes) -> tuple[int, int]:
    hdr = read_header(data)
    return hdr["height"], hdr["width"]
