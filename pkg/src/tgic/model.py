"""The trainable codec: transforms plus hyperprior entropy model."""

from __future__ import annotations

import hashlib
import json

import numpy as np
from torch import nn

from .entropy import FactorizedPrior, HyperDecoder, HyperEncoder, likelihood_y, likelihood_z
from .nets import ArchConfig, Decoder, Encoder, quantize


class TGICModel(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.hyper_encoder = HyperEncoder(arch)
        self.hyper_decoder = HyperDecoder(arch)
        self.prior = FactorizedPrior(arch.hyper_channels)

    def forward(self, x, text, mode: str = "train", generator=None) -> dict:
        """Full forward pass on a padded batch.

        In train mode both latents get additive uniform noise; in eval mode
        they are rounded.  Returns the intermediate tensors and likelihoods.
        """
        y = self.encoder(x, text)
        y_hat = quantize(y, mode, generator)
        z = self.hyper_encoder(y)
        z_hat = quantize(z, mode, generator)
        params = self.hyper_decoder(z_hat, text, size=y.shape[-2:])
        x_hat = self.decoder(y_hat, text)
        return {
            "y": y, "y_hat": y_hat, "z": z, "z_hat": z_hat, "params": params,
            "x_hat": x_hat,
            "likelihood_y": likelihood_y(y_hat, params),
            "likelihood_z": likelihood_z(z_hat, self.prior),
        }


def state_digest(h, state: dict) -> None:
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        arr = t.numpy()
        h.update(key.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def model_hash(model: TGICModel, semantic) -> bytes:
    """Digest of everything the receiver needs to rebuild the sender's tables."""
    h = hashlib.sha256()
    h.update(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    h.update(semantic.vocab.digest().encode())
    h.update(json.dumps(semantic.config.__dict__, sort_keys=True).encode())
    state_digest(h, model.state_dict())
    state_digest(h, semantic.text_encoder.state_dict())
    return h.digest()


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    state_digest(h, module.state_dict())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return int(sum(np.prod(p.shape) for p in module.parameters()))
