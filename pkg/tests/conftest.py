import numpy as np
import pytest
import torch

from tgic.codec import Codec
from tgic.model import TGICModel
from tgic.nets import ArchConfig
from tgic.semantic import SemanticConfig, SemanticSpace, build_vocabulary

CAPTIONS = [
    "a red bird with black wings",
    "a small yellow bird sitting on a branch",
    "this flower has white petals and a yellow center",
    "a purple flower with many thin petals",
]


def tiny_arch(**kw) -> ArchConfig:
    base = dict(widths=(8, 8, 12), latent_channels=8, hyper_channels=6, text_dim=16,
                res_blocks=1, disc_widths=(8, 8))
    base.update(kw)
    return ArchConfig(**base)


def tiny_semantic(seed: int = 0, text_dim: int = 16) -> SemanticSpace:
    torch.manual_seed(seed)
    vocab = build_vocabulary(CAPTIONS)
    return SemanticSpace(vocab, SemanticConfig(text_dim=text_dim, embed_dim=8,
                                               image_width=8)).freeze()


def tiny_codec(seed: int = 0, **arch_kw) -> Codec:
    torch.manual_seed(seed)
    model = TGICModel(tiny_arch(**arch_kw))
    return Codec(model, tiny_semantic(seed))


@pytest.fixture
def arch():
    return tiny_arch()


@pytest.fixture
def semantic():
    return tiny_semantic()


@pytest.fixture
def codec():
    return tiny_codec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
