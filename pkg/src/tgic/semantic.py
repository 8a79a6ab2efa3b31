"""Caption tokenization, the frozen text/image encoders and their joint space."""

from __future__ import annotations

import hashlib
import logging
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import ConfigurationError, InputError, NumericError, VersionError

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
MAX_WORDS = 18
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_caption(caption: str) -> list[str]:
    return caption.lower().translate(_PUNCT).split()


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.id_to_token[:2] != [PAD, UNK]:
            raise ConfigurationError("vocabulary must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigurationError("duplicate tokens in vocabulary")

    pad_id = 0
    unk_id = 1

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode()).hexdigest()


def build_vocabulary(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Tokens with at least ``min_freq`` occurrences, in first-seen order."""
    if not corpus:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    if min_freq < 1:
        raise ConfigurationError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    order: dict[str, None] = {}
    for caption in corpus:
        for tok in normalize_caption(caption):
            counts[tok] += 1
            order.setdefault(tok, None)
    kept = [t for t in order if counts[t] >= min_freq and t not in (PAD, UNK)]
    return Vocabulary([PAD, UNK] + kept)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    length: int


def tokenize(caption: str, vocab: Vocabulary, max_words: int = MAX_WORDS) -> TokenSequence:
    tokens = normalize_caption(caption)
    if not tokens:
        raise InputError(f"caption {caption!r} is empty after normalization")
    ids = [vocab.token_to_id.get(t, vocab.unk_id) for t in tokens[:max_words]]
    n = len(ids)
    return TokenSequence(tuple(ids + [vocab.pad_id] * (max_words - n)), n)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in seq.ids[:seq.length]]


@dataclass
class TextEmbedding:
    """Batched caption features.

    ``words`` is (B, T, D) with zeros beyond each caption's length,
    ``sentence`` is (B, D) and ``lengths`` is (B,).
    """

    words: torch.Tensor
    sentence: torch.Tensor
    lengths: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        t = self.words.shape[1]
        return torch.arange(t, device=self.words.device)[None, :] < self.lengths[:, None]

    @property
    def word_features(self) -> torch.Tensor:
        """(T_words, D) features of a single caption."""
        if self.words.shape[0] != 1:
            raise ValueError("word_features is defined for a single caption")
        return self.words[0, : int(self.lengths[0])]

    @property
    def sentence_feature(self) -> torch.Tensor:
        return self.sentence[0]

    def to(self, dtype=None, device=None) -> "TextEmbedding":
        return TextEmbedding(self.words.to(device=device, dtype=dtype),
                             self.sentence.to(device=device, dtype=dtype),
                             self.lengths.to(device=device))

    def index(self, idx) -> "TextEmbedding":
        return TextEmbedding(self.words[idx], self.sentence[idx], self.lengths[idx])

    def zeros_like(self) -> "TextEmbedding":
        return TextEmbedding(torch.zeros_like(self.words), torch.zeros_like(self.sentence),
                             self.lengths.clone())


@dataclass
class SemanticImageEmbedding:
    global_feature: torch.Tensor   # (B, D)
    region_features: torch.Tensor  # (B, N, D)


class TextEncoder(nn.Module):
    """Bidirectional LSTM; word feature = forward + backward hidden state."""

    def __init__(self, vocab_size: int, text_dim: int = 256, embed_dim: int = 128):
        super().__init__()
        self.text_dim = text_dim
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=Vocabulary.pad_id)
        self.lstm = nn.LSTM(embed_dim, text_dim, batch_first=True, bidirectional=True)
        self.sentence = nn.Linear(2 * text_dim, text_dim)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> TextEmbedding:
        if int(lengths.min()) < 1:
            raise InputError("token sequences must contain at least one token")
        t = int(lengths.max())
        ids = ids[:, :t]
        packed = pack_padded_sequence(self.embed(ids), lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, (h, _) = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=t)
        d = self.text_dim
        words = out[..., :d] + out[..., d:]
        sentence = self.sentence(torch.cat([h[0], h[1]], dim=-1))
        return TextEmbedding(words, sentence, lengths.clone())


class ImageSemanticEncoder(nn.Module):
    """Small CNN into the joint space: global vector and per-region vectors."""

    def __init__(self, text_dim: int = 256, width: int = 32):
        super().__init__()
        w = width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 8 * w, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        self.regions = nn.Conv2d(8 * w, text_dim, 1)
        self.glob = nn.Linear(8 * w, text_dim)

    def forward(self, x: torch.Tensor) -> SemanticImageEmbedding:
        f = self.trunk(x * 2.0 - 1.0)
        regions = self.regions(f).flatten(2).transpose(1, 2)
        return SemanticImageEmbedding(self.glob(f.mean(dim=(2, 3))), regions)


@dataclass(frozen=True)
class SemanticConfig:
    text_dim: int = 256
    embed_dim: int = 128
    image_width: int = 32
    max_words: int = MAX_WORDS
    gamma: float = 10.0


class SemanticSpace:
    """Vocabulary plus the two encoders; frozen after pretraining."""

    def __init__(self, vocab: Vocabulary, config: SemanticConfig = SemanticConfig()):
        self.vocab = vocab
        self.config = config
        self.text_encoder = TextEncoder(len(vocab), config.text_dim, config.embed_dim)
        self.image_encoder = ImageSemanticEncoder(config.text_dim, config.image_width)

    def parameters(self):
        yield from self.text_encoder.parameters()
        yield from self.image_encoder.parameters()

    def freeze(self) -> "SemanticSpace":
        for p in self.parameters():
            p.requires_grad_(False)
        self.text_encoder.eval()
        self.image_encoder.eval()
        return self

    def tokenize_batch(self, captions: Sequence[str]):
        seqs = [tokenize(c, self.vocab, self.config.max_words) for c in captions]
        ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
        lengths = torch.tensor([s.length for s in seqs], dtype=torch.long)
        return ids, lengths

    def encode_captions(self, captions: Sequence[str]) -> TextEmbedding:
        ids, lengths = self.tokenize_batch(captions)
        return self.text_encoder(ids, lengths)

    def to_dict(self) -> dict:
        return {
            "format": "tgic-semantic",
            "version": 1,
            "config": asdict(self.config),
            "vocab": list(self.vocab.id_to_token),
            "vocab_hash": self.vocab.digest(),
            "text_encoder": self.text_encoder.state_dict(),
            "image_encoder": self.image_encoder.state_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticSpace":
        if d.get("format") != "tgic-semantic" or d.get("version") != 1:
            raise VersionError("not a version-1 semantic weight archive")
        vocab = Vocabulary(list(d["vocab"]))
        if vocab.digest() != d["vocab_hash"]:
            raise VersionError("vocabulary hash does not match the archive header")
        space = cls(vocab, SemanticConfig(**d["config"]))
        space.text_encoder.load_state_dict(d["text_encoder"])
        space.image_encoder.load_state_dict(d["image_encoder"])
        return space.freeze()

    def save(self, path) -> None:
        torch.save(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "SemanticSpace":
        return cls.from_dict(torch.load(path, weights_only=True))


def encode_text(space: SemanticSpace, tokens: TokenSequence) -> TextEmbedding:
    if tokens.length < 1:
        raise InputError("cannot encode an empty token sequence")
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    with torch.no_grad():
        return space.text_encoder(ids, torch.tensor([tokens.length]))


def encode_image_semantic(space: SemanticSpace, image: torch.Tensor) -> SemanticImageEmbedding:
    """``image`` is (3, H, W) or (B, 3, H, W) in [0, 1]."""
    if not torch.isfinite(image).all():
        raise InputError("image contains non-finite pixels")
    if image.dim() == 3:
        image = image[None]
    with torch.no_grad():
        return space.image_encoder(image)


def matching_score(img: SemanticImageEmbedding, txt: TextEmbedding, gamma: float = 10.0) -> float:
    a = img.global_feature.reshape(-1).double()
    b = txt.sentence.reshape(-1).double()
    if a.shape != b.shape:
        raise ConfigurationError(f"dimension mismatch: {a.numel()} vs {b.numel()}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise NumericError("matching score undefined for a zero-norm feature vector")
    return float(gamma * (a @ b) / (na * nb))


def batch_matching_loss(image_global: torch.Tensor, sentence: torch.Tensor,
                        gamma: float = 10.0) -> torch.Tensor:
    """Mean of ``-(log P(t_i | img_i) + log P(img_i | t_i))`` over the batch.

    Both posteriors are softmaxes of ``gamma * cosine`` over the other
    modality's batch members.
    """
    scores = gamma * F.normalize(image_global, dim=-1) @ F.normalize(sentence, dim=-1).T
    target = torch.arange(scores.shape[0], device=scores.device)
    return F.cross_entropy(scores, target) + F.cross_entropy(scores.T, target)


@dataclass
class PretrainConfig:
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    holdout: int = 2
    min_freq: int = 1


def pretrain_semantic_space(pairs: Sequence[tuple[torch.Tensor, Sequence[str]]],
                            config: PretrainConfig = PretrainConfig(),
                            semantic: SemanticConfig = SemanticConfig(),
                            ) -> tuple[SemanticSpace, dict]:
    """Fit both encoders with the batch-softmax matching loss, then freeze.

    ``pairs`` holds ``(image, captions)``; the last ``config.holdout`` pairs
    are kept out of training and only used to report the held-out loss.
    Returns the frozen space and a history with the held-out loss before and
    after training.
    """
    if len(pairs) < 2:
        raise ConfigurationError("matching loss needs at least two image-caption pairs")
    holdout = min(config.holdout, len(pairs) - 2) if len(pairs) > 3 else 0
    train = pairs[: len(pairs) - holdout] if holdout else pairs
    held = pairs[len(pairs) - holdout:] if holdout >= 2 else []
    vocab = build_vocabulary([c for _, caps in pairs for c in caps], config.min_freq)

    g = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        space = SemanticSpace(vocab, semantic)
    params = list(space.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)

    def held_loss():
        if not held:
            return float("nan")
        with torch.no_grad():
            x = torch.stack([img for img, _ in held])
            t = space.encode_captions([caps[0] for _, caps in held])
            return float(batch_matching_loss(space.image_encoder(x).global_feature,
                                             t.sentence, semantic.gamma))

    history = {"heldout_initial": held_loss(), "train": []}
    for step in range(config.steps):
        idx = torch.randperm(len(train), generator=g)[: config.batch_size]
        x = torch.stack([train[i][0] for i in idx])
        caps = [train[i][1][int(torch.randint(len(train[i][1]), (1,), generator=g))]
                for i in idx]
        t = space.encode_captions(caps)
        loss = batch_matching_loss(space.image_encoder(x).global_feature, t.sentence,
                                   semantic.gamma)
        if not math.isfinite(loss.item()):
            raise NumericError(f"semantic pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["train"].append(loss.item())
    space.freeze()
    history["heldout_final"] = held_loss()
    log.info("semantic pretraining: held-out loss %.4f -> %.4f",
             history["heldout_initial"], history["heldout_final"])
    return space, history
