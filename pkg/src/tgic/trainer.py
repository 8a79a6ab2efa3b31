"""Alternating discriminator / codec training, checkpoints and resume."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from .adversarial import Discriminator, discriminator_loss, generator_loss
from .codec import Codec
from .config import fill_dataclass, read_kv_file
from .data import CaptionDataset, Sample, random_crop
from .entropy import bits, text_bpp
from .errors import ConfigurationError, InputError, TrainingError, VersionError
from .model import TGICModel
from .nets import ArchConfig
from .objectives import (AlexNetFeatures, LossBreakdown, LossWeights, perceptual_loss,
                         recon_loss, select_lambda, semantic_consistent_loss, total_loss)
from .semantic import PretrainConfig, SemanticConfig, SemanticSpace, pretrain_semantic_space

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tgic-checkpoint"
CHECKPOINT_VERSION = 1
_WEIGHT_KEYS = {f.name for f in fields(LossWeights)} - {"rate_target"}


@dataclass
class TrainConfig:
    # run plumbing (paths may stay unset when training from Python)
    data: str | None = None
    out: str | None = None
    semantic: str | None = None
    resume: str | None = None
    log: str | None = None
    perceptual_weights: str | None = None
    # optimisation
    preset: str = "desk"
    learning_rate: float = 1e-4
    disc_learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 300
    max_steps: int | None = None
    seed: int = 0
    r_t: float = 0.078
    crop: int | None = None
    checkpoint_interval: int = 0
    pretrain_steps: int = 200
    # also charge the (constant) caption bits when comparing the rate with r_t
    rate_includes_text: bool = False
    # ablation switches
    tgfr: bool = True
    tgir: bool = True
    tgat: bool = True
    irc: bool = True
    use_perceptual: bool = True
    use_semantic: bool = True
    use_image_semantic: bool = True
    weights: LossWeights | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.learning_rate > 0 or not self.disc_learning_rate > 0:
            raise ConfigurationError("learning rates must be positive")
        if self.preset not in ("desk", "full"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigurationError("epochs and max_steps must be non-negative")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.weights is None:
            self.weights = LossWeights.for_target(self.r_t)
        elif self.weights.rate_target != self.r_t:
            self.weights = replace(self.weights, rate_target=self.r_t)
        if self.crop is None:
            self.crop = 64 if self.preset == "desk" else 256
        if self.crop < 16 or self.crop % 16:
            raise ConfigurationError("crop must be a positive multiple of 16")
        if self.use_perceptual and self.crop < 32:
            raise ConfigurationError("the perceptual loss needs crop >= 32")

    def arch(self) -> ArchConfig:
        make = ArchConfig.desk if self.preset == "desk" else ArchConfig.full
        return make(text_in_encoder=self.tgfr, text_in_decoder=self.tgir,
                    use_irc=self.irc, text_in_discriminator=self.tgat)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "TrainConfig":
        """Flat keys; loss weights (k1..k4, beta, lambda_a, ...) sit at top level."""
        wvals = {k: v for k, v in values.items() if k in _WEIGHT_KEYS}
        rest = {k: v for k, v in values.items() if k not in _WEIGHT_KEYS}
        kw, _ = fill_dataclass(cls, rest)
        kw.pop("weights", None)
        wkw, _ = fill_dataclass(LossWeights, wvals)
        r_t = kw.get("r_t", cls.r_t)
        kw["weights"] = LossWeights.for_target(r_t, **wkw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        cfg = cls.from_kv(read_kv_file(path))
        base = Path(path).parent
        for name in ("data", "out", "semantic", "resume", "log", "perceptual_weights"):
            v = getattr(cfg, name)
            if v and not os.path.isabs(v):
                setattr(cfg, name, str(base / v))
        return cfg


@dataclass
class StepResult:
    losses: LossBreakdown
    disc_loss: float
    rate_bpp: float      # estimated latent rate of the batch
    control_bpp: float   # rate compared against r_t

    def row(self) -> dict:
        d = self.losses.as_floats()
        d.update(disc_loss=self.disc_loss, rate_bpp=self.rate_bpp, control_bpp=self.control_bpp)
        return d


LOG_COLUMNS = ("step", "epoch", "lambda_used", "rate_bpp", "control_bpp", "L_Rate", "L_R",
               "L_G", "L_P", "L_IT", "L_II", "L_M", "disc_loss", "total", "seconds")


def _finite(v) -> bool:
    return math.isfinite(float(v.detach()) if isinstance(v, torch.Tensor) else float(v))


class Trainer:
    """Owns the codec, discriminator, optimisers and the single seeded RNG."""

    def __init__(self, config: TrainConfig, samples: list[Sample], semantic: SemanticSpace):
        if not samples:
            raise ConfigurationError("training set is empty")
        self.config = config
        self.samples = samples
        self.semantic = semantic.freeze()
        arch = config.arch()
        if semantic.config.text_dim != arch.text_dim:
            raise ConfigurationError("semantic space and codec disagree on text_dim")
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.model = TGICModel(arch)
            self.disc = Discriminator(arch)
        self.phi = AlexNetFeatures(config.perceptual_weights) if config.use_perceptual else None
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.disc_learning_rate)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.epoch = 0
        self._order: list[int] = []
        self._pos = 0
        self.history: list[dict] = []

    # -- data ---------------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.samples) // self.config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def next_batch(self) -> tuple[torch.Tensor, list[str]]:
        bsz = min(self.config.batch_size, len(self.samples))
        if self._pos + bsz > len(self._order):
            self._order = torch.randperm(len(self.samples), generator=self.generator).tolist()
            self._pos = 0
            if self.step:
                self.epoch += 1
        idx = self._order[self._pos:self._pos + bsz]
        self._pos += bsz
        images, captions = [], []
        for i in idx:
            s = self.samples[i]
            img = s.image
            if img.shape[-2:] != (self.config.crop, self.config.crop):
                img = random_crop(img, self.config.crop, self.generator)
            images.append(img)
            j = int(torch.randint(len(s.captions), (1,), generator=self.generator))
            captions.append(s.captions[j])
        return torch.stack(images), captions

    # -- one update ---------------------------------------------------------

    def train_step(self, x: torch.Tensor, captions: list[str]) -> StepResult:
        cfg, w = self.config, self.config.weights
        self.model.train()
        with torch.no_grad():
            text = self.semantic.encode_captions(captions)
        out = self.model(x, text, "train", self.generator)
        x_hat = out["x_hat"]
        b, _, h, wd = x.shape
        rate = (bits(out["likelihood_y"]) + bits(out["likelihood_z"])) / (b * h * wd)

        # discriminator step
        d_loss = discriminator_loss(self.disc, x, x_hat, text)
        if not _finite(d_loss):
            raise TrainingError(f"non-finite discriminator loss at step {self.step}: "
                                f"{float(d_loss)}")
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        # generator step; the discriminator only passes gradient through
        self.disc.requires_grad_(False)
        try:
            l_g = generator_loss(self.disc, x_hat, text)
        finally:
            self.disc.requires_grad_(True)
        l_r = recon_loss(x_hat, x, peak=w.mse_peak)
        zero = x_hat.new_zeros(())
        l_p = perceptual_loss(x_hat, x, self.phi) if self.phi is not None else zero
        if cfg.use_semantic:
            beta = w.beta if cfg.use_image_semantic else 0.0
            l_it, l_ii, _ = semantic_consistent_loss(x_hat, x, text, self.semantic.image_encoder,
                                                     beta, self.semantic.config.gamma)
        else:
            l_it = l_ii = zero
        control = rate.item()
        if cfg.rate_includes_text:
            control += sum(text_bpp(len(c.encode("utf-8")) + 2, h, wd) for c in captions) / b
        lam = select_lambda(control, w)
        losses = total_loss(rate, l_r, l_g, l_p, l_it, l_ii, w, lam)
        if not _finite(losses.total):
            raise TrainingError(f"non-finite loss at step {self.step}: {losses.as_floats()}")
        self.opt_g.zero_grad(set_to_none=True)
        losses.total.backward()
        self.opt_g.step()
        self.step += 1
        return StepResult(losses, d_loss.item(), rate.item(), control)

    # -- loop ---------------------------------------------------------------

    def run(self, steps: int | None = None, log_path=None, callback=None) -> list[dict]:
        """Train until ``steps`` more updates (default: the configured budget)."""
        end = self.total_steps if steps is None else self.step + steps
        writer = None
        fh = None
        if log_path:
            new = not Path(log_path).exists() or self.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, LOG_COLUMNS, extrasaction="ignore")
            if new:
                writer.writeheader()
        try:
            while self.step < end:
                t0 = time.perf_counter()
                x, caps = self.next_batch()
                res = self.train_step(x, caps)
                row = res.row()
                row.update(step=self.step, epoch=self.epoch, seconds=time.perf_counter() - t0)
                self.history.append(row)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                if self.step % 50 == 0:
                    log.info("step %d  rate %.4f  L_R %.2f  total %.4f", self.step,
                             row["rate_bpp"], row["L_R"], row["total"])
                if (self.config.checkpoint_interval and self.config.out
                        and self.step % self.config.checkpoint_interval == 0):
                    self.save(training_state_path(self.config.out))
                if callback:
                    callback(self, row)
        finally:
            if fh:
                fh.close()
        return self.history

    def codec(self) -> Codec:
        """Independent inference copy of the current weights."""
        model = TGICModel(self.model.arch)
        model.load_state_dict(self.model.state_dict())
        return Codec(model, self.semantic)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "disc": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.generator.get_state(),
            "step": self.step,
            "epoch": self.epoch,
            "order": list(self._order),
            "pos": self._pos,
            "history": self.history,
        }

    def load_state_dict(self, d: dict) -> None:
        self.model.load_state_dict(d["model"])
        self.disc.load_state_dict(d["disc"])
        self.opt_g.load_state_dict(d["opt_g"])
        self.opt_d.load_state_dict(d["opt_d"])
        self.generator.set_state(d["rng"])
        self.step, self.epoch = int(d["step"]), int(d["epoch"])
        self._order, self._pos = list(d["order"]), int(d["pos"])
        self.history = list(d["history"])

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.semantic, self.config, training=self.state_dict())

    @classmethod
    def resume(cls, path, samples: list[Sample], config: TrainConfig | None = None) -> "Trainer":
        """Continue from a training checkpoint; ``config`` may extend the budget."""
        ck = load_checkpoint(path)
        if ck.training is None:
            raise VersionError(f"{path} is a deployable checkpoint without training state")
        saved = TrainConfig.from_dict(ck.config)
        config = config or saved
        if config.arch() != saved.arch():
            raise VersionError("architecture in config differs from the checkpoint")
        trainer = cls(config, samples, ck.semantic)
        trainer.load_state_dict(ck.training)
        return trainer


def training_state_path(out) -> str:
    return str(out) + ".state"


@dataclass
class Checkpoint:
    arch: ArchConfig
    config: dict
    model: TGICModel
    semantic: SemanticSpace
    training: dict | None = None
    extra: dict = field(default_factory=dict)

    def codec(self) -> Codec:
        return Codec(self.model, self.semantic)


def save_checkpoint(path, model: TGICModel, semantic: SemanticSpace, config: TrainConfig,
                    training: dict | None = None) -> None:
    """Write a checkpoint atomically; without ``training`` it is deployable only."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "training" if training is not None else "deployable",
        "arch": model.arch.to_dict(),
        "config": config.to_dict(),
        "model": model.state_dict(),
        "semantic": semantic.to_dict(),
    }
    if training is not None:
        payload["training"] = training
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        d = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise InputError(f"checkpoint {path} does not exist") from None
    except Exception as exc:  # torch raises a zoo of types for foreign files
        raise VersionError(f"{path} is not a readable checkpoint: {exc}") from None
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path} is not a tgic checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {d.get('version')} is not supported")
    try:
        arch = ArchConfig.from_dict(d["arch"])
        model = TGICModel(arch)
        model.load_state_dict(d["model"])
    except (RuntimeError, TypeError, KeyError) as exc:
        raise VersionError(f"checkpoint does not match its architecture: {exc}") from None
    semantic = SemanticSpace.from_dict(d["semantic"])
    return Checkpoint(arch, d["config"], model, semantic, d.get("training"))


def load_codec(path) -> Codec:
    return load_checkpoint(path).codec()


def prepare_semantic(config: TrainConfig, samples: list[Sample]) -> SemanticSpace:
    """Load pretrained caption/image encoders, or pretrain them on ``samples``."""
    if config.semantic and Path(config.semantic).exists():
        return SemanticSpace.load(config.semantic)
    arch = config.arch()
    pairs = [(s.image if s.image.shape[-1] == config.crop else
              random_crop(s.image, config.crop, torch.Generator().manual_seed(config.seed)),
              s.captions) for s in samples]
    space, hist = pretrain_semantic_space(
        pairs, PretrainConfig(steps=config.pretrain_steps, seed=config.seed),
        SemanticConfig(text_dim=arch.text_dim))
    if config.semantic:
        space.save(config.semantic)
    return space


def train(config: TrainConfig, samples: list[Sample] | None = None) -> Trainer:
    """Full run: data, semantic space, training loop, final checkpoint."""
    if samples is None:
        if not config.data:
            raise ConfigurationError("config needs a data manifest")
        samples = CaptionDataset.from_manifest(config.data).load_all()
    if config.resume:
        trainer = Trainer.resume(config.resume, samples, config)
    else:
        trainer = Trainer(config, samples, prepare_semantic(config, samples))
    log_path = config.log or (config.out + ".log.csv" if config.out else None)
    trainer.run(log_path=log_path)
    if config.out:
        trainer.save(training_state_path(config.out))
        save_checkpoint(config.out, trainer.model, trainer.semantic, config)
    return trainer
