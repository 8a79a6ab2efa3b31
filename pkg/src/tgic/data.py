"""Paired image/caption datasets on disk, plus a procedural toy set.

Layout::

    root/images/<name>.png      (or .jpg / .jpeg)
    root/captions/<name>.txt    one caption per line, UTF-8
    root/train.txt              split manifest: one name per line

A manifest's dataset root is the directory holding it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from .errors import InputError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path) -> torch.Tensor:
    """Read an RGB image as a (3, H, W) float tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8, rounding half up after clamping."""
    arr = image.detach().cpu().double().clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def read_caption_arg(value: str) -> str:
    """``@file`` reads the first line of a UTF-8 file; anything else is literal."""
    if value.startswith("@"):
        try:
            text = Path(value[1:]).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"cannot read caption file {value[1:]}: {exc}") from None
        lines = text.splitlines()
        return lines[0] if lines else ""
    return value


def read_manifest(path) -> list[str]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from None
    names = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


@dataclass
class Sample:
    name: str
    image: torch.Tensor
    captions: list[str]


class CaptionDataset:
    """Image/caption pairs listed by a manifest; images loaded lazily."""

    def __init__(self, root, names: list[str]):
        self.root = Path(root)
        self.names = list(names)

    @classmethod
    def from_manifest(cls, manifest) -> "CaptionDataset":
        manifest = Path(manifest)
        return cls(manifest.parent, read_manifest(manifest))

    def __len__(self):
        return len(self.names)

    def image_path(self, name: str) -> Path:
        for suf in IMAGE_SUFFIXES:
            p = self.root / "images" / f"{name}{suf}"
            if p.exists():
                return p
        raise InputError(f"no image for {name!r} under {self.root / 'images'}")

    def captions(self, name: str) -> list[str]:
        p = self.root / "captions" / f"{name}.txt"
        try:
            lines = p.read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"cannot read captions for {name!r}: {exc}") from None
        caps = [c.strip() for c in lines if c.strip()]
        if not caps:
            raise InputError(f"caption file for {name!r} is empty")
        return caps

    def __getitem__(self, i) -> Sample:
        name = self.names[i]
        return Sample(name, load_image(self.image_path(name)), self.captions(name))

    def load_all(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]


def random_crop(image: torch.Tensor, size: int, generator: torch.Generator) -> torch.Tensor:
    _, h, w = image.shape
    if h < size or w < size:
        raise InputError(f"image {h}x{w} smaller than crop {size}")
    top = int(torch.randint(0, h - size + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - size + 1, (1,), generator=generator))
    return image[:, top:top + size, left:left + size]


# -- procedural toy set -------------------------------------------------------

_COLORS = {
    "red": (200, 40, 40), "orange": (230, 130, 30), "yellow": (235, 210, 50),
    "green": (60, 160, 70), "blue": (50, 90, 200), "purple": (130, 60, 170),
    "white": (235, 235, 235), "black": (30, 30, 30), "pink": (235, 130, 170),
    "brown": (130, 85, 45),
}
_BACKGROUNDS = {"sky": (150, 190, 235), "grass": (120, 170, 90), "sand": (220, 200, 150),
                "dusk": (90, 80, 130)}


def _vertical_gradient(size, top, bottom) -> Image.Image:
    t = np.linspace(0.0, 1.0, size)[:, None, None]
    arr = (1 - t) * np.array(top) + t * np.array(bottom)
    arr = np.broadcast_to(arr, (size, size, 3))
    return Image.fromarray(arr.astype(np.uint8))


def _draw_bird(draw, rng, size, body, wing, beak):
    cx, cy = size * rng.uniform(0.4, 0.6), size * rng.uniform(0.45, 0.6)
    bw, bh = size * rng.uniform(0.22, 0.3), size * rng.uniform(0.14, 0.2)
    draw.ellipse([cx - bw, cy - bh, cx + bw, cy + bh], fill=body)
    draw.ellipse([cx - bw * 0.6, cy - bh * 0.5, cx + bw * 0.4, cy + bh * 0.7], fill=wing)
    hr = size * rng.uniform(0.09, 0.12)
    hx, hy = cx + bw * 0.85, cy - bh * 0.9
    draw.ellipse([hx - hr, hy - hr, hx + hr, hy + hr], fill=body)
    draw.polygon([(hx + hr * 0.8, hy - hr * 0.3), (hx + hr * 2.0, hy), (hx + hr * 0.8, hy + hr * 0.3)],
                 fill=beak)
    e = max(1.0, hr * 0.2)
    draw.ellipse([hx + hr * 0.2 - e, hy - hr * 0.3 - e, hx + hr * 0.2 + e, hy - hr * 0.3 + e],
                 fill=(20, 20, 20))


def _draw_flower(draw, rng, size, petal, center, petals):
    cx, cy = size * rng.uniform(0.4, 0.6), size * rng.uniform(0.4, 0.6)
    r = size * rng.uniform(0.22, 0.3)
    pr = r * 0.45
    phase = rng.uniform(0, 2 * math.pi)
    for k in range(petals):
        a = phase + 2 * math.pi * k / petals
        px, py = cx + math.cos(a) * r * 0.6, cy + math.sin(a) * r * 0.6
        draw.ellipse([px - pr, py - pr, px + pr, py + pr], fill=petal)
    cr = r * 0.32
    draw.ellipse([cx - cr, cy - cr, cx + cr, cy + cr], fill=center)


def synth_pair(rng: np.random.Generator, size: int = 64) -> tuple[Image.Image, list[str]]:
    """One smooth cartoon bird or flower and two captions describing it."""
    names = list(_COLORS)
    bg = rng.choice(list(_BACKGROUNDS))
    top = _BACKGROUNDS[bg]
    bottom = tuple(int(c * 0.75) for c in top)
    scale = 4  # draw large then downsample for anti-aliased edges
    img = _vertical_gradient(size * scale, top, bottom)
    draw = ImageDraw.Draw(img)
    if rng.random() < 0.5:
        body, wing, beak = rng.choice(names, 3, replace=False)
        _draw_bird(draw, rng, size * scale, _COLORS[body], _COLORS[wing], _COLORS[beak])
        caps = [f"a {body} bird with {wing} wings and a {beak} beak",
                f"this small {body} bird has a {beak} beak in front of the {bg}"]
    else:
        petal, center = rng.choice(names, 2, replace=False)
        n = int(rng.integers(5, 9))
        _draw_flower(draw, rng, size * scale, _COLORS[petal], _COLORS[center], n)
        caps = [f"a {petal} flower with {n} petals and a {center} center",
                f"this flower has {petal} petals around a {center} middle"]
    img = img.resize((size, size), Image.LANCZOS).filter(ImageFilter.GaussianBlur(0.6))
    return img, caps


def write_synthetic_dataset(root, count: int = 8, size: int = 64, seed: int = 0,
                            test_count: int = 0) -> Path:
    """Write ``count`` train and ``test_count`` test pairs; returns the train manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "captions").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    splits = {"train": [], "test": []}
    for i in range(count + test_count):
        split = "train" if i < count else "test"
        name = f"{split}_{i:04d}"
        img, caps = synth_pair(rng, size)
        img.save(root / "images" / f"{name}.png")
        (root / "captions" / f"{name}.txt").write_text("\n".join(caps) + "\n", encoding="utf-8")
        splits[split].append(name)
    for split, names in splits.items():
        if names or split == "train":
            (root / f"{split}.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return root / "train.txt"
