"""Per-image rate/fidelity measurement over a split manifest."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .codec import Codec
from .data import CaptionDataset, load_image, to_uint8
from .entropy import text_bpp
from .errors import InputError, TGICError

MetricHook = Callable[[torch.Tensor, torch.Tensor], float]


def _as_uint8(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        if img.dtype == torch.uint8:
            return img.numpy()
        return to_uint8(img)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise InputError(f"expected 8-bit pixels, got {arr.dtype}")
    return arr


def psnr(x, x_hat) -> float:
    """PSNR in dB on 8-bit pixel values; ``inf`` when the images are identical.

    Float tensors are taken as (3, H, W) in [0, 1] and rounded to 8 bits first.
    """
    a, b = _as_uint8(x), _as_uint8(x_hat)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(255.0) - 10.0 * math.log10(mse)


@dataclass
class EvalRecord:
    image_id: str
    bpp_total: float
    bpp_image: float
    bpp_text: float
    psnr_db: float
    file_bytes: int
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)


CSV_COLUMNS = tuple(f.name for f in fields(EvalRecord) if f.name != "extras")


def evaluate_pair(codec: Codec, image_id: str, image: torch.Tensor, caption: str,
                  metrics: dict[str, MetricHook] | None = None) -> EvalRecord:
    """Compress and decompress one pair and measure the file that was written."""
    res = codec.compress(image, caption)
    x_hat, _ = codec.decompress(res.data)
    h, w = image.shape[-2:]
    total = len(res.data) * 8 / (h * w)
    tbpp = text_bpp(res.bitstream.caption_bytes, h, w)
    rec = EvalRecord(image_id, total, total - tbpp, tbpp, psnr(image, x_hat), len(res.data))
    for name, hook in (metrics or {}).items():
        rec.extras[name] = float(hook(image, x_hat))
    return rec


@dataclass
class EvalResult:
    records: list[EvalRecord]
    errors: dict[str, str]

    def summary(self) -> dict:
        if not self.records:
            return {}
        out = {"image_id": "MEAN"}
        for col in CSV_COLUMNS[1:]:
            out[col] = float(np.mean([getattr(r, col) for r in self.records]))
        for name in self.records[0].extras:
            out[name] = float(np.mean([r.extras[name] for r in self.records]))
        return out


def evaluate_dataset(codec: Codec, dataset: CaptionDataset,
                     metrics: dict[str, MetricHook] | None = None,
                     workers: int = 1) -> EvalResult:
    """Evaluate every manifest entry; per-image failures are collected, not raised.

    The first caption of each image is the one transmitted.
    """
    def one(name):
        try:
            image = load_image(dataset.image_path(name))
            return name, evaluate_pair(codec, name, image, dataset.captions(name)[0], metrics)
        except TGICError as exc:
            return name, exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, dataset.names))
    else:
        results = [one(n) for n in dataset.names]
    records, errors = [], {}
    for name, r in results:
        if isinstance(r, EvalRecord):
            records.append(r)
        else:
            errors[name] = f"{type(r).__name__}: {r}"
    return EvalResult(records, errors)


def write_eval_csv(result: EvalResult, path) -> None:
    """One row per record plus a ``MEAN`` row; errors go to ``<path>.errors.txt``."""
    extra_cols = list(result.records[0].extras) if result.records else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(CSV_COLUMNS) + extra_cols)
        for r in result.records:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS] + [_fmt(r.extras[c]) for c in extra_cols])
        s = result.summary()
        if s:
            w.writerow([_fmt(s[c]) for c in CSV_COLUMNS] + [_fmt(s[c]) for c in extra_cols])
    err_path = Path(str(path) + ".errors.txt")
    if result.errors:
        err_path.write_text("".join(f"{k}\t{v}\n" for k, v in result.errors.items()),
                            encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_eval_csv(path) -> tuple[list[dict], dict | None]:
    """Parse a CSV written by :func:`write_eval_csv` into rows and the summary."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    summary = None
    if rows and rows[-1]["image_id"] == "MEAN":
        summary = rows.pop()
    conv = lambda d: {k: (v if k == "image_id" else float(v)) for k, v in d.items()}
    return [conv(r) for r in rows], (conv(summary) if summary else None)
