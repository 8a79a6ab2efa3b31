import math

import numpy as np
import pytest
import torch

from tgic.data import CaptionDataset, write_synthetic_dataset
from tgic.entropy import text_bpp
from tgic.errors import InputError
from tgic.evaluation import (CSV_COLUMNS, EvalResult, evaluate_dataset, evaluate_pair, psnr,
                             read_eval_csv, write_eval_csv)


def test_psnr_examples(rng):
    a = rng.integers(0, 256, (3, 8, 8), dtype=np.uint8)
    assert psnr(a, a) == math.inf
    b = a.astype(np.int16)
    b = np.where(b < 255, b + 1, b - 1).astype(np.uint8)  # every pixel off by one
    assert psnr(a, b) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(a, b) == pytest.approx(20 * math.log10(255), abs=1e-12)


def test_psnr_oracle(rng):
    for _ in range(20):
        a = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
        b = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
        mse = math.fsum(((a.astype(float) - b) ** 2).ravel()) / a.size
        assert psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / mse), abs=1e-10)


def test_psnr_on_float_tensors_rounds_to_8_bits():
    x = torch.full((3, 4, 4), 0.5)
    assert psnr(x, x + 1e-4) == math.inf
    with pytest.raises(InputError):
        psnr(x, torch.zeros(3, 4, 5))
    with pytest.raises(InputError):
        psnr(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))


def test_text_bpp_examples():
    assert text_bpp(50, 256, 256) == pytest.approx(400 / 65536, abs=1e-12)
    assert text_bpp(52, 256, 256) == pytest.approx(416 / 65536, abs=1e-12)
    assert round(text_bpp(50, 256, 256), 6) == 0.006104
    assert round(text_bpp(52, 256, 256), 6) == 0.006348


def test_evaluate_pair_identities(codec):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 24, 40, generator=g)
    cap = "a red bird with black wings"
    rec = evaluate_pair(codec, "img", x, cap, metrics={"l1": lambda a, b: (a - b).abs().mean()})
    assert rec.bpp_total == pytest.approx(rec.file_bytes * 8 / (24 * 40), abs=1e-12)
    assert rec.bpp_text == pytest.approx(8 * (2 + len(cap)) / (24 * 40), abs=1e-12)
    assert rec.bpp_image + rec.bpp_text == pytest.approx(rec.bpp_total, abs=1e-12)
    assert math.isfinite(rec.psnr_db) and "l1" in rec.extras


def test_dataset_csv_roundtrip(codec, tmp_path):
    man = write_synthetic_dataset(tmp_path / "d", count=3, size=32, seed=1)
    (tmp_path / "d" / "captions" / "train_0001.txt").unlink()
    (tmp_path / "d" / "train.txt").write_text("train_0000\ntrain_0001\ntrain_0002\nghost\n")
    ds = CaptionDataset.from_manifest(man)
    result = evaluate_dataset(codec, ds)
    assert [r.image_id for r in result.records] == ["train_0000", "train_0002"]
    assert set(result.errors) == {"train_0001", "ghost"}
    out = tmp_path / "eval.csv"
    write_eval_csv(result, out)
    rows, summary = read_eval_csv(out)
    assert len(rows) == 2 and summary is not None
    for col in CSV_COLUMNS[1:]:
        assert summary[col] == pytest.approx(np.mean([r[col] for r in rows]), rel=1e-12)
        assert [r[col] for r in rows] == [getattr(rec, col) for rec in result.records]
    errs = (tmp_path / "eval.csv.errors.txt").read_text().splitlines()
    assert len(errs) == 2 and errs[0].startswith("train_0001\tInputError")
    threaded = evaluate_dataset(codec, ds, workers=2)
    assert [r.bpp_total for r in threaded.records] == [r.bpp_total for r in result.records]


def test_empty_manifest_gives_header_only(codec, tmp_path):
    (tmp_path / "empty.txt").write_text("# nothing\n")
    result = evaluate_dataset(codec, CaptionDataset.from_manifest(tmp_path / "empty.txt"))
    write_eval_csv(result, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(CSV_COLUMNS)
    assert result.summary() == {}
    assert not (tmp_path / "e.csv.errors.txt").exists()


def test_summary_of_infinite_psnr(codec):
    from tgic.evaluation import EvalRecord
    r = EvalResult([EvalRecord("a", 1.0, 0.9, 0.1, math.inf, 10),
                    EvalRecord("b", 3.0, 2.9, 0.1, 30.0, 30)], {})
    s = r.summary()
    assert s["bpp_total"] == 2.0 and s["psnr_db"] == math.inf
    assert r.records[0].psnr_infinite
