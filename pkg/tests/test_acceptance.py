"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``[PASS]``/``[FAIL]`` line (outside pytest's output
capture) before asserting, so ``pytest -v | tee`` keeps a readable record.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from tgic.adversarial import Discriminator, discriminator_loss, generator_loss
from tgic.codec import Codec
from tgic.container import pack_container
from tgic.data import CaptionDataset, synth_pair, to_uint8, write_synthetic_dataset
from tgic.entropy import FactorizedPrior, GaussianParams, bits, likelihood_y, likelihood_z, text_bpp
from tgic.errors import TGICError
from tgic.evaluation import psnr
from tgic.model import TGICModel
from tgic.nets import IRC, ITA, ArchConfig
from tgic.objectives import (AlexNetFeatures, LossWeights, perceptual_loss, recon_loss,
                             select_lambda, semantic_consistent_loss, total_loss)
from tgic.rangecoder import build_cdf_table, decode_symbols, encode_symbols
from tgic.semantic import ImageSemanticEncoder, TextEmbedding
from tgic.trainer import TrainConfig, Trainer, prepare_semantic

from conftest import tiny_codec
from fdcheck import directional_grad_error, tensor_grad_error

OVERFIT_STEPS = 2000
GRAD_SEEDS = 20


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        return ok
    return emit


def desk_config(**kw) -> TrainConfig:
    base = dict(preset="desk", crop=64, batch_size=4, r_t=0.2, seed=0,
                max_steps=OVERFIT_STEPS, rate_includes_text=True)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    """Eight 64x64 training pairs and a semantic space pretrained on them."""
    man = write_synthetic_dataset(tmp_path_factory.mktemp("desk"), count=8, size=64, seed=0)
    samples = CaptionDataset.from_manifest(man).load_all()
    return samples, prepare_semantic(desk_config(), samples)


@pytest.fixture(scope="module")
def overfit(desk_data):
    samples, semantic = desk_data
    t0 = time.perf_counter()
    trainer = Trainer(desk_config(), samples, semantic)
    trainer.run()
    return trainer, trainer.codec(), time.perf_counter() - t0


def held_out_images(count, seed=99):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        img, caps = synth_pair(rng, 64)
        x = torch.from_numpy(np.asarray(img).copy()).permute(2, 0, 1).float() / 255.0
        out.append((x, caps[0]))
    return out


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_coder_lossless(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    tables = []
    for _ in range(100):
        n = int(rng.integers(2, 300))
        tables.append(build_cdf_table(rng.dirichlet(np.full(n, 0.5)), offset=int(rng.integers(-50, 50))))
    which = rng.integers(0, 100, 100_000)
    seq_tables = [tables[i] for i in which]
    symbols = [t.offset + int(rng.integers(0, t.size)) for t in seq_tables]
    decoded = decode_symbols(encode_symbols(symbols, seq_tables), seq_tables, len(symbols))
    mismatches = sum(a != b for a, b in zip(symbols, decoded))

    exhaustive_fail = 0
    count = 0
    for probs in ([1 / 3] * 3, [0.98, 0.01, 0.01], [0.0001, 0.4999, 0.5]):
        t = build_cdf_table(probs)
        for n in range(0, 9):
            for seq in itertools.product(range(3), repeat=n):
                count += 1
                tabs = [t] * n
                if decode_symbols(encode_symbols(seq, tabs), tabs, n) != list(seq):
                    exhaustive_fail += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and exhaustive_fail == 0 and elapsed < 60
    report(1, ok, f"{len(symbols)} symbols / 100 tables, {mismatches} mismatches; "
                  f"{count} exhaustive sequences, {exhaustive_fail} failures; {elapsed:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_2_rate_tightness(overfit, desk_data, report):
    _, codec, _ = overfit
    samples, _ = desk_data
    t0 = time.perf_counter()
    pairs = [(s.image, s.captions[0]) for s in samples] + held_out_images(4)
    worst_stream = -math.inf
    worst_file = -math.inf
    for x, cap in pairs:
        res = codec.compress(x, cap)
        r = res.report
        hw = r.height * r.width
        worst_stream = max(worst_stream,
                           len(res.bitstream.y_payload) * 8 - r.bits_y,
                           len(res.bitstream.z_payload) * 8 - r.bits_z)
        worst_file = max(worst_file, len(res.data) * 8 - (1.03 * r.bpp * hw + 128))
    elapsed = time.perf_counter() - t0
    ok = len(pairs) >= 10 and worst_stream <= 32 and worst_file <= 0 and elapsed < 120
    report(2, ok, f"{len(pairs)} encodings; worst stream excess over estimate "
                  f"{worst_stream:+.1f} bits (limit 32); worst file margin {worst_file:+.1f} bits "
                  f"(limit 0); {elapsed:.1f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------

def _corruptions(data: bytes, rng):
    n = len(data)
    for _ in range(20):
        b = bytearray(data)
        i = int(rng.integers(0, n))
        b[i] ^= 1 << int(rng.integers(0, 8))
        yield bytes(b)
    for _ in range(5):
        b = bytearray(data)
        i = int(rng.integers(0, n))
        b[i] = (b[i] + int(rng.integers(1, 256))) % 256
        yield bytes(b)
    yield data[: int(rng.integers(0, n))]
    yield data + bytes([int(rng.integers(0, 256))])
    yield data[:8] + data[9:]


@pytest.mark.slow
def test_criterion_3_sender_receiver(overfit, desk_data, report):
    _, codec, _ = overfit
    samples, _ = desk_data
    t0 = time.perf_counter()
    pairs = [(s.image, s.captions[0]) for s in samples] + held_out_images(8)
    extra = held_out_images(4, seed=7)
    for (x, cap), (h, w) in zip(extra, [(40, 56), (64, 36), (17, 64), (33, 33)]):
        pairs.append((x[:, :h, :w], cap))
    rng = np.random.default_rng(3)
    mismatched = 0
    silent = 0
    tried = 0
    for x, cap in pairs:
        res = codec.compress(x, cap)
        x_hat, caption = codec.decompress(res.data)
        if not (torch.equal(x_hat, res.reconstruction) and caption == cap):
            mismatched += 1
        for bad in _corruptions(res.data, rng):
            tried += 1
            try:
                codec.decompress(bad)
                silent += 1
            except TGICError:
                pass
    other = Codec(TGICModel(codec.arch), codec.semantic)
    try:
        other.decompress(res.data)
        silent += 1
    except TGICError:
        pass
    elapsed = time.perf_counter() - t0
    ok = len(pairs) == 20 and mismatched == 0 and silent == 0 and elapsed < 120
    report(3, ok, f"{len(pairs)} images, {mismatched} reconstruction mismatches; "
                  f"{tried + 1} corrupted/foreign decodes, {silent} accepted; {elapsed:.1f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------

def _text(sentence, words=None):
    b, d = sentence.shape
    if words is None:
        words = torch.zeros(b, 1, d, dtype=sentence.dtype)
    return TextEmbedding(words, sentence, torch.full((b,), words.shape[1], dtype=torch.long))


def _grad_cases(seed):
    """(name, error) pairs for one seed, all in float64."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    d = torch.float64
    out = []

    for name, block in (("ITA", ITA(3, 4)), ("IRC", IRC(3, 4))):
        block = block.double()
        v = torch.randn(1, 3, 4, 4, dtype=d, generator=g, requires_grad=True)
        w = torch.randn(1, 3, 4, dtype=d, generator=g, requires_grad=True)
        r = torch.randn(1, 3, 4, 4, dtype=d, generator=g)
        f = lambda: (block(v, w) * r).sum()
        wrt = [v, w, *block.parameters()]
        out.append((name, tensor_grad_error(f, [v, w], wrt, max_elems=12, generator=g)))

    y = torch.randn(2, 3, 3, dtype=d, generator=g) * 3
    mu = torch.randn(2, 3, 3, dtype=d, generator=g).requires_grad_()
    sig = torch.exp(torch.randn(2, 3, 3, dtype=d, generator=g)).requires_grad_()
    y = y.requires_grad_()
    f = lambda: bits(likelihood_y(y, GaussianParams(mu, sig)))
    out.append(("likelihood_y", tensor_grad_error(f, [y, mu, sig], [y, mu, sig])))

    prior = FactorizedPrior(2).double()
    z = (torch.randn(1, 2, 3, 3, dtype=d, generator=g) * 2).requires_grad_()
    fz = lambda: bits(likelihood_z(z, prior))
    wrt = [z, *prior.parameters()]
    out.append(("likelihood_z", tensor_grad_error(fz, wrt, wrt)))

    x = torch.rand(2, 3, 32, 32, dtype=d, generator=g)
    x_hat = torch.rand(2, 3, 32, 32, dtype=d, generator=g).requires_grad_()
    out.append(("L_R", directional_grad_error(lambda v: recon_loss(v, x, peak=255), x_hat,
                                              generator=g)))
    phi = AlexNetFeatures(seed=seed).double()
    out.append(("L_P", directional_grad_error(lambda v: perceptual_loss(v, x, phi), x_hat,
                                              generator=g, watch=[phi])))
    t = _text(torch.randn(2, 16, dtype=d, generator=g))
    disc = Discriminator(ArchConfig(widths=(8, 8, 12), latent_channels=8, hyper_channels=6,
                                    text_dim=16, res_blocks=1, disc_widths=(8, 8))).double()
    out.append(("L_G", directional_grad_error(lambda v: generator_loss(disc, v, t), x_hat,
                                              generator=g, watch=[disc])))
    enc = ImageSemanticEncoder(16, 8).double()
    out.append(("L_IT", directional_grad_error(
        lambda v: semantic_consistent_loss(v, x, t, enc)[0], x_hat, generator=g, watch=[enc])))
    out.append(("L_II", directional_grad_error(
        lambda v: semantic_consistent_loss(v, x, t, enc)[1], x_hat, generator=g, watch=[enc])))
    return out


def test_criterion_4_gradients(report):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(GRAD_SEEDS):
        for name, err in _grad_cases(seed):
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    ok = all(e <= 1e-4 for e in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(4, ok, f"worst relative error over {GRAD_SEEDS} seeds: {detail}; {elapsed:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_closed_forms(report):
    checks = {}
    enc = ImageSemanticEncoder(16, 8).double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64).expand(4, 3, 32, 32)
    t = _text(torch.randn(1, 16, dtype=torch.float64).expand(4, 16))
    l_it, l_ii, _ = semantic_consistent_loss(x, x, t, enc)
    checks["L_IT uniform 4-batch"] = (l_it.item(), 2.772589, 1e-6)
    checks["L_II at x_hat = x"] = (l_ii.item(), 0.0, 0.0)

    disc = Discriminator(ArchConfig(widths=(8, 8, 12), latent_channels=8, hyper_channels=6,
                                    text_dim=16, res_blocks=1, disc_widths=(8, 8),
                                    text_in_discriminator=False))
    torch.nn.init.zeros_(disc.head.weight)
    torch.nn.init.zeros_(disc.head.bias)
    dl = discriminator_loss(disc, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16), None)
    checks["disc_loss at D = 0.5"] = (dl.item(), 1.386294, 1e-6)

    rng = np.random.default_rng(5)
    w = LossWeights()
    worst = 0.0
    for _ in range(1000):
        c = rng.uniform(0, 10, 6)
        lam = float(rng.choice([w.lambda_a, w.lambda_b]))
        total = total_loss(*[torch.tensor(v, dtype=torch.float64) for v in c], w, lam).total.item()
        oracle = lam * c[0] + w.k1 * c[1] + w.k2 * c[2] + w.k3 * c[3] + w.k4 * (c[4] + c[5])
        worst = max(worst, abs(total - oracle))
    checks["total-loss linearity"] = (worst, 0.0, 1e-12)
    ok = all(abs(v - e) <= tol for v, e, tol in checks.values())
    report(5, ok, "; ".join(f"{k} = {v:.7g}" for k, (v, _, _) in checks.items()))
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_criterion_6_lambda_grid(report):
    bad = 0
    count = 0
    for r_t in (0.05, 0.078, 0.1, 0.12, 0.14, 0.17, 0.2, 0.3):
        w = LossWeights.for_target(r_t)
        expected_a = 8.0 if r_t <= 0.1 else (4.0 if r_t <= 0.17 else 2.0)
        if w.lambda_a != expected_a or w.lambda_b != 2 ** -4:
            bad += 1
        grid = list(np.linspace(r_t - 0.05, r_t + 0.05, 1001))
        grid += [r_t, np.nextafter(r_t, 0), np.nextafter(r_t, 1), 0.0]
        for rate in grid:
            count += 1
            want = w.lambda_a if rate > r_t else w.lambda_b
            if select_lambda(float(rate), w) != want:
                bad += 1
        if select_lambda(r_t, w) != w.lambda_b:
            bad += 1
    report(6, bad == 0, f"{count} grid rates over 8 targets (tie included), {bad} mismatches")
    assert bad == 0


# -- 7 -----------------------------------------------------------------------

def test_criterion_7_text_bitrate(report):
    caption = "a small yellow bird with black wings and long tail"
    assert len(caption.encode("utf-8")) == 50
    formula = text_bpp(50, 256, 256)
    codec = tiny_codec()
    res = codec.compress(torch.rand(3, 256, 256), caption)
    container = res.report.bpp_text
    recovered = codec.decompress(pack_container(res.bitstream))[1]
    ok = (abs(formula - 400 / 65536) <= 1e-9 and abs(container - 416 / 65536) <= 1e-9
          and recovered == caption)
    report(7, ok, f"formula {formula:.9f} (want {400 / 65536:.9f}), container {container:.9f} "
                  f"(want {416 / 65536:.9f})")
    assert ok


# -- 8 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_overfit(overfit, desk_data, report):
    trainer, codec, seconds = overfit
    samples, _ = desk_data
    psnrs, bpps = [], []
    for s in samples:
        res = codec.compress(s.image, s.captions[0])
        psnrs.append(psnr(s.image, res.reconstruction))
        bpps.append(res.file_bpp)
    h = trainer.history
    tail = h[-50:]
    l_m50, l_p50 = h[49]["L_M"], h[49]["L_P"]
    l_m_end = float(np.mean([r["L_M"] for r in tail]))
    l_p_end = float(np.mean([r["L_P"] for r in tail]))
    mean_psnr, mean_bpp = float(np.mean(psnrs)), float(np.mean(bpps))
    ok = (trainer.step == OVERFIT_STEPS and mean_psnr >= 28 and 0.1 <= mean_bpp <= 0.3
          and l_m_end < l_m50 and l_p_end < l_p50 and seconds <= 45 * 60)
    report(8, ok, f"PSNR mean {mean_psnr:.2f} dB (min {min(psnrs):.2f}); file bpp mean "
                  f"{mean_bpp:.4f} (range {min(bpps):.4f}..{max(bpps):.4f}); "
                  f"L_M {l_m50:.3f} -> {l_m_end:.3f}; L_P {l_p50:.3f} -> {l_p_end:.3f}; "
                  f"{seconds / 60:.1f} min")
    assert ok


# -- 9 -----------------------------------------------------------------------

ABLATIONS = ("tgfr", "tgir", "tgat", "use_perceptual", "use_semantic", "irc",
             "use_image_semantic")


def test_criterion_9_ablations(desk_data, report):
    samples, semantic = desk_data
    failures = []
    for flag in ABLATIONS:
        try:
            t = Trainer(desk_config(**{flag: False}, max_steps=5), samples, semantic)
            t.run()
            if not all(math.isfinite(r["total"]) for r in t.history):
                failures.append(f"{flag}: non-finite loss")
        except Exception as exc:  # report every variant, not just the first
            failures.append(f"{flag}: {type(exc).__name__}: {exc}")
    ok = not failures
    report(9, ok, f"{len(ABLATIONS) - len(failures)}/{len(ABLATIONS)} variants trained "
                  f"({', '.join(ABLATIONS)})" + ("; " + "; ".join(failures) if failures else ""))
    assert ok
