"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line (also repeated in the end-of-run summary)
before asserting, so a failing criterion still reports its measured numbers.
"""
import time
from fractions import Fraction

import numpy as np

from repdistill import autograd as ag
from repdistill.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from repdistill.degrade import (
    NOISE_SIGMA, bicubic_resize, degrade, degrade_bd, degrade_bi, degrade_dn, gaussian_kernel,
)
from repdistill.dynamic import DynamicRepConv
from repdistill.gradcheck import TOLERANCE, suite
from repdistill.metrics import IDENTICAL, psnr, ssim
from repdistill.network import ModelConfig, build_model, fuse_model, super_resolve
from repdistill.profile import count_madds, count_params
from repdistill.reparam import RepConv
from repdistill.train import trace_csv, train_toy

from conftest import CRITERIA_LINES, randomize_bn, randomize_generators
from test_degrade import keys_oracle
from test_metrics import ssim_direct

FULL_X4 = dict(scale=4, channels=56, blocks=4, latent=16)
REF_PARAMS, REF_MADDS = 675_000, 32.62e9
REF_TRAIN_PARAMS = 1_173_000


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print("\n" + line)
    assert ok, detail


def within(value, target, tol) -> bool:
    return abs(value / target - 1) <= tol


def test_criterion_1_fusion_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(100):
        style = ("dbb", "repvgg")[i % 2]
        m = RepConv(8, 8, 3, style, rng=rng)
        randomize_bn(m, rng)
        m.eval()
        x = rng.normal(size=(1, 8, 16, 16)).astype(np.float32)
        with ag.no_grad():
            before = m(x).data
            m.fuse()
            worst = max(worst, float(np.abs(m(x).data - before).max()))

    net = build_model(ModelConfig(scale=2, channels=16, blocks=2, latent=4), seed=3)
    randomize_bn(net, rng)
    randomize_generators(net, rng)
    x = rng.uniform(size=(1, 3, 24, 24))
    e2e = float(np.abs(super_resolve(fuse_model(net), x) - super_resolve(net, x)).max())
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-4 and e2e <= 1e-4 and elapsed < 60,
           f"100 branch graphs max err {worst:.2e}, end-to-end {e2e:.2e}, {elapsed:.1f}s")


def test_criterion_2_dynamic_neutrality():
    rng = np.random.default_rng(12)
    worst = 0.0
    for style in ("static", "repvgg", "dbb"):
        m = DynamicRepConv(16, 16, 3, latent=4, style=style, rng=rng)
        randomize_bn(m, rng)
        m.eval()
        x = rng.normal(size=(2, 16, 12, 12)).astype(np.float32)
        with ag.no_grad():
            out, res = m(x)
            worst = max(worst, float(np.abs(out.data - m.static(x).data).max()), float(np.abs(res.data).max()))

    toy = dict(scale=2, channels=16, blocks=2)
    counts = {}
    for style in ("static", "dbb"):
        l0 = build_model(ModelConfig(**toy, latent=0, rep_style=style))
        base = build_model(ModelConfig(**toy, latent=0, conv_type="static", rep_style=style))
        counts[style] = (l0.num_params(), base.num_params(),
                         [n for n, _ in l0.named_parameters()] == [n for n, _ in base.named_parameters()])
    same = all(a == b and names for a, b, names in counts.values())
    full_l0 = count_params(build_model(ModelConfig(**{**FULL_X4, "latent": 0})))
    report(2, worst <= 1e-6 and same,
           f"neutral max err {worst:.2e}; L=0 vs static toy params {counts}; full L=0 = {full_l0}")


def test_criterion_3_cost_tables():
    t0 = time.perf_counter()
    full = build_model(ModelConfig(**FULL_X4))
    params = count_params(full)
    madds = count_madds(full, 720, 1280)
    sweep = [build_model(ModelConfig(**{**FULL_X4, "latent": L})) for L in (0, 8, 16, 24)]
    sweep_p = [count_params(m) for m in sweep]
    sweep_m = [count_madds(m, 720, 1280) for m in sweep]
    monotone = all(a < b for a, b in zip(sweep_p, sweep_p[1:])) and all(a < b for a, b in zip(sweep_m, sweep_m[1:]))
    ratio = count_params(full, "training") / params
    want_ratio = REF_TRAIN_PARAMS / REF_PARAMS
    ok = within(params, REF_PARAMS, 0.15) and within(madds, REF_MADDS, 0.15) and monotone \
        and within(ratio, want_ratio, 0.20)
    report(3, ok, f"params {params} ({params / REF_PARAMS - 1:+.1%}), MAdds {madds / 1e9:.2f}G "
                  f"({madds / REF_MADDS - 1:+.1%}), sweep params {sweep_p}, sweep MAdds "
                  f"{[round(v / 1e9, 4) for v in sweep_m]}, train/infer {ratio:.3f} vs {want_ratio:.3f}, "
                  f"{time.perf_counter() - t0:.1f}s")


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    results = suite(seed=0)
    names = {n for n, _ in results}
    worst = max(err for _, err in results)
    covered = {"dynamic_repconv", "rdu_base", "rdu_srb", "rdu_scb", "rdu_rb", "sdf", "ddf", "esa", "model"} <= names
    elapsed = time.perf_counter() - t0
    report(4, worst <= TOLERANCE and covered and elapsed < 120,
           f"{len(results)} checks, worst relative error {worst:.2e}, {elapsed:.1f}s")


def _toy_pair():
    yy, xx = np.mgrid[0:64, 0:64] / 64.0
    hr = np.stack([0.5 + 0.3 * np.sin(2 * np.pi * xx), 0.5 + 0.3 * np.cos(2 * np.pi * yy),
                   0.5 + 0.2 * np.sin(2 * np.pi * (xx + yy))])[None].astype(np.float32)
    return bicubic_resize(hr, Fraction(1, 2)), hr


def test_criterion_5_toy_learning():
    lr, hr = _toy_pair()
    cfg = ModelConfig(scale=2, channels=16, blocks=1, latent=4)
    steps = 1200
    model, trace = train_toy(build_model(cfg, seed=0), [(lr, hr)], steps, seed=0)
    final = trace[-1].loss
    db = psnr(np.clip(super_resolve(model, lr), 0, 1) * 255, hr * 255)
    _, a = train_toy(build_model(cfg, seed=1), [(lr, hr)], 5, seed=1)
    _, b = train_toy(build_model(cfg, seed=1), [(lr, hr)], 5, seed=1)
    deterministic = trace_csv(a) == trace_csv(b)
    report(5, final < 0.02 and db > 30 and deterministic and steps <= 2000,
           f"final L1 {final:.4f} after {steps} steps, PSNR {db:.2f} dB, deterministic={deterministic}")


def test_criterion_6_metrics():
    rng = np.random.default_rng(16)
    a = rng.uniform(0, 255, (32, 32))
    exact = psnr(a, a) == IDENTICAL and ssim(a, a) == 1.0
    uniform = psnr(a, a + 1)
    worst = 0.0
    for _ in range(5):
        x = rng.uniform(0, 255, (16, 16))
        y = np.clip(x + rng.normal(0, 25, x.shape), 0, 255)
        worst = max(worst, abs(ssim(x, y) - ssim_direct(x, y)))
    report(6, exact and abs(uniform - 48.1308) <= 1e-3 and worst <= 1e-6,
           f"identical ok={exact}, uniform-diff PSNR {uniform:.4f} dB, SSIM oracle max diff {worst:.2e}")


def test_criterion_7_degradation():
    rng = np.random.default_rng(17)
    worst = 0.0
    for s in (Fraction(1, 2), Fraction(1, 3), Fraction(1, 4), 2, 3):
        img = rng.uniform(size=(1, 3, 12, 12))
        worst = max(worst, float(np.abs(bicubic_resize(img, s) - keys_oracle(img, float(s))).max()))
    r = np.arange(7) - 3
    closed = np.exp(-(r[:, None] ** 2 + r[None] ** 2) / (2 * 1.6 ** 2))
    taps = float(np.abs(gaussian_kernel() - closed / closed.sum()).max())
    noisy = degrade_dn(np.full((1, 3, 600, 600), 0.5), seed=7, clip=False)
    std_err = abs(noisy.std() / NOISE_SIGMA - 1)
    img = rng.uniform(size=(1, 3, 24, 24))
    seeded = all(np.array_equal(degrade(img, m, 3, seed=9), degrade(img, m, 3, seed=9)) for m in ("bi", "bd", "dn"))
    seeded &= np.array_equal(degrade_bi(img, 2), degrade_bi(img, 2)) and np.array_equal(degrade_bd(img), degrade_bd(img))
    report(7, worst <= 1e-6 and taps <= 1e-12 and std_err <= 0.05 and seeded,
           f"Keys oracle max diff {worst:.2e}, Gaussian taps diff {taps:.1e}, DN std error {std_err:.2%}, "
           f"deterministic={seeded}")


def test_criterion_8_serialization(tmp_path):
    rng = np.random.default_rng(18)
    model = build_model(ModelConfig(scale=2, channels=16, blocks=2, latent=4), seed=5)
    randomize_bn(model, rng)
    randomize_generators(model, rng)
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, p)
    first = p.read_bytes()
    save_checkpoint(load_checkpoint(p), p)
    round_trip = p.read_bytes() == first

    fused = fuse_model(model)
    q = tmp_path / "f.ckpt"
    save_checkpoint(fused, q)
    loaded = load_checkpoint(q)
    x = rng.uniform(size=(1, 3, 20, 20))
    same = loaded.fused and not loaded.training and np.array_equal(super_resolve(loaded, x), super_resolve(fused, x))
    stable = encode(decode(encode(fused))) == encode(fused)
    report(8, round_trip and same and stable,
           f"save-load-save identical={round_trip}, fused outputs identical={same}, fused re-encode={stable}")
