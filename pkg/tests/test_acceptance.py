"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale training run (criterion 6) is shared by criteria 7 and 8 and
takes several minutes on one CPU core.
"""

import time
import warnings

import numpy as np
import pytest
import torch

from lvcodec.bottleneck import FactorizedPrior, build_cdf_tables, likelihood, range_decode, \
    range_encode, rate_bits
from lvcodec.codec import decode_pframe, decode_sequence, encode_pframe, encode_sequence
from lvcodec.flow import warp
from lvcodec.frames import ResolutionError, bundled_clip
from lvcodec.iframe import LosslessCodec
from lvcodec.metrics import msssim, psnr
from lvcodec.model import STAGES, CodecModel
from lvcodec.training import TrainingSchedule, loss_m, loss_mc, loss_me, loss_total, \
    train_progressive
from lvcodec.transforms import gdn, igdn

from conftest import record_criterion, sample_from_prior
from oracles import central_diff, gradient_rel_error, rel_error

# desk-scale training profile for the 64x64 bundled clip
DESK_SCHEDULE = dict(window=100, max_steps={"ME": 200, "M": 300, "MC": 300, "ALL": 100},
                     prior_lr_scale=10.0)
SWEEP_LAMBDAS = (256.0, 512.0, 1024.0, 2048.0)
SWEEP_STEPS = 300
FINETUNE_MAX_STEPS = 2000
FINETUNE_EVAL_EVERY = 25


def check(number, condition, detail):
    record_criterion(number, bool(condition), detail)
    assert condition, detail


def _code_pair(model, clip):
    """Code frame 1 from frame 0 (a lossless I-frame) and return the coding trace."""
    trace = {}
    payload, recon = encode_pframe(clip[0], clip[1], model, trace)
    return payload, recon, trace


# -- 1 ------------------------------------------------------------------------

def test_c1_entropy_coding_exactness(trained_prior):
    tables = build_cdf_tables(trained_prior)
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    failures = 0
    for trial in range(1000):
        h, w = rng.integers(1, 7, size=2)
        if trial % 2:
            sym = sample_from_prior(trained_prior, (tables.channels, h, w), rng, span=60)
        else:
            spread = int(rng.choice([2, 20, 200, 5000]))
            sym = rng.integers(-spread, spread + 1, (tables.channels, h, w))
        out = range_decode(range_encode(sym, tables), tables, sym.shape)
        failures += not np.array_equal(out, sym)
    elapsed = time.perf_counter() - start
    check(1, failures == 0 and elapsed < 60,
          f"1000 round trips, {failures} mismatches, {elapsed:.1f}s (< 60s)")


# -- 2 ------------------------------------------------------------------------

def test_c2_rate_fidelity(trained_prior):
    tables = build_cdf_tables(trained_prior)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        sym = sample_from_prior(trained_prior, (tables.channels, 16, 16), rng)  # 4096 symbols
        with torch.no_grad():
            est = rate_bits(likelihood(torch.from_numpy(sym).float()[None], trained_prior))
        est = float(est.total_bits)
        actual = 8 * len(range_encode(sym, tables))
        worst = max(worst, abs(actual - est) / est)
    check(2, worst <= 0.05, f"20 trials of 4096 symbols, worst |actual-est|/est = {worst:.4f} (<= 0.05)")


# -- 3 ------------------------------------------------------------------------

def _gradient_errors():
    g = torch.Generator().manual_seed(3)
    d = dict(dtype=torch.float64)
    errs = {k: [] for k in ("gdn", "igdn", "warp", "likelihood", "loss_me", "loss_m",
                            "loss_mc", "loss_total")}
    torch.manual_seed(3)
    prior = FactorizedPrior(3).double()
    for _ in range(10):
        x = torch.randn(1, 3, 3, 3, generator=g, **d)
        beta = torch.rand(3, generator=g, **d) + 0.2
        gamma = torch.rand(3, 3, generator=g, **d)
        w = torch.randn(1, 3, 3, 3, generator=g, **d)
        for name, fn in (("gdn", gdn), ("igdn", igdn)):
            errs[name].append(max(
                gradient_rel_error(lambda t: (fn(t, beta, gamma) * w).sum(), x),
                gradient_rel_error(lambda b: (fn(x, b, gamma) * w).sum(), beta),
                gradient_rel_error(lambda m: (fn(x, beta, m) * w).sum(), gamma)))
        errs["likelihood"].append(
            gradient_rel_error(lambda t: (likelihood(t, prior) * w).sum(), x * 3))

        img = torch.rand(1, 3, 6, 7, generator=g, **d)
        flow = torch.rand(1, 2, 6, 7, generator=g, **d) * 0.6 + 0.2  # non-integer, in frame
        wi = torch.randn(1, 3, 6, 7, generator=g, **d)
        errs["warp"].append(max(gradient_rel_error(lambda f: (warp(img, f) * wi).sum(), flow),
                                gradient_rel_error(lambda i: (warp(i, flow) * wi).sum(), img)))

        xt = torch.rand(1, 3, 8, 8, generator=g, **d)
        ref = torch.rand(1, 3, 8, 8, generator=g, **d)
        v = torch.rand(1, 2, 8, 8, generator=g, **d) * 3 - 1.5 + 0.37
        errs["loss_me"].append(gradient_rel_error(lambda f: loss_me(xt, ref, f), v))
        errs["loss_m"].append(gradient_rel_error(lambda f: loss_m(xt, ref, f, 0.2, 256.0), v))
        errs["loss_mc"].append(gradient_rel_error(lambda xb: loss_mc(xt, xb, 0.2, 256.0), ref))
        errs["loss_total"].append(
            gradient_rel_error(lambda xh: loss_total(xt, xh, 0.1, 0.3, 1024.0), ref))

    # likelihood w.r.t. a prior parameter
    param = prior.matrices[2]
    x = torch.randn(1, 3, 3, 3, generator=g, **d)
    (ana,) = torch.autograd.grad(likelihood(x, prior).sum(), param)
    saved = param.data.clone()

    def as_fn(m):
        param.data = m
        return likelihood(x, prior).sum()

    num = central_diff(as_fn, saved)
    param.data = saved
    errs["likelihood"].append(rel_error(ana, num))
    return errs


def test_c3_gradient_suite():
    errs = _gradient_errors()
    worst = {k: max(v) for k, v in errs.items()}
    enough = all(len(v) >= 10 for v in errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check(3, enough and max(worst.values()) < 1e-4, f"max rel. error per op ({detail}) < 1e-4")


# -- 4 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def random_model():
    torch.manual_seed(11)
    return CodecModel(1024).eval()


def test_c4_shape_chain(random_model):
    problems = []
    for h, w in ((64, 64), (192, 256)):
        g = torch.Generator().manual_seed(h)
        ref, raw = torch.rand(3, h, w, generator=g), torch.rand(3, h, w, generator=g)
        payload, recon, trace = None, None, {}
        payload, recon = encode_pframe(ref, raw, random_model, trace)
        latent = (1, 128, h // 16, w // 16)
        expected = {
            "flow": (1, 2, h, w), "flow_latent": latent, "flow_latent_hat": latent,
            "flow_hat": (1, 2, h, w), "warped": (1, 3, h, w), "mc": (1, 3, h, w),
            "residual": (1, 3, h, w), "res_latent": latent, "res_latent_hat": latent,
            "res_hat": (1, 3, h, w), "recon": (1, 3, h, w),
        }
        got = {k: tuple(v.shape) for k, v in trace.items()}
        if got != expected:
            problems.append(f"{h}x{w}: {got}")
        if any(t.dtype != torch.float32 for t in trace.values()):
            problems.append(f"{h}x{w}: non-float32 intermediate")
        if tuple(recon.shape) != (3, h, w) or recon.min() < 0 or recon.max() > 1:
            problems.append(f"{h}x{w}: recon shape/range")
        if payload.latent_hw != (h // 16, w // 16) or payload.symbol_count != h * w // 2:
            problems.append(f"{h}x{w}: payload counts")
        for key in ("flow_latent_hat", "res_latent_hat"):
            if not torch.equal(trace[key], trace[key].round()):
                problems.append(f"{h}x{w}: {key} not integer")
        if not torch.equal(trace["residual"], raw[None] - trace["mc"]):
            problems.append(f"{h}x{w}: residual != raw - mc")
    check(4, not problems, "64x64 and 256x192 intermediate shapes match"
          + ("" if not problems else f": {problems}"))


# -- 5 ------------------------------------------------------------------------

def test_c5_determinism():
    mismatches, reencode = 0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for trial in range(50):
            torch.manual_seed(1000 + trial)
            model = CodecModel(1024).eval()
            g = torch.Generator().manual_seed(trial)
            h, w = 16 * int(torch.randint(1, 3, (1,), generator=g)), 16 * int(torch.randint(1, 4, (1,), generator=g))
            ref, raw = torch.rand(3, h, w, generator=g), torch.rand(3, h, w, generator=g)
            payload, recon = encode_pframe(ref, raw, model)
            mismatches += not torch.equal(decode_pframe(ref, payload, model), recon)
            if trial % 10 == 0:
                frames = [ref, raw, torch.rand(3, h, w, generator=g)]
                a = encode_sequence(frames, model, LosslessCodec()).data
                b = encode_sequence(frames, model, LosslessCodec()).data
                reencode += a != b
                out = decode_sequence(a, model, LosslessCodec())
                mismatches += not all(torch.equal(x, y) for x, y in
                                      zip(out, encode_sequence(frames, model, LosslessCodec()).recons))
    check(5, mismatches == 0 and reencode == 0,
          f"50 random models: {mismatches} decoder mismatches, {reencode} non-identical re-encodes")


# -- 6, 7, 8: desk-scale training ----------------------------------------------

@pytest.fixture(scope="module")
def clip():
    return bundled_clip()


@pytest.fixture(scope="module")
def desk_run(clip):
    ref, tgt = clip[0][None], clip[1][None]
    me = {}

    def on_stage_end(stage, model):
        if stage == "ME":
            with torch.no_grad():
                me["mse"] = float(torch.mean((warp(ref, model.flow_net(ref, tgt)) - tgt) ** 2))

    start = time.perf_counter()
    result = train_progressive([clip], 1024.0, schedule=TrainingSchedule(**DESK_SCHEDULE),
                               seed=0, on_stage_end=on_stage_end)
    return result, me["mse"], time.perf_counter() - start


def _window_means(values, window):
    return [float(np.mean(values[i:i + window])) for i in range(0, len(values) - window + 1, window)]


def test_c6_desk_training(clip, desk_run):
    result, me_mse, elapsed = desk_run
    baseline = float(torch.mean((clip[0] - clip[1]) ** 2))
    _, recon, trace = _code_pair(result.model, clip)
    rec_psnr = psnr(recon, clip[1])
    warp_psnr = psnr(trace["warped"][0], clip[1])
    means = _window_means(result.losses("ALL"), DESK_SCHEDULE["window"])
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    ok = (result.stage_order() == list(STAGES) and me_mse < 0.25 * baseline
          and rec_psnr > 30 and rec_psnr > warp_psnr and decreasing and elapsed < 15 * 60)
    check(6, ok,
          f"ME warp MSE {me_mse / baseline:.3f} of baseline (< 0.25); recon {rec_psnr:.2f} dB "
          f"(> 30, > warped {warp_psnr:.2f}); ALL window means "
          f"{' > '.join(f'{m:.3f}' for m in means)}; {elapsed / 60:.1f} min (< 15)")


@pytest.fixture(scope="module")
def sweep(clip, desk_run):
    base = desk_run[0].model
    points = {}
    for lam in SWEEP_LAMBDAS:
        sched = TrainingSchedule(stages=("ALL",), window=SWEEP_STEPS, min_lr=1e-4,
                                 max_steps={s: SWEEP_STEPS for s in STAGES}, prior_lr_scale=10.0)
        model = train_progressive([clip], lam, schedule=sched, seed=1, init=base).model
        payload, recon, _ = _code_pair(model, clip)
        bpp = 8 * len(payload.to_bytes()) / (64 * 64)
        points[lam] = (bpp, float(torch.mean((recon - clip[1]) ** 2)))
    return points


def test_c7_rd_monotonicity(sweep):
    lams = sorted(sweep)
    good = [sweep[b][0] >= sweep[a][0] and sweep[b][1] <= sweep[a][1] for a, b in zip(lams, lams[1:])]
    detail = "; ".join(f"lambda {lam:g}: {sweep[lam][0]:.4f} bpp, MSE {sweep[lam][1]:.2e}" for lam in lams)
    check(7, all(good), f"{sum(good)}/{len(good)} adjacent pairs ordered ({detail})")


def test_c8_msssim_finetune(clip, desk_run):
    init = desk_run[0].model

    def score(model):
        _, recon, _ = _code_pair(model, clip)
        return float(msssim(recon.double(), clip[1].double(), 3))

    before = score(init)
    best = {"value": before, "step": 0}

    def callback(row, model):
        if row["step"] % FINETUNE_EVAL_EVERY:
            return False
        model.eval()
        value = score(model)
        model.train()
        if value > best["value"]:
            best.update(value=value, step=row["step"])
        return value - before >= 0.001

    sched = TrainingSchedule(stages=("ALL",), window=FINETUNE_MAX_STEPS, min_lr=1e-4,
                             max_steps={s: FINETUNE_MAX_STEPS for s in STAGES}, prior_lr_scale=10.0)
    result = train_progressive([clip], 32.0, "ms-ssim", schedule=sched, seed=2, init=init,
                               callback=callback)
    steps = len(result.log)
    gain = best["value"] - before
    check(8, gain >= 0.001 and best["step"] <= FINETUNE_MAX_STEPS,
          f"MS-SSIM {before:.5f} -> {best['value']:.5f} (gain {gain:+.5f}, >= 0.001) "
          f"at step {best['step']} of {steps} (<= {FINETUNE_MAX_STEPS})")


# -- 9 ------------------------------------------------------------------------

def test_c9_resolution_contract(random_model):
    g = torch.Generator().manual_seed(9)
    frames = [(torch.rand(3, 60, 70, generator=g) * 255).round() / 255 for _ in range(3)]
    try:
        encode_sequence(frames, random_model, LosslessCodec(), policy="reject")
        rejected = False
    except ResolutionError:
        rejected = True
    enc = encode_sequence(frames, random_model, LosslessCodec(), policy="pad")
    out = decode_sequence(enc.data, random_model, LosslessCodec())
    shapes_ok = all(tuple(f.shape) == (3, 60, 70) for f in out)
    exact = all(torch.equal(a, b) for a, b in zip(out, enc.recons)) and torch.equal(out[0], frames[0])
    check(9, rejected and shapes_ok and exact,
          f"reject policy raised: {rejected}; pad policy restored 60x70: {shapes_ok}; bit-exact: {exact}")


# -- 10 -----------------------------------------------------------------------

def test_c10_metric_sanity():
    a = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(10)) * 0.8
    p = psnr(a, a + 0.1)
    b = torch.rand(3, 176, 176, generator=torch.Generator().manual_seed(11))
    s5 = float(msssim(b, b))
    s3 = float(msssim(a, a, 3))
    check(10, abs(p - 20.0) <= 0.01 and abs(s5 - 1) <= 1e-6 and abs(s3 - 1) <= 1e-6,
          f"PSNR(0.1 offset) = {p:.4f} dB; MS-SSIM(identical) = {s5:.7f} (5 scales), {s3:.7f} (3 scales)")
