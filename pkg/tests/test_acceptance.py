"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The trained-preset criteria (7, 8) share one cached training+eval run under
.cache/acceptance keyed by the run configuration; delete the directory to
retrain. Set GLYPHDIFF_ACCEPT_STEPS / _PROMPTS / _SAMPLES to rescale the run
(defaults reproduce the committed preset).
"""

import itertools
import time

import numpy as np
import pytest
import torch

from glyphdiff.dataset import load_dataset, synth_dataset
from glyphdiff.diffusion import IdentityCodec, default_schedule
from glyphdiff.edges import EdgeParams, canny
from glyphdiff.glyphs import make_scripts
from glyphdiff.guidance import GuidanceParams, cfg_combine, dynamic_ndg, ndcfg_combine
from glyphdiff.metrics import accuracy, levenshtein, ned
from glyphdiff.model import GlyphDenoiser, ModelConfig, init_control_from_base, load_checkpoint
from glyphdiff.oracle import GaussianMixture, verify_sampler
from glyphdiff.rendering import (BlendSchedule, blend_coeff, fuse_patches, generate,
                                 shifted_crop, small_text_generate, two_stage_generate)
from glyphdiff.evaluate import build_bench


def report(num: int, name: str, ok: bool, detail: str = ""):
    print(f"ACCEPTANCE {num:2d} [{'PASS' if ok else 'FAIL'}] {name}  {detail}")
    assert ok, f"criterion {num} failed: {name} {detail}"


# ---------------------------------------------------------------------------
# 1. Guidance algebra
# ---------------------------------------------------------------------------


def test_criterion_01_guidance_algebra():
    t0 = time.time()
    rng = np.random.default_rng(0)
    n = 10_000
    worst = 0.0
    for _ in range(n):
        a, b, c = rng.standard_normal((3, 4))
        w_cfg = rng.uniform(0.0, 10.0)
        w_ndg = rng.uniform(0.0, 10.0)
        # omega_ndg = 0: reduces to the image-conditioned CFG form
        e1 = np.abs(ndcfg_combine(a, b, c, w_cfg, 0.0) - cfg_combine(a, c, w_cfg)).max()
        # additionally omega_cfg = 1: pure conditional prediction
        e2 = np.abs(ndcfg_combine(a, b, c, 1.0, 0.0) - c).max()
        # empty condition: glyph-free features equal the conditional ones
        e3 = np.abs(ndcfg_combine(a, a, c, w_cfg, w_ndg) - cfg_combine(a, c, w_cfg)).max()
        worst = max(worst, e1, e2, e3)
    dt = time.time() - t0
    report(1, "guidance algebra reduction chain",
           worst < 1e-6 and dt < 60.0, f"worst={worst:.2e} over {n} cases in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. Schedule boundaries
# ---------------------------------------------------------------------------


def test_criterion_02_schedule_boundaries():
    T = 200
    bs = BlendSchedule(alpha1=3.0, T=T)
    gp = GuidanceParams(omega_cfg=7.5, omega_ndg=5.0, A=3.0, alpha2=3.0, T=T)
    errs = [
        abs(blend_coeff(T, bs) - 1.0),
        abs(blend_coeff(0, bs) - 0.0),
        abs(dynamic_ndg(T, gp) - gp.omega_ndg),
        abs(dynamic_ndg(0, gp) - (gp.omega_ndg + gp.A)),
    ]
    exact_half = blend_coeff(T // 2, bs) == 0.125
    grid = np.linspace(0, T, 1000)
    c1 = [blend_coeff(t, bs) for t in grid]
    w = [dynamic_ndg(t, gp) for t in grid]
    mono = all(x <= y + 1e-15 for x, y in zip(c1, c1[1:])) and \
        all(x >= y - 1e-15 for x, y in zip(w, w[1:]))
    ok = max(errs) < 1e-12 and exact_half and mono
    report(2, "blend/guidance schedule boundaries",
           ok, f"max boundary err={max(errs):.2e}, c1(T/2)==0.125: {exact_half}, monotone: {mono}")


# ---------------------------------------------------------------------------
# 3. Oracle sampler
# ---------------------------------------------------------------------------


def test_criterion_03_oracle_sampler():
    t0 = time.time()
    gm = GaussianMixture(weights=[0.35, 0.65], means=[[-1.5, 0.0], [1.5, 0.5]],
                         variances=[0.05, 0.08])
    rep = verify_sampler(gm, default_schedule(200), 10_000, 30, seed=7)
    dt = time.time() - t0
    w_ok = all(abs(e - t) <= 0.10 * t for e, t in
               zip(rep.mode_weights_est, rep.mode_weights_true))
    m_ok = all(e < 0.05 for e in rep.mode_mean_err)
    report(3, "exact-score DDIM transports the mixture",
           w_ok and m_ok and dt < 120.0,
           f"weights={rep.mode_weights_est} mean_errs={['%.3f' % e for e in rep.mode_mean_err]} "
           f"in {dt:.1f}s")


# ---------------------------------------------------------------------------
# 4. Patch round-trip
# ---------------------------------------------------------------------------


def test_criterion_04_patch_roundtrip():
    rng = np.random.default_rng(4)
    worst_rt = 0.0
    worst_pu = 0.0
    for _ in range(100):
        H = int(rng.integers(16, 65))
        W = int(rng.integers(16, 65))
        ph = int(rng.integers(8, min(H, 40) + 1))
        pw = int(rng.integers(8, min(W, 40) + 1))
        sh = int(rng.integers(1, ph))
        sw = int(rng.integers(1, pw))
        Z = torch.as_tensor(rng.standard_normal((3, H, W)))
        layout, patches = shifted_crop(Z, (ph, pw), (sh, sw))
        rec = fuse_patches(patches, layout)
        worst_rt = max(worst_rt, float((rec - Z).abs().max()))
        worst_pu = max(worst_pu, float(np.abs(layout.weight_masks().sum(0) - 1.0).max()))
    report(4, "fuse∘crop identity and partition of unity",
           worst_rt < 1e-6 and worst_pu < 1e-9,
           f"roundtrip={worst_rt:.2e} partition={worst_pu:.2e} over 100 geometries")


# ---------------------------------------------------------------------------
# 5. Loss gradients + reference Canny
# ---------------------------------------------------------------------------


def test_criterion_05_loss_gradients_and_canny():
    from tests.test_training import ProbeDenoiser, total_loss_probe
    from glyphdiff.training import TrainBatch, make_batch

    scripts = make_scripts(1, 6, seed=3)
    samples = synth_dataset(scripts, 4, 24, 24, 0.0, seed=9)
    batch = make_batch(samples, [0, 1], IdentityCodec())
    batch64 = TrainBatch(z0=batch.z0.double(), images=batch.images.double(),
                         captions=batch.captions, cond_pixels=batch.cond_pixels.double(),
                         layouts=batch.layouts)
    torch.manual_seed(0)
    probe = ProbeDenoiser()
    n_params = sum(p.numel() for p in probe.parameters())
    loss = total_loss_probe(probe, batch64, seed=21)
    loss.backward()
    worst = 0.0
    checked = 0
    for p in probe.parameters():
        flat = p.detach().flatten()
        gflat = p.grad.flatten()
        for k in range(p.numel()):
            h = 1e-6
            with torch.no_grad():
                orig = flat[k].item()
                p.flatten()[k] = orig + h
                up = float(total_loss_probe(probe, batch64, 21))
                p.flatten()[k] = orig - h
                dn = float(total_loss_probe(probe, batch64, 21))
                p.flatten()[k] = orig
            fd = (up - dn) / (2 * h)
            an = float(gflat[k])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            checked += 1
    grad_ok = worst < 1e-3 and n_params <= 200

    square = np.zeros((16, 16))
    square[4:12, 4:12] = 1.0
    import skimage.feature
    ref = skimage.feature.canny(square, sigma=1.0, low_threshold=0.1, high_threshold=0.3)
    mine = canny(square, EdgeParams(1.0, 0.1, 0.3)).astype(bool)
    canny_ok = np.array_equal(mine, ref)

    report(5, "total-loss gradients vs finite differences; reference Canny",
           grad_ok and canny_ok,
           f"worst rel err={worst:.2e} over {checked} params ({n_params} total); "
           f"canny bit-match={canny_ok}")


# ---------------------------------------------------------------------------
# 6. Zero-init invariance
# ---------------------------------------------------------------------------


def test_criterion_06_zero_init_invariance():
    torch.manual_seed(6)
    model = GlyphDenoiser(ModelConfig(widths=(16, 32, 64), d_text=32, d_time=32, d_cond=64))
    init_control_from_base(model)
    model.add_expert("S0")
    model.eval()
    ok = True
    with torch.no_grad():
        for i in range(100):
            g = torch.Generator().manual_seed(1000 + i)
            z = torch.randn(1, 3, 24, 24, generator=g)
            cond = torch.rand(1, 3, 24, 24, generator=g)
            t = int(torch.randint(1, 201, (1,), generator=g))
            c = model.text.encode_batch(["probe"])
            base = model.predict_eps(z, t, c, None)
            z_I = model.encode_condition(cond, experts_active=["S0"])
            guided = model.predict_eps(z, t, c, z_I)
            if not torch.equal(base, guided):
                ok = False
                break
    report(6, "fresh control branch and experts leave outputs bit-identical",
           ok, "100 random inputs")


# ---------------------------------------------------------------------------
# 7 + 8. Trained-preset directional criteria (cached run from conftest)
# ---------------------------------------------------------------------------


def _prompt_means(records, key):
    acc = {}
    for r in records:
        v = getattr(r, key)
        if not np.isnan(v):
            acc.setdefault(r.prompt, []).append(v)
    return {p: float(np.mean(v)) for p, v in acc.items()}


def paired_bootstrap_lower(records_a, records_b, key, n_boot=10_000, seed=0) -> tuple:
    """One-sided 95% bootstrap lower bound of the prompt-level mean difference
    (a minus b)."""
    ma = _prompt_means(records_a, key)
    mb = _prompt_means(records_b, key)
    common = sorted(set(ma) & set(mb))
    diffs = np.array([ma[p] - mb[p] for p in common])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diffs), size=(n_boot, len(diffs)))
    boots = diffs[idx].mean(axis=1)
    return float(np.quantile(boots, 0.05)), float(diffs.mean()), len(diffs)


def test_criterion_07_toy_ablation(trained_run):
    rep, cfg, _ = trained_run
    lo1, d1, n1 = paired_bootstrap_lower(rep.subset("ndcfg"), rep.subset("cfg"), "acc")
    lo2, d2, n2 = paired_bootstrap_lower(rep.subset("ldtsr"), rep.subset("ndcfg"), "edge_iou")
    lo3, d3, n3 = paired_bootstrap_lower(rep.subset("ld"), rep.subset("ldtsr", small=True), "acc")
    acc = {m: float(np.mean([r.acc for r in rep.subset(m)])) for m in
           ("cfg", "ndcfg", "ldtsr", "ld")}
    ok = lo1 > 0.0 and lo2 >= 0.0 and lo3 > 0.0
    report(7, "ablation direction: +ndcfg acc, +ldtsr edge-iou, +ld small-text acc",
           ok,
           f"acc(ndcfg-cfg)={d1:+.4f} (lo {lo1:+.4f}, n={n1}); "
           f"iou(ldtsr-ndcfg)={d2:+.4f} (lo {lo2:+.4f}, n={n2}); "
           f"small acc(ld-ldtsr)={d3:+.4f} (lo {lo3:+.4f}, n={n3}); "
           f"abs acc={acc}")


def test_criterion_08_long_tail_trend(trained_run):
    rep, cfg, _ = trained_run
    recs = rep.subset("ndcfg")
    a = [r for r in recs if r.script == "S0"]
    b = [r for r in recs if r.script == "S1"]
    # benchmark pairs scripts at identical fonts; compare prompt-level means
    ma = _prompt_means(a, "acc")
    mb = _prompt_means(b, "acc")
    va = np.array([ma[p] for p in sorted(ma)])
    vb = np.array([mb[p] for p in sorted(mb)])
    rng = np.random.default_rng(8)
    n_boot = 10_000
    boots = (va[rng.integers(0, len(va), size=(n_boot, len(va)))].mean(axis=1)
             - vb[rng.integers(0, len(vb), size=(n_boot, len(vb)))].mean(axis=1))
    lo = float(np.quantile(boots, 0.05))
    report(8, "frequent script outperforms rare script at equal fonts",
           lo > 0.0,
           f"acc(S0)={va.mean():.4f} acc(S1)={vb.mean():.4f} diff lo={lo:+.4f}")


# ---------------------------------------------------------------------------
# 9. Metric oracles
# ---------------------------------------------------------------------------


def test_criterion_09_metric_oracles():
    from tests.test_metrics import brute_lev
    alphabet = "abc"
    strings = [""]
    for l in range(1, 7):
        strings += ["".join(p) for p in itertools.product(alphabet, repeat=l)]
    t0 = time.time()
    ok = True
    for a in strings:
        memo = {}
        for b in strings:
            if levenshtein(a, b) != brute_lev(a, b, memo):
                ok = False
                break
        if not ok:
            break
    n_pairs = len(strings) ** 2
    ex_ok = (accuracy("abcd", "abce") == 0.75 and accuracy("", "ab") == 0.0
             and accuracy("x", "x") == 1.0
             and ned("hello", "hallo") == 0.8 and ned("", "ab") == 0.0
             and ned("same", "same") == 1.0)
    report(9, "edit distance equals brute-force recursion exhaustively",
           ok and ex_ok, f"{n_pairs} pairs in {time.time() - t0:.0f}s; examples pass: {ex_ok}")


# ---------------------------------------------------------------------------
# 10. Generation determinism
# ---------------------------------------------------------------------------


def test_criterion_10_generation_determinism(trained_run, tmp_path):
    _, cfg, root = trained_run
    model, ckpt = load_checkpoint(root / "train_final.pt")
    _, scripts, _ = load_dataset(root / "dataset")
    sched = default_schedule(cfg.schedule.T)
    codec = IdentityCodec()
    bsched = BlendSchedule(alpha1=cfg.render.alpha1, T=cfg.schedule.T)
    bench = build_bench(scripts, 2, cfg.data.h, cfg.data.w, seed=5,
                        small_fraction=1.0, upscale=2)
    p = bench[0]
    from glyphdiff.dataset import _to_png
    results = {}
    for mode in ("cfg", "ndcfg", "ldtsr", "ld"):
        digests = []
        for run in range(2):
            if mode == "ld":
                img = small_text_generate([p.caption], [p.cond_hi], model, cfg.guidance,
                                          bsched, sched, patch=cfg.data.h,
                                          stride=cfg.data.h // 2, steps=cfg.render.steps,
                                          seed=[42], base_hw=(cfg.data.h, cfg.data.w),
                                          codec=codec)
            elif mode == "ldtsr":
                img = two_stage_generate([p.caption], [p.cond], model, cfg.guidance,
                                         bsched, sched, cfg.render.steps, [42],
                                         (cfg.data.h, cfg.data.w), codec=codec)
            else:
                img = generate([p.caption], [p.cond], model, cfg.guidance, sched,
                               cfg.render.steps, [42], (cfg.data.h, cfg.data.w),
                               mode=mode, codec=codec)
            path = tmp_path / f"{mode}_{run}.png"
            _to_png(img[0].clamp(0, 1).numpy(), path)
            digests.append(path.read_bytes())
        results[mode] = digests[0] == digests[1]
    report(10, "fixed-seed PNGs byte-identical per mode", all(results.values()),
           str(results))
