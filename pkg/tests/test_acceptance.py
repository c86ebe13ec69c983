"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The seeded desk rig (40 identities x 10 images, 64 px, toy backend) is built
once per session in conftest.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import record_criterion
from facecloak.backends.toy import random_toy_backend
from facecloak.core import AnchorPair, Embedding, ImagePlane, load_cloak, save_cloak
from facecloak.evaluation import TransformSpec, perceptual_summary, robustness_sweep, top_n_psr
from facecloak.focusing import LandmarkSet, StickerSpec, build_sticker_mask, combine_budget, high_pass
from facecloak.optimizer import AnchorPool, OptimizerConfig, optimize_cloak, project, select_anchors
from facecloak.synthgen import generate_variants
from oracles import anchor_scan, clamp_oracle, high_pass_oracle, rasterize_boxes

BASE_EPS = 8 / 255


def top1(rig, cloaks):
    return top_n_psr(rig.split, cloaks, rig.backend, 1, cache=rig.evaluator.cache)


def test_criterion_1_full_scale_not_reproduced():
    # Full-scale benchmark numbers need external datasets, pretrained surrogates and a
    # diffusion generator.  The criterion itself states the substitution;
    # criteria 2-10 are the substituted property suite.
    record_criterion(1, True, "full-scale benchmark numbers not attempted by design; substituted by criteria 2-10")


def test_criterion_2_budget_invariant():
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    shapes = [(16, 16), (16, 24), (20, 20), (24, 16)]
    backends = {s: random_toy_backend(s, seed=i) for i, s in enumerate(shapes)}
    violations = outside = 0
    runs = 1000
    for k in range(runs):
        h, w = shapes[k % len(shapes)]
        shape = (h, w, 3)
        eps = float(r.choice([0, 1, 2, 4, 8])) / 255
        eps_a = max(eps, float(r.choice([8, 16, 32])) / 255)
        step = min(eps, float(r.choice([1, 2])) / 255) or 1 / 255
        cfg = OptimizerConfig(eps=eps, eps_A=eps_a, step=step, iterations=int(r.integers(1, 4)),
                              n_variants=1, use_attention=bool(r.integers(0, 2)), rng_seed=k)
        focus = r.random(shape) < r.uniform(0, 0.5)
        budget = combine_budget(focus, None, eps, eps_a)
        seed = ImagePlane(r.random(shape))
        variants = generate_variants(seed, 1, rng_seed=k)
        d = 64
        pair = AnchorPair(Embedding.normalized(r.normal(size=d)), Embedding.normalized(r.normal(size=d)), "a", "b")
        cloak = optimize_cloak(variants, pair, backends[(h, w)], cfg, budget=budget)
        violations += int(np.sum(np.abs(cloak.delta) > budget.values))
        outside += int(np.sum(np.abs(cloak.delta[~focus]) > np.float32(eps)))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and outside == 0 and elapsed < 120
    record_criterion(2, ok, f"{runs} runs, {violations} budget violations, {outside} out-of-focus "
                            f"excursions above eps, {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_3_gradient_fidelity(rig):
    t0 = time.perf_counter()
    backend = rig.backend.as_float64()
    r = np.random.default_rng(3)
    h = 1e-4
    worst = 0.0
    for i in range(10):
        img = r.uniform(0.05, 0.95, backend.descriptor.input_shape)
        u = r.normal(size=backend.descriptor.embedding_dim)
        u /= np.linalg.norm(u)
        ut = torch.tensor(u)
        g = backend.input_gradient(ImagePlane(img), lambda e: e @ ut)
        f = lambda x: backend.embed_batch(x[None])[0] @ u
        for _ in range(100):
            idx = tuple(int(r.integers(0, s)) for s in img.shape)
            plus, minus = img.copy(), img.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / max(abs(fd), abs(g[idx]), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 60
    record_criterion(3, ok, f"worst relative error {worst:.2e} (< 1e-3) over 1000 coordinates, {elapsed:.1f}s")
    assert ok


def test_criterion_4_oracle_equivalence():
    t0 = time.perf_counter()
    r = np.random.default_rng(4)
    failures = []

    for k in range(1000):
        n, d = int(r.integers(2, 16)), int(r.integers(2, 8))
        labels = [f"p{int(v)}" for v in r.integers(0, 4, n)]
        if len(set(labels)) < 2:
            labels[0], labels[1] = "p0", "p1"
        emb = r.normal(size=(n, d))
        if k % 10 == 0:
            emb[1] = emb[0]  # exact ties exercise the lowest-index rule
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        seed = Embedding.normalized(r.normal(size=d))
        pair = select_anchors(seed, AnchorPool(labels, emb))
        near, far = anchor_scan(seed.values, labels, emb)
        if not (np.array_equal(pair.near.values, emb[near]) and np.array_equal(pair.far.values, emb[far])):
            failures.append(f"anchors #{k}")

    from facecloak.core import BudgetMap

    for k in range(50):
        vals = np.where(r.random((8, 9, 3)) < 0.3, np.float32(32 / 255), np.float32(BASE_EPS))
        x = r.normal(0, 0.2, vals.shape).astype(np.float32)
        if not np.array_equal(project(x, BudgetMap(vals, BASE_EPS, 32 / 255)), clamp_oracle(x, vals)):
            failures.append(f"project #{k}")

    hp_err = 0.0
    for k in range(5):
        arr = r.random((int(r.integers(16, 22)), int(r.integers(16, 22)), 3))
        hp_err = max(hp_err, float(np.max(np.abs(high_pass(ImagePlane(arr)) - high_pass_oracle(arr)))))
    if hp_err >= 1e-6:
        failures.append(f"high_pass error {hp_err:.2e}")

    for k in range(1000):
        h, w = int(r.integers(16, 40)), int(r.integers(16, 40))
        xs = sorted(r.choice(w, 2, replace=False))
        pts = [(int(xs[0]), int(r.integers(h))), (int(xs[1]), int(r.integers(h))),
               (int(r.integers(w)), int(r.integers(h))), (int(r.integers(w)), int(r.integers(h)))]
        sizes = [tuple(float(v) for v in r.uniform(0.01, 0.6, 2)) for _ in range(3)]
        mask = build_sticker_mask(LandmarkSet(*pts), StickerSpec(*sizes), (h, w, 3))
        ref = rasterize_boxes(pts, [sizes[0], sizes[0], sizes[1], sizes[2]], h, w)
        if not np.array_equal(mask[:, :, 0], ref):
            failures.append(f"sticker #{k}")

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 180
    record_criterion(4, ok, f"1000 anchor pools, 50 clamp cases, 5 high-pass images (max err {hp_err:.1e}), "
                            f"1000 sticker draws; {len(failures)} mismatches, {elapsed:.1f}s")
    assert ok, failures[:5]


def test_criterion_5_desk_scale_protection(rig, default_cloaks, default_report, zero_report):
    t0 = time.perf_counter()
    acc = rig.holdout_top1
    cfg, _ = default_cloaks
    ok = (acc >= 0.90 and default_report.top1_psr >= 60 and zero_report.top1_psr <= 10
          and cfg.n_variants == 8 and cfg.iterations == 10)
    record_criterion(5, ok, f"held-out top-1 {acc:.3f} (>= 0.90); cloaked Top-1 PSR {default_report.top1_psr:.1f}% "
                            f"(>= 60) vs zero-cloak {zero_report.top1_psr:.1f}% (<= 10)")
    assert ok


def test_criterion_6_ablation_trends(rig, default_cloaks, default_report):
    cfg, _ = default_cloaks
    default = default_report.top1_psr
    eps_psr = {}
    for k in (2, 4, 16):
        c = OptimizerConfig(eps=f"{k}/255", step=f"{min(k, 2)}/255")
        eps_psr[k] = top1(rig, rig.generate_cloaks(c))
    eps_psr[8] = default
    series = [eps_psr[k] for k in (2, 4, 8, 16)]
    eps_ok = all(b >= a - 2 for a, b in zip(series, series[1:]))
    it2 = top1(rig, rig.generate_cloaks(OptimizerConfig(iterations=2)))
    n2 = top1(rig, rig.generate_cloaks(OptimizerConfig(n_variants=2)))
    ok = eps_ok and default > it2 and default >= n2 - 2
    record_criterion(6, ok, f"eps 2/4/8/16 -> {series}; iterations 2 -> {it2:.1f} vs 10 -> {default:.1f}; "
                            f"n=2 -> {n2:.1f} vs n=8 -> {default:.1f} (tolerance 2)")
    assert ok


def test_criterion_7_component_direction(rig, default_report):
    base = top1(rig, rig.generate_cloaks(OptimizerConfig(use_sticker=False, use_highpass=False,
                                                         use_attention=False)))
    r_only = top1(rig, rig.generate_cloaks(OptimizerConfig(use_highpass=False, use_attention=False)))
    full = default_report.top1_psr
    ok = r_only > base and full >= r_only - 1
    record_criterion(7, ok, f"baseline {base:.1f}, +stickers {r_only:.1f}, all three {full:.1f}")
    assert ok


def test_criterion_8_perceptual_floor(rig, default_cloaks):
    _, cloaks = default_cloaks
    ssim_mean, _, ssims, psnrs = perceptual_summary(rig.split, cloaks, rig.backend.descriptor.input_shape)
    bound = 20 * math.log10(255 / 32)
    worst_psnr = min(psnrs)
    ok = worst_psnr >= 17.9 and bound >= 17.9 and ssim_mean >= 0.75
    record_criterion(8, ok, f"min PSNR {worst_psnr:.2f} dB over {len(psnrs)} images (>= 17.9, bound {bound:.2f}); "
                            f"mean SSIM {ssim_mean:.4f} (>= 0.75, min {min(ssims):.4f})")
    assert ok


def test_criterion_9_robustness(rig, default_cloaks, default_report, zero_report):
    _, cloaks = default_cloaks
    clean = default_report.top1_psr
    identity = [TransformSpec("gaussian_noise", 0.0), TransformSpec("gaussian_blur", 0.0),
                TransformSpec("brightness", 0.0), TransformSpec("contrast", 1.0)]
    harsh = [TransformSpec("jpeg", 30), TransformSpec("gaussian_blur", 2.0)]
    rows = robustness_sweep(rig.split, cloaks, rig.backend, identity + harsh, cache=rig.evaluator.cache)
    ident_ok = all(row["psr"] == clean for row in rows[:4])
    harsh_rows = rows[4:]
    harsh_ok = all(clean - row["psr"] <= 40 and row["psr"] > zero_report.top1_psr for row in harsh_rows)
    ok = ident_ok and harsh_ok
    detail = ", ".join(f"{row['transform']}:{row['strength']:g} -> {row['psr']:.1f}" for row in harsh_rows)
    record_criterion(9, ok, f"identity transforms unchanged at {clean:.1f}: {ident_ok}; {detail} "
                            f"(max drop 40, zero-cloak {zero_report.top1_psr:.1f})")
    assert ok


def test_criterion_10_round_trip_and_determinism(rig, default_cloaks, tmp_path):
    cfg, cloaks = default_cloaks
    exact = True
    for label, c in cloaks.items():
        p = tmp_path / f"{label}.fclk"
        save_cloak(c, p)
        back = load_cloak(p)
        exact &= back == c and back.delta.tobytes() == c.delta.tobytes() \
            and back.attention.tobytes() == c.attention.tobytes()
    rerun = rig.generate_cloaks(OptimizerConfig())
    identical = True
    for label, c in rerun.items():
        save_cloak(c, tmp_path / f"{label}.rerun.fclk")
        identical &= (tmp_path / f"{label}.rerun.fclk").read_bytes() == (tmp_path / f"{label}.fclk").read_bytes()
    ok = exact and identical and OptimizerConfig().digest() == cfg.digest()
    record_criterion(10, ok, f"{len(cloaks)} cloaks bit-exact after save/load: {exact}; "
                             f"rerun byte-identical: {identical}")
    assert ok
