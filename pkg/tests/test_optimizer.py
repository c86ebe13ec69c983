import math

import numpy as np
import pytest
import torch

from conftest import random_image
from facecloak.backends.base import TorchBackend
from facecloak.core import AnchorPair, BudgetMap, CloakMask, Embedding, ImagePlane
from facecloak.errors import CapabilityError, ConfigError, OptimizationError, PoolError, ShapeError
from facecloak.evaluation import psnr
from facecloak.optimizer import (
    AnchorPool,
    OptimizerConfig,
    apply_cloak,
    contrastive_loss,
    optimize_cloak,
    project,
    protect,
    select_anchors,
)
from facecloak.synthgen import VariantSet, generate_variants
from oracles import anchor_scan, clamp_oracle


def unit(v):
    v = np.asarray(v, float)
    return Embedding(v / np.linalg.norm(v))


class TestAnchors:
    def test_worked_example(self):
        pool = AnchorPool(["a", "a", "b", "c"], np.array([[1, 0], [0.8, 0.6], [0, 1], [-1, 0]], float))
        pair = select_anchors(unit([1, 0.1]), pool)
        assert pair.near_label == "a" and pair.far_label == "c"
        assert np.array_equal(pair.near.values, [1, 0])

    def test_far_skips_near_label(self):
        # the farthest entry shares the near label, so the far anchor falls back to "b"
        pool = AnchorPool(["a", "b", "a"], np.array([[1, 0], [0, 1], [-1, 0]], float))
        pair = select_anchors(unit([1, 0]), pool)
        assert pair.far_label == "b"

    def test_ties_take_lowest_index(self):
        pool = AnchorPool(["x", "y", "z"], np.array([[0, 1], [0, -1], [1, 0]], float))
        pair = select_anchors(unit([1, 0]), pool)
        assert pair.near_label == "z" and pair.far_label == "x"

    def test_pool_validation(self):
        with pytest.raises(PoolError):
            AnchorPool(["a", "a"], np.eye(2))
        with pytest.raises(PoolError):
            AnchorPool(["a"], np.eye(1))
        with pytest.raises(PoolError):
            AnchorPool(["a", "b"], np.array([[2.0, 0], [0, 1]]))

    def test_matches_scan_oracle(self):
        r = np.random.default_rng(0)
        for _ in range(200):
            n, d = int(r.integers(2, 12)), int(r.integers(2, 6))
            labels = [f"p{int(v)}" for v in r.integers(0, 3, n)]
            if len(set(labels)) < 2:
                labels[0], labels[1] = "p0", "p1"
            emb = r.normal(size=(n, d))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
            seed = unit(r.normal(size=d))
            pair = select_anchors(seed, AnchorPool(labels, emb))
            near, far = anchor_scan(seed.values, labels, emb)
            assert np.array_equal(pair.near.values, emb[near])
            assert np.array_equal(pair.far.values, emb[far])


class TestLoss:
    def test_at_near_anchor(self):
        pair = AnchorPair(unit([1, 0]), unit([-1, 0]), "a", "b")
        assert contrastive_loss([unit([1, 0])], pair) == pytest.approx(2.0)
        assert contrastive_loss([unit([-1, 0])], pair) == pytest.approx(-2.0)

    def test_mean_over_variants(self):
        pair = AnchorPair(unit([1, 0]), unit([0, 1]), "a", "b")
        got = contrastive_loss([unit([1, 0]), unit([0, 1])], pair)
        assert got == pytest.approx(0.0)
        assert contrastive_loss([unit([1, 0])], pair) == pytest.approx(math.sqrt(2))

    def test_empty(self):
        with pytest.raises(OptimizationError):
            contrastive_loss([], AnchorPair(unit([1, 0]), unit([0, 1]), "a", "b"))


class TestProject:
    def test_examples(self):
        b = BudgetMap(np.array([0.1, 0.1, 0.4], np.float32).reshape(1, 1, 3) * np.ones((2, 2, 1), np.float32),
                      0.1, 0.4)
        x = np.array([0.5, -0.05, -0.9], np.float32).reshape(1, 1, 3) * np.ones((2, 2, 1), np.float32)
        out = project(x, b)
        assert np.allclose(out[0, 0], [0.1, -0.05, -0.4])

    def test_matches_clamp_oracle(self, rng):
        for _ in range(20):
            vals = np.where(rng.random((4, 5, 3)) < 0.3, np.float32(32 / 255), np.float32(8 / 255))
            b = BudgetMap(vals, 8 / 255, 32 / 255)
            x = rng.normal(0, 0.2, (4, 5, 3)).astype(np.float32)
            assert np.array_equal(project(x, b), clamp_oracle(x, b.values))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            project(np.zeros((4, 4, 3)), BudgetMap.uniform((4, 5, 3), 0.1))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"n_variants": 0}, {"step": 0},
                                    {"eps": 0.2, "eps_A": 0.1}, {"eps_A": 0.6}, {"step": 16 / 255}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            OptimizerConfig(**kw)

    def test_fraction_strings(self):
        cfg = OptimizerConfig(eps="8/255", eps_A="32/255", step="2/255")
        assert cfg.eps == pytest.approx(8 / 255) and cfg.step == pytest.approx(2 / 255)
        with pytest.raises(ConfigError):
            OptimizerConfig(eps="8/0")

    def test_digest_tracks_fields(self):
        assert OptimizerConfig().digest() == OptimizerConfig().digest()
        assert OptimizerConfig().digest() != OptimizerConfig(iterations=11).digest()


class LinearBackend(TorchBackend):
    def __init__(self, weight: np.ndarray, hw):
        module = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(weight.shape[1], weight.shape[0], bias=False))
        with torch.no_grad():
            module[1].weight.copy_(torch.tensor(weight))
        super().__init__(module, "linear-test", hw, weight.shape[0], dtype=torch.float64)


def linear_loss_gradient(W, xs, near, far):
    """Analytic d(loss)/d(delta) for e = Wx/|Wx|, summed over the shared delta."""
    g = np.zeros(W.shape[1])
    for x in xs:
        f = W @ x
        nf = np.linalg.norm(f)
        e = f / nf
        de = (e - far) / np.linalg.norm(e - far) - (e - near) / np.linalg.norm(e - near)
        g += W.T @ ((de - e * (e @ de)) / nf)
    return g / len(xs)


class TestLoop:
    def test_first_step_matches_analytic_sign_gradient(self, rng):
        h = w = 16
        W = rng.normal(size=(6, 3 * h * w)) / 10
        backend = LinearBackend(W, (h, w))
        seed = ImagePlane(rng.uniform(0.2, 0.8, (h, w, 3)))
        variants = VariantSet(seed, [seed, ImagePlane(rng.uniform(0.2, 0.8, (h, w, 3)))], "test", 0)
        pair = AnchorPair(unit(rng.normal(size=6)), unit(rng.normal(size=6)), "a", "b")
        cfg = OptimizerConfig(eps=4 / 255, eps_A=4 / 255, step=4 / 255, iterations=1,
                              use_sticker=False, use_highpass=False, use_attention=False)
        cloak = optimize_cloak(variants, pair, backend, cfg)
        # the module sees N x 3 x H x W, so flatten each variant channel-first
        xs = [v.data.transpose(2, 0, 1).ravel() for v in variants.variants]
        g = linear_loss_gradient(W, xs, pair.near.values, pair.far.values)
        expected = -np.float32(4 / 255) * np.sign(g).reshape(3, h, w).transpose(1, 2, 0)
        assert np.array_equal(cloak.delta, expected.astype(np.float32))
        assert np.all(cloak.attention == 1.0)

    def test_zero_budget_gives_zero_cloak(self, small_backend, rng):
        seed = random_image(rng)
        variants = generate_variants(seed, 2)
        pair = AnchorPair(unit(rng.normal(size=64)), unit(rng.normal(size=64)), "a", "b")
        cfg = OptimizerConfig(eps=0.0, eps_A=0.0, step=1 / 255, iterations=3)
        cloak = optimize_cloak(variants, pair, small_backend, cfg)
        assert not cloak.delta.any()
        assert apply_cloak(seed, cloak) == seed

    def test_delta_within_budget_and_deterministic(self, small_backend, rng):
        seed = random_image(rng)
        variants = generate_variants(seed, 3)
        pair = AnchorPair(unit(rng.normal(size=64)), unit(rng.normal(size=64)), "a", "b")
        cfg = OptimizerConfig(iterations=4)
        a = optimize_cloak(variants, pair, small_backend, cfg)
        b = optimize_cloak(variants, pair, small_backend, cfg)
        assert a == b
        assert np.all(np.abs(a.delta) <= a.budget.values)
        assert a.seed_identity_hash == seed.identity_hash()
        assert a.config_digest == cfg.digest()

    def test_needs_gradients(self, rng):
        class Opaque:
            backend_id = "opaque"

        with pytest.raises(CapabilityError):
            optimize_cloak(generate_variants(random_image(rng), 1), None, Opaque(), OptimizerConfig())

    def test_shape_mismatch(self, small_backend, rng):
        variants = generate_variants(random_image(rng, 20, 20), 1)
        pair = AnchorPair(unit([1] * 64), unit([-1] + [1] * 63), "a", "b")
        with pytest.raises(ShapeError):
            optimize_cloak(variants, pair, small_backend, OptimizerConfig())


def test_apply_clamps_to_unit_range():
    shape = (16, 16, 3)
    budget = BudgetMap.uniform(shape, 0.1)
    cloak = CloakMask(np.full(shape, 0.1, np.float32), np.ones(shape, np.float32), budget, "b", "", "")
    out = apply_cloak(ImagePlane(np.full(shape, 0.95)), cloak)
    assert np.all(out.data == 1.0)


def test_psnr_lower_bound_from_boosted_budget(rng):
    eps_a = 32 / 255
    for _ in range(20):
        vals = np.where(rng.random((16, 16, 3)) < 0.5, np.float32(eps_a), np.float32(8 / 255))
        budget = BudgetMap(vals, 8 / 255, eps_a)
        delta = np.sign(rng.normal(size=vals.shape)).astype(np.float32) * vals
        cloak = CloakMask(delta, np.ones_like(vals), budget, "b", "", "")
        img = random_image(rng)
        assert psnr(img, apply_cloak(img, cloak)) >= 20 * math.log10(1 / eps_a) - 1e-9


def test_protect_pipeline(small_backend, rng):
    pool_imgs = rng.random((6, 16, 16, 3))
    pool = AnchorPool([f"d{i // 2}" for i in range(6)], small_backend.embed_batch(pool_imgs))
    seed = random_image(rng)
    cfg = OptimizerConfig(iterations=2, n_variants=2)
    cloak = protect(seed, small_backend, pool, cfg)
    assert cloak.shape == seed.shape and cloak.backend_id == small_backend.backend_id


def test_default_cloaks_lower_loss_on_rig(rig, default_cloaks):
    """Cloaked variants move toward the far anchor for nearly every user."""
    cfg, cloaks = default_cloaks
    improved = 0
    for user in rig.users:
        seed = rig.split.seed_sample(user).load()
        variants = generate_variants(seed, cfg.n_variants, rng_seed=cfg.rng_seed)
        pair = select_anchors(rig.backend.embed(seed), rig.pool)
        clean = [Embedding.normalized(e) for e in rig.backend.embed_batch(variants.stack())]
        cloaked_imgs = np.clip(variants.stack() + cloaks[user].delta[None], 0, 1)
        cloaked = [Embedding.normalized(e) for e in rig.backend.embed_batch(cloaked_imgs)]
        improved += contrastive_loss(cloaked, pair) < contrastive_loss(clean, pair)
    assert improved >= 0.9 * len(rig.users)
