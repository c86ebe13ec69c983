"""Anchor selection, contrastive loss and the projected sign-gradient loop.

One cloak is learned per identity over its variant set.  Each iteration:

1. perturbed variants ``S_i + project(delta * alpha, budget)``, clamped to [0, 1]
2. loss = mean_i(|e_i - e_far| - |e_i - e_near|)
3. ``delta <- delta - step * sign(dL/ddelta)``
4. if attention is on, ``alpha <- update_attention(alpha, dL/dalpha)``

Clamped elements (projection or [0, 1]) pass no gradient.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch

from .backends.base import Backend, TorchBackend
from .core import AnchorPair, BudgetMap, CloakMask, Embedding, ImagePlane, check_label, config_digest
from .errors import CapabilityError, ConfigError, OptimizationError, PoolError, ShapeError
from .focusing import (
    AttentionConfig,
    HighPassConfig,
    LandmarkAdapter,
    StickerSpec,
    build_highpass_mask,
    build_sticker_mask,
    combine_budget,
    detect_landmarks,
    init_attention,
    update_attention,
)
from .synthgen import VariantSet

log = logging.getLogger(__name__)


@dataclass
class AnchorPool:
    labels: list[str]
    embeddings: np.ndarray  # N x d, unit rows
    source: str = ""

    def __post_init__(self):
        self.labels = [check_label(l) for l in self.labels]
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.labels) < 2 or len(set(self.labels)) < 2:
            raise PoolError("anchor pool needs >= 2 entries with >= 2 distinct labels")
        if self.embeddings.shape[0] != len(self.labels):
            raise PoolError("labels and embeddings disagree in length")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise PoolError("pool embeddings must be unit norm")

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, Embedding]], source: str = "") -> "AnchorPool":
        if len(entries) < 2:
            raise PoolError("anchor pool needs >= 2 entries")
        return cls([l for l, _ in entries], np.stack([e.values for _, e in entries]), source)

    def __len__(self):
        return len(self.labels)


def select_anchors(seed_embedding: Embedding, pool: AnchorPool) -> AnchorPair:
    """Nearest pool entry is the near anchor; farthest entry of another identity is the far one.

    Ties go to the lowest index.
    """
    d = np.linalg.norm(pool.embeddings - seed_embedding.values[None, :], axis=1)
    near = int(np.argmin(d))
    other = np.array([l != pool.labels[near] for l in pool.labels])
    far = int(np.argmax(np.where(other, d, -np.inf)))
    return AnchorPair(
        near=Embedding(pool.embeddings[near]),
        far=Embedding(pool.embeddings[far]),
        near_label=pool.labels[near],
        far_label=pool.labels[far],
    )


def contrastive_loss(perturbed_embeddings: Sequence[Embedding], anchors: AnchorPair) -> float:
    if not perturbed_embeddings:
        raise OptimizationError("contrastive loss needs at least one embedding")
    e = np.stack([p.values for p in perturbed_embeddings])
    to_far = np.linalg.norm(e - anchors.far.values, axis=1)
    to_near = np.linalg.norm(e - anchors.near.values, axis=1)
    return float(np.mean(to_far - to_near))


def _torch_loss(e: torch.Tensor, near: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    return (torch.linalg.vector_norm(e - far, dim=1) - torch.linalg.vector_norm(e - near, dim=1)).mean()


def project(delta_weighted: np.ndarray, budget: BudgetMap) -> np.ndarray:
    delta_weighted = np.asarray(delta_weighted)
    if delta_weighted.shape != budget.shape:
        raise ShapeError(f"perturbation {delta_weighted.shape} vs budget {budget.shape}")
    b = budget.values.astype(delta_weighted.dtype) if delta_weighted.dtype.kind == "f" else budget.values
    return np.clip(delta_weighted, -b, b)


def clip_image(arr: np.ndarray) -> ImagePlane:
    return ImagePlane(np.clip(arr, 0.0, 1.0))


def parse_fraction(value) -> float:
    """Accept 0.0313..., '8/255' or Fraction(8, 255)."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse {value!r} as a number") from exc
    return float(value)


@dataclass
class OptimizerConfig:
    eps: float = 8 / 255
    eps_A: float = 32 / 255
    step: float = 2 / 255
    iterations: int = 10
    n_variants: int = 8
    use_sticker: bool = True
    use_highpass: bool = True
    use_attention: bool = True
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    highpass: HighPassConfig = field(default_factory=HighPassConfig)
    sticker: StickerSpec = field(default_factory=StickerSpec)
    rng_seed: int = 0

    def __post_init__(self):
        self.eps, self.eps_A, self.step = (parse_fraction(v) for v in (self.eps, self.eps_A, self.step))
        if not self.step > 0:
            raise ConfigError("step must be positive")
        if not 0.0 <= self.eps <= self.eps_A <= 0.5:
            raise ConfigError(f"need 0 <= eps <= eps_A <= 0.5, got eps={self.eps}, eps_A={self.eps_A}")
        if self.eps > 0 and self.step > self.eps:
            raise ConfigError(f"step {self.step} exceeds eps {self.eps}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.n_variants < 1:
            raise ConfigError("n_variants must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def build_budget(seed: ImagePlane, cfg: OptimizerConfig, landmark_adapter: LandmarkAdapter | None = None) -> BudgetMap:
    """Budget map for one identity; both masks come from the seed image."""
    sticker = None
    if cfg.use_sticker:
        sticker = build_sticker_mask(detect_landmarks(seed, landmark_adapter), cfg.sticker, seed.shape)
    highpass = build_highpass_mask(seed, cfg.highpass) if cfg.use_highpass else None
    return combine_budget(sticker, highpass, cfg.eps, cfg.eps_A, shape=seed.shape)


def optimize_cloak(variants: VariantSet, anchors: AnchorPair, backend: Backend, cfg: OptimizerConfig,
                   landmark_adapter: LandmarkAdapter | None = None, budget: BudgetMap | None = None,
                   config_id: str | None = None) -> CloakMask:
    if not isinstance(backend, TorchBackend) or not backend.descriptor.differentiable:
        raise CapabilityError(f"backend {backend.backend_id} cannot serve as a surrogate (no gradients)")
    backend.check_shape(variants.seed.shape)
    if budget is None:
        budget = build_budget(variants.seed, cfg, landmark_adapter)
    if budget.shape != variants.seed.shape:
        raise ShapeError(f"budget {budget.shape} vs image {variants.seed.shape}")

    dtype = backend.dtype
    shape = variants.seed.shape
    s = torch.as_tensor(variants.stack(), dtype=dtype)
    b = torch.tensor(budget.values, dtype=dtype)
    near = torch.tensor(anchors.near.values, dtype=dtype)
    far = torch.tensor(anchors.far.values, dtype=dtype)

    delta = np.zeros(shape, dtype=np.float32)
    if cfg.use_attention:
        alpha = init_attention(shape, cfg.attention, cfg.rng_seed)
    else:
        alpha = np.ones(shape, dtype=np.float32)

    for t in range(1, cfg.iterations + 1):
        d = torch.tensor(delta, dtype=dtype, requires_grad=True)
        a = torch.tensor(alpha, dtype=dtype, requires_grad=True)
        with torch.enable_grad():
            w = d * a
            p = torch.where(w.abs() <= b, w, torch.clamp(w, -b, b).detach())
            x = s + p
            x = torch.where((x >= 0) & (x <= 1), x, x.clamp(0, 1).detach())
            loss = _torch_loss(backend.forward(x), near, far)
            if not torch.isfinite(loss):
                raise OptimizationError("loss is not finite", iteration=t)
            g_delta, g_alpha = torch.autograd.grad(loss, [d, a])
        g_delta, g_alpha = g_delta.numpy(), g_alpha.numpy()
        if not (np.all(np.isfinite(g_delta)) and np.all(np.isfinite(g_alpha))):
            raise OptimizationError("gradient is not finite", iteration=t)
        log.info("iteration=%d loss=%.6f max_delta=%.6f", t, float(loss.detach()), float(p.detach().abs().max()))
        delta = (delta - np.float32(cfg.step) * np.sign(g_delta)).astype(np.float32)
        if cfg.use_attention:
            alpha = update_attention(alpha, g_alpha, cfg.attention)

    final = project(delta * alpha, budget)
    return CloakMask(
        delta=final,
        attention=alpha,
        budget=budget,
        backend_id=backend.backend_id,
        seed_identity_hash=variants.seed.identity_hash(),
        config_digest=config_id if config_id is not None else cfg.digest(),
    )


def apply_cloak(image: ImagePlane, cloak: CloakMask) -> ImagePlane:
    if image.shape != cloak.shape:
        raise ShapeError(f"image {image.shape} vs cloak {cloak.shape}")
    return ImagePlane(np.clip(image.data + cloak.delta, 0.0, 1.0))


def protect(seed: ImagePlane, backend: Backend, pool: AnchorPool, cfg: OptimizerConfig,
            generator=None, landmark_adapter: LandmarkAdapter | None = None,
            config_id: str | None = None) -> CloakMask:
    """Full pipeline for one identity: variants, anchors, then the optimisation loop."""
    from .synthgen import generate_variants

    variants = generate_variants(seed, cfg.n_variants, generator, rng_seed=cfg.rng_seed)
    anchors = select_anchors(backend.embed(seed), pool)
    log.info("anchors: near=%s far=%s", anchors.near_label, anchors.far_label)
    return optimize_cloak(variants, anchors, backend, cfg, landmark_adapter, config_id=config_id)
