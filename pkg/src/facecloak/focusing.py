"""Perturbation focusing: region stickers, high-pass masks, learnable attention.

Stickers and the high-pass mask decide where the boosted budget applies.
Attention is a per-element multiplier on the perturbation that the optimizer
learns from the same loss.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .core import BudgetMap, ImagePlane
from .errors import ConfigError, DetectionError, NumericError, ShapeError

log = logging.getLogger(__name__)

Point = tuple[int, int]


@dataclass(frozen=True)
class LandmarkSet:
    left_eye: Point
    right_eye: Point
    nose: Point
    mouth: Point

    def points(self) -> list[Point]:
        return [self.left_eye, self.right_eye, self.nose, self.mouth]

    def validate(self, height: int, width: int) -> "LandmarkSet":
        for x, y in self.points():
            if not (0 <= x < width and 0 <= y < height):
                raise DetectionError(f"landmark ({x}, {y}) outside {width}x{height} image")
        if not self.left_eye[0] < self.right_eye[0]:
            raise DetectionError("left eye must lie left of the right eye")
        return self


class LandmarkAdapter(Protocol):
    def locate(self, image: ImagePlane) -> dict | None:
        """Return {left_eye, right_eye, nose, mouth: [x, y]} or None when no face is found."""


CANONICAL_FRACTIONS = {
    "left_eye": (0.30, 0.40),
    "right_eye": (0.70, 0.40),
    "nose": (0.50, 0.58),
    "mouth": (0.50, 0.78),
}


class CanonicalLandmarks:
    """Fixed landmark positions for aligned crops; no model involved."""

    def locate(self, image: ImagePlane) -> dict:
        h, w = image.height, image.width
        # round half up: 0.30 * 112 = 33.6 -> 34
        return {k: [math.floor(fx * w + 0.5), math.floor(fy * h + 0.5)]
                for k, (fx, fy) in CANONICAL_FRACTIONS.items()}


class HttpLandmarkAdapter:
    """Client for an external detector speaking the PNG-in / JSON-out protocol."""

    def __init__(self, endpoint: str, timeout: float = 10.0, transport=None):
        import httpx

        self.endpoint = endpoint
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def locate(self, image: ImagePlane) -> dict | None:
        import httpx
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(image.to_uint8()).save(buf, format="PNG")
        try:
            resp = self._client.post(self.endpoint, content=buf.getvalue(),
                                     headers={"Content-Type": "image/png"})
            resp.raise_for_status()
            body = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise DetectionError(f"landmark service failed: {exc}") from exc
        if body.get("face") is False:
            return None
        return body


def detect_landmarks(image: ImagePlane, adapter: LandmarkAdapter | None = None) -> LandmarkSet:
    adapter = adapter or CanonicalLandmarks()
    found = adapter.locate(image)
    if not found:
        raise DetectionError("no face detected")
    try:
        pts = {k: (int(round(found[k][0])), int(round(found[k][1]))) for k in CANONICAL_FRACTIONS}
    except (KeyError, TypeError, IndexError) as exc:
        raise DetectionError(f"malformed landmark payload: {found!r}") from exc
    return LandmarkSet(**pts).validate(image.height, image.width)


# -- region stickers -------------------------------------------------------------


@dataclass(frozen=True)
class StickerSpec:
    """Box size per landmark as (width, height) fractions of the image."""

    eye: tuple[float, float] = (0.16, 0.10)
    nose: tuple[float, float] = (0.18, 0.22)
    mouth: tuple[float, float] = (0.30, 0.12)

    def __post_init__(self):
        for name in ("eye", "nose", "mouth"):
            for f in getattr(self, name):
                if not 0.0 < f <= 0.6:
                    raise ConfigError(f"sticker fraction for {name} must lie in (0, 0.6], got {f}")

    def boxes(self, landmarks: LandmarkSet, height: int, width: int) -> list[tuple[int, int, int, int]]:
        """Clipped boxes as (x0, y0, x1, y1), half-open."""
        sizes = [self.eye, self.eye, self.nose, self.mouth]
        out = []
        for (cx, cy), (fw, fh) in zip(landmarks.points(), sizes):
            bw = max(1, round(fw * width))
            bh = max(1, round(fh * height))
            x0, y0 = cx - bw // 2, cy - bh // 2
            out.append((max(0, x0), max(0, y0), min(width, x0 + bw), min(height, y0 + bh)))
        return out


def build_sticker_mask(landmarks: LandmarkSet, spec: StickerSpec, shape) -> np.ndarray:
    h, w = shape[0], shape[1]
    c = shape[2] if len(shape) > 2 else 3
    landmarks.validate(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in spec.boxes(landmarks, h, w):
        mask[y0:y1, x0:x1] = True
    return np.repeat(mask[:, :, None], c, axis=2)


# -- high-pass mask ----------------------------------------------------------------


@dataclass(frozen=True)
class HighPassConfig:
    sigma: float = 2.0
    mu: float = 1.0
    radius: int = 6

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("high-pass sigma must be positive")
        if self.radius < math.ceil(3 * self.sigma):
            raise ConfigError(f"kernel radius {self.radius} < ceil(3 * sigma)")
        if not math.isfinite(self.mu):
            raise ConfigError("high-pass threshold mu must be finite")

    def kernel(self) -> np.ndarray:
        x = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        k = np.exp(-0.5 * (x / self.sigma) ** 2)
        return k / k.sum()


def high_pass(image: ImagePlane, cfg: HighPassConfig = HighPassConfig()) -> np.ndarray:
    """Per-channel residual of a Gaussian blur, standardised to mean 0 / std 1.

    Channels whose residual std falls below 1e-8 come back as exact zeros.
    """
    img = image.data
    k = cfg.kernel()
    out = np.zeros_like(img)
    for c in range(img.shape[2]):
        blurred = ndimage.correlate1d(img[:, :, c], k, axis=0, mode="reflect")
        blurred = ndimage.correlate1d(blurred, k, axis=1, mode="reflect")
        res = img[:, :, c] - blurred
        std = res.std()
        if std < 1e-8:
            continue
        out[:, :, c] = (res - res.mean()) / std
    return out


def build_highpass_mask(image: ImagePlane, cfg: HighPassConfig = HighPassConfig()) -> np.ndarray:
    return high_pass(image, cfg) > cfg.mu


def combine_budget(sticker: np.ndarray | None, highpass: np.ndarray | None,
                   eps: float, eps_A: float, shape=None) -> BudgetMap:
    """Boosted budget on the union of the enabled masks, base budget elsewhere."""
    masks = [m for m in (sticker, highpass) if m is not None]
    if shape is None:
        if not masks:
            raise ShapeError("shape is required when both masks are disabled")
        shape = masks[0].shape
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != tuple(shape):
            raise ShapeError(f"mask shape {m.shape} != {tuple(shape)}")
        union |= m.astype(bool)
    if eps > eps_A:
        raise ConfigError(f"eps {eps} exceeds eps_A {eps_A}")
    values = np.where(union, np.float32(eps_A), np.float32(eps)).astype(np.float32)
    return BudgetMap(values, eps, eps_A)


# -- learnable attention -------------------------------------------------------------


@dataclass(frozen=True)
class AttentionConfig:
    z_alpha: float = 0.05
    init_low: float = 0.9
    init_high: float = 1.1
    clamp_low: float = 0.0
    clamp_high: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.init_low <= self.init_high:
            raise ConfigError("attention init bounds need 0 <= low <= high")
        if not (self.clamp_low <= self.init_low and self.init_high <= self.clamp_high):
            raise ConfigError("attention clamp bounds must contain the init bounds")
        if not (0.0 <= self.clamp_low and self.clamp_high <= 2.0):
            raise ConfigError("attention clamp bounds must lie in [0, 2]")
        if self.z_alpha < 0:
            raise ConfigError("z_alpha must be non-negative")


def init_attention(shape, cfg: AttentionConfig = AttentionConfig(), rng_seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(cfg.init_low, cfg.init_high, size=tuple(shape)).astype(np.float32)


def normalize_gradient(g: np.ndarray) -> np.ndarray:
    """L-infinity normalisation with a 1e-12 floor."""
    peak = float(np.abs(g).max()) if g.size else 0.0
    return g / max(peak, 1e-12)


def update_attention(alpha: np.ndarray, grad_alpha: np.ndarray,
                     cfg: AttentionConfig = AttentionConfig()) -> np.ndarray:
    alpha = np.asarray(alpha)
    grad_alpha = np.asarray(grad_alpha)
    if alpha.shape != grad_alpha.shape:
        raise ShapeError(f"attention {alpha.shape} vs gradient {grad_alpha.shape}")
    if not np.all(np.isfinite(grad_alpha)):
        raise NumericError("attention gradient is not finite")
    step = cfg.z_alpha * normalize_gradient(grad_alpha.astype(np.float64))
    return np.clip(alpha - step, cfg.clamp_low, cfg.clamp_high).astype(alpha.dtype)
