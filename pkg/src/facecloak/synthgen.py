"""Expand one seed image into n variants for cloak optimisation.

The default generator is a seeded augmentation pipeline (flip, rotation,
scale, brightness, contrast, pixel jitter).  An HTTP client covers external
generative services that return synthetic images of the same person.
"""

from __future__ import annotations

import base64
import io
import logging
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .core import ImagePlane
from .errors import ConfigError, CountMismatchError, GenerationError, VariantValidationError
from .ingestion import resize_and_center

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    rotation_deg: float = 0.0
    scale: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    jitter_sigma: float = 0.0
    jitter_seed: int = 0

    def __post_init__(self):
        checks = [
            (-10.0 <= self.rotation_deg <= 10.0, "rotation_deg in [-10, 10]"),
            (0.9 <= self.scale <= 1.1, "scale in [0.9, 1.1]"),
            (-0.1 <= self.brightness <= 0.1, "brightness in [-0.1, 0.1]"),
            (0.85 <= self.contrast <= 1.15, "contrast in [0.85, 1.15]"),
            (0.0 <= self.jitter_sigma <= 0.02, "jitter_sigma in [0, 0.02]"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"augmentation parameter out of range: {what}")


def _rotate_scale(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) by ``angle_deg`` and zoom about the centre."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle_deg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    # inverse map: output -> source, y axis points down
    sx = np.cos(t) * dx - np.sin(t) * dy + cx
    sy = np.sin(t) * dx + np.cos(t) * dy + cy
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(img[:, :, c], [sy, sx], order=1, mode="nearest")
    return out


def augment_once(seed: ImagePlane, params: AugmentParams) -> ImagePlane:
    img = seed.data.copy()
    if params.flip:
        img = img[:, ::-1, :].copy()
    if params.rotation_deg != 0.0 or params.scale != 1.0:
        img = _rotate_scale(img, params.rotation_deg, params.scale)
    if params.contrast != 1.0:
        img = (img - 0.5) * params.contrast + 0.5
    if params.brightness != 0.0:
        img = img + params.brightness
    if params.jitter_sigma > 0.0:
        img = img + np.random.default_rng(params.jitter_seed).normal(0.0, params.jitter_sigma, img.shape)
    return ImagePlane(np.clip(img, 0.0, 1.0))


@dataclass
class VariantSet:
    seed: ImagePlane
    variants: list[ImagePlane]
    generator_id: str
    seed_value: int

    def __post_init__(self):
        if not self.variants:
            raise GenerationError("a variant set needs at least one image", self.generator_id)
        for v in self.variants:
            if v.shape != self.seed.shape:
                raise VariantValidationError(f"variant shape {v.shape} != seed {self.seed.shape}",
                                             self.generator_id)

    @property
    def n(self) -> int:
        return len(self.variants)

    def stack(self) -> np.ndarray:
        return np.stack([v.data for v in self.variants])


class Generator(Protocol):
    generator_id: str

    def generate(self, seed: ImagePlane, n: int, rng_seed: int) -> list[ImagePlane]: ...


class IdentityGenerator:
    generator_id = "identity"

    def generate(self, seed, n, rng_seed):
        if n != 1:
            raise GenerationError("identity generator only produces n = 1", self.generator_id)
        return [seed]


@dataclass
class AugmentationGenerator:
    """Samples one AugmentParams per variant from the stated ranges."""

    flip_prob: float = 0.5
    max_rotation: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    max_brightness: float = 0.1
    contrast_range: tuple = (0.85, 1.15)
    max_jitter: float = 0.02
    generator_id: str = "augment"

    def sample_params(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            flip=bool(rng.random() < self.flip_prob),
            rotation_deg=float(rng.uniform(-self.max_rotation, self.max_rotation)),
            scale=float(rng.uniform(*self.scale_range)),
            brightness=float(rng.uniform(-self.max_brightness, self.max_brightness)),
            contrast=float(rng.uniform(*self.contrast_range)),
            jitter_sigma=float(rng.uniform(0.0, self.max_jitter)),
            jitter_seed=int(rng.integers(0, 2**31)),
        )

    def generate(self, seed, n, rng_seed):
        rng = np.random.default_rng(rng_seed)
        out: list[ImagePlane] = []
        while len(out) < n:
            v = augment_once(seed, self.sample_params(rng))
            if any(v == o for o in out):
                continue
            out.append(v)
        return out


class RealImageGenerator:
    """Uses real photos of the user as variants, for comparing real and synthetic variant sets."""

    generator_id = "real"

    def __init__(self, images):
        self.images = list(images)

    def generate(self, seed, n, rng_seed):
        if n > len(self.images):
            raise CountMismatchError(f"{n} variants requested, only {len(self.images)} real images",
                                     self.generator_id)
        return [img if img.shape == seed.shape else resize_and_center(img, seed.shape[:2])
                for img in self.images[:n]]


class GeneratorClient(Protocol):
    generator_id: str

    def request_variants(self, seed: ImagePlane, n: int) -> list[np.ndarray]:
        """Return n H x W x 3 float arrays (any size; resized by the caller)."""


class HttpGeneratorClient:
    """POST {image: base64 PNG, count: n} -> {images: [base64 PNG, ...]}."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2,
                 token: str | None = None, transport=None, generator_id: str = "external"):
        import httpx

        self.endpoint = endpoint
        self.retries = retries
        self.generator_id = generator_id
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @staticmethod
    def _encode(image: ImagePlane) -> str:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(image.to_uint8()).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    @staticmethod
    def _decode(blob: str) -> np.ndarray:
        from PIL import Image

        with Image.open(io.BytesIO(base64.b64decode(blob))) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0

    def request_variants(self, seed, n):
        import httpx

        body = {"image": self._encode(seed), "count": n}
        last = None
        for attempt in range(self.retries + 1):
            t0 = time.perf_counter()
            try:
                resp = self._client.post(self.endpoint, json=body)
                resp.raise_for_status()
                payload = resp.json()
                log.info("generator %s: %d images requested, status %d, %.1f ms",
                         self.endpoint, n, resp.status_code, 1e3 * (time.perf_counter() - t0))
                break
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("generator %s attempt %d failed after %.1f ms: %s",
                            self.endpoint, attempt + 1, 1e3 * (time.perf_counter() - t0), exc)
        else:
            raise GenerationError(f"service unreachable: {last}", self.generator_id)
        try:
            return [self._decode(b) for b in payload["images"]]
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise VariantValidationError(f"malformed response: {exc}", self.generator_id) from exc


def fetch_generated_variants(client: GeneratorClient, seed: ImagePlane, n: int) -> list[ImagePlane]:
    arrays = client.request_variants(seed, n)
    if len(arrays) != n:
        raise CountMismatchError(f"requested {n} images, received {len(arrays)}", client.generator_id)
    out = []
    for i, arr in enumerate(arrays):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise VariantValidationError(f"image {i} has shape {arr.shape}", client.generator_id)
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise VariantValidationError(f"image {i} has pixels outside [0, 1]", client.generator_id)
        out.append(resize_and_center(arr, seed.shape[:2]))
    return out


class ExternalGenerator:
    def __init__(self, client: GeneratorClient):
        self.client = client
        self.generator_id = client.generator_id

    def generate(self, seed, n, rng_seed):
        return fetch_generated_variants(self.client, seed, n)


def generate_variants(seed: ImagePlane, n: int = 8, generator: Generator | None = None,
                      rng_seed: int = 0) -> VariantSet:
    if n < 1:
        raise ConfigError("n must be >= 1")
    generator = generator or AugmentationGenerator()
    variants = generator.generate(seed, n, rng_seed)
    if len(variants) != n:
        raise CountMismatchError(f"generator returned {len(variants)} of {n}", generator.generator_id)
    return VariantSet(seed, list(variants), generator.generator_id, rng_seed)
