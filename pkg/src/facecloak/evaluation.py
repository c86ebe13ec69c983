"""Protection evaluation: Top-n identification PSR, 1:1 verification PSR,
SSIM/PSNR, and post-processing robustness.

Identification protocol: for each probe, its own identity's injectable images
are added to the gallery for that probe only; the probe is protected when
none of its n nearest gallery entries shares its identity.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .backends.base import Backend
from .core import CloakMask, EvalReport, ImagePlane
from .errors import ConfigError, EvaluationError, ShapeError
from .ingestion import ProbeGallerySplit, Sample
from .optimizer import apply_cloak

log = logging.getLogger(__name__)


class EmbeddingCache:
    """Clean gallery embeddings, computed once per sample and read-only afterwards."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._cache: dict[str, np.ndarray] = {}

    def get(self, samples: Sequence[Sample]) -> np.ndarray:
        todo = [s for s in samples if s.source not in self._cache]
        if todo:
            shape = self.backend.descriptor.input_shape
            emb = self.backend.embed_batch(np.stack([s.load(shape).data for s in todo]))
            for s, e in zip(todo, emb):
                self._cache[s.source] = e
        if not samples:
            return np.zeros((0, self.backend.descriptor.embedding_dim))
        return np.stack([self._cache[s.source] for s in samples])


def _protected_at(probe_emb: np.ndarray, gallery_emb: np.ndarray, own: np.ndarray, n: int) -> bool:
    d = np.linalg.norm(gallery_emb - probe_emb[None, :], axis=1)
    nearest = np.argsort(d, kind="stable")[:n]
    return not bool(own[nearest].any())


def cloaked_probe_images(split: ProbeGallerySplit, cloaks: Mapping[str, CloakMask | None],
                         shape, transform: "TransformSpec | None" = None) -> list[ImagePlane]:
    out = []
    for i, s in enumerate(split.probes):
        if s.label not in cloaks:
            raise EvaluationError(f"no cloak supplied for identity {s.label}")
        img = s.load(shape)
        cloak = cloaks[s.label]
        if cloak is not None:
            img = apply_cloak(img, cloak)
        if transform is not None:
            img = apply_transform(img, transform, seed_offset=i)
        out.append(img)
    return out


def top_n_psr(split: ProbeGallerySplit, cloaks: Mapping[str, CloakMask | None], backend: Backend,
              n: int | Sequence[int] = 1, transform: "TransformSpec | None" = None,
              cache: EmbeddingCache | None = None):
    """Protection success rate in percent.

    ``cloaks`` maps identity -> cloak; ``None`` leaves that identity's probes
    clean.  Passing a sequence for ``n`` returns one PSR per entry.
    """
    ns = [n] if isinstance(n, int) else list(n)
    if any(k < 1 for k in ns):
        raise ConfigError("n must be >= 1")
    if not split.probes:
        raise EvaluationError("empty probe set")
    cache = cache or EmbeddingCache(backend)
    shape = backend.descriptor.input_shape
    probe_emb = backend.embed_batch(np.stack([p.data for p in cloaked_probe_images(split, cloaks, shape, transform)]))
    distractor_emb = cache.get(split.distractors)
    protected = np.zeros(len(ns))
    for s, e in zip(split.probes, probe_emb):
        inj = split.injectable.get(s.label)
        if not inj:
            raise EvaluationError(f"identity {s.label} has no injectable gallery images")
        gallery = np.concatenate([distractor_emb, cache.get(inj)])
        own = np.r_[np.zeros(len(distractor_emb), bool), np.ones(len(inj), bool)]
        protected += [_protected_at(e, gallery, own, k) for k in ns]
    psr = 100.0 * protected / len(split.probes)
    return float(psr[0]) if isinstance(n, int) else [float(p) for p in psr]


# -- verification -----------------------------------------------------------------------


def pair_distances(pairs: Sequence[tuple[ImagePlane, ImagePlane]], backend: Backend) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    a = backend.embed_batch(np.stack([p[0].data for p in pairs]))
    b = backend.embed_batch(np.stack([p[1].data for p in pairs]))
    return np.linalg.norm(a - b, axis=1)


def verification_psr(pairs: Sequence[tuple[ImagePlane, ImagePlane]], backend: Backend, threshold: float) -> float:
    """Percent of (cloaked, same-identity reference) pairs whose distance exceeds the threshold."""
    if not pairs:
        raise EvaluationError("empty pair list")
    d = pair_distances(pairs, backend)
    return float(100.0 * np.mean(d > threshold))


def threshold_from_distances(genuine: np.ndarray, impostor: np.ndarray, target_far: float = 0.01,
                             min_pairs: int = 100) -> float:
    """Accept-if-distance <= threshold operating point.

    Candidates are midpoints between consecutive distinct distances plus one
    point below and one above the data.  Among candidates whose impostor
    accept rate is at most ``target_far``, the one accepting the most genuine
    pairs wins; ties prefer fewer false accepts, then the smaller threshold.
    """
    genuine, impostor = np.sort(np.asarray(genuine, float)), np.sort(np.asarray(impostor, float))
    if len(genuine) < min_pairs or len(impostor) < min_pairs:
        raise EvaluationError(f"need >= {min_pairs} genuine and impostor pairs, "
                              f"got {len(genuine)} / {len(impostor)}")
    if not 0.0 <= target_far <= 1.0:
        raise ConfigError("target_far must lie in [0, 1]")
    values = np.unique(np.concatenate([genuine, impostor]))
    cands = np.concatenate([[values[0] - 1e-6], (values[:-1] + values[1:]) / 2, [values[-1] + 1e-6]])
    far = np.searchsorted(impostor, cands, side="right") / len(impostor)
    tar = np.searchsorted(genuine, cands, side="right") / len(genuine)
    ok = far <= target_far + 1e-12
    # lexicographic: max tar, then min far, then smallest threshold
    order = np.lexsort((cands, far, -tar))
    best = next(i for i in order if ok[i])
    return float(cands[best])


def calibrate_threshold(genuine_pairs, impostor_pairs, backend: Backend, target_far: float = 0.01) -> float:
    return threshold_from_distances(pair_distances(genuine_pairs, backend),
                                    pair_distances(impostor_pairs, backend), target_far)


# -- perceptual metrics ---------------------------------------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def ssim(a: ImagePlane, b: ImagePlane, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    g = _gaussian_window()

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        r = len(g) // 2
        return y[r:-r, r:-r]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for c in range(a.channels):
        x, y = a.data[:, :, c], b.data[:, :, c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def psnr(a: ImagePlane, b: ImagePlane) -> float:
    """PSNR in dB for [0, 1] data; identical images give +inf."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


# -- post-processing transforms ----------------------------------------------------------------

TRANSFORM_RANGES = {
    "gaussian_noise": (0.0, 0.1),
    "gaussian_blur": (0.0, 3.0),
    "jpeg": (10, 100),
    "brightness": (-0.3, 0.3),
    "contrast": (0.5, 1.5),
}

IDENTITY_STRENGTH = {"gaussian_noise": 0.0, "gaussian_blur": 0.0, "jpeg": 100,
                     "brightness": 0.0, "contrast": 1.0}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_RANGES:
            raise ConfigError(f"unknown transform {self.kind!r}; choose from {sorted(TRANSFORM_RANGES)}")
        lo, hi = TRANSFORM_RANGES[self.kind]
        if not lo <= self.strength <= hi:
            raise ConfigError(f"{self.kind} strength {self.strength} outside [{lo}, {hi}]")

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.strength:g}"


def apply_transform(image: ImagePlane, t: TransformSpec, seed_offset: int = 0) -> ImagePlane:
    x = image.data
    if t.kind == "gaussian_noise":
        if t.strength == 0:
            return image
        rng = np.random.default_rng(t.seed + seed_offset)
        return ImagePlane(np.clip(x + rng.normal(0.0, t.strength, x.shape), 0.0, 1.0))
    if t.kind == "gaussian_blur":
        if t.strength == 0:
            return image
        out = np.stack([ndimage.gaussian_filter(x[:, :, c], t.strength, mode="reflect")
                        for c in range(x.shape[2])], axis=2)
        return ImagePlane(np.clip(out, 0.0, 1.0))
    if t.kind == "jpeg":
        buf = io.BytesIO()
        # 4:4:4 so quality 100 is near-lossless; chroma subsampling alone is a lossy filter
        Image.fromarray(image.to_uint8()).save(buf, format="JPEG", quality=int(t.strength), subsampling=0)
        buf.seek(0)
        with Image.open(buf) as im:
            return ImagePlane.from_uint8(np.asarray(im.convert("RGB")))
    if t.kind == "brightness":
        if t.strength == 0:
            return image
        return ImagePlane(np.clip(x + t.strength, 0.0, 1.0))
    if t.strength == 1:
        return image
    return ImagePlane(np.clip((x - 0.5) * t.strength + 0.5, 0.0, 1.0))


def robustness_sweep(split: ProbeGallerySplit, cloaks, backend: Backend, transforms: Sequence[TransformSpec],
                     n: int = 1, cache: EmbeddingCache | None = None) -> list[dict]:
    """Top-n PSR after applying each transform to the cloaked probes."""
    cache = cache or EmbeddingCache(backend)
    return [
        {"transform": t.kind, "strength": t.strength, "n": n,
         "psr": top_n_psr(split, cloaks, backend, n, transform=t, cache=cache)}
        for t in transforms
    ]


def perceptual_summary(split: ProbeGallerySplit, cloaks, shape) -> tuple[float | None, float | None, list[float], list[float]]:
    """Mean SSIM / PSNR of cloaked probes against their clean versions."""
    ssims, psnrs = [], []
    for s in split.probes:
        cloak = cloaks.get(s.label)
        if cloak is None:
            continue
        clean = s.load(shape)
        prot = apply_cloak(clean, cloak)
        ssims.append(ssim(clean, prot))
        psnrs.append(psnr(clean, prot))
    finite = [p for p in psnrs if math.isfinite(p)]
    return (float(np.mean(ssims)) if ssims else None,
            float(np.mean(finite)) if finite else None, ssims, psnrs)


class Evaluator:
    """Scores cloaks on one split with one backend, caching clean gallery embeddings."""

    def __init__(self, split: ProbeGallerySplit, backend: Backend, target_far: float = 0.01):
        self.split = split
        self.backend = backend
        self.target_far = target_far
        self.cache = EmbeddingCache(backend)
        self._threshold: float | None = None

    def all_samples(self) -> list[Sample]:
        inj = [s for label in sorted(self.split.injectable) for s in self.split.injectable[label]]
        return list(self.split.probes) + inj + list(self.split.distractors)

    def verification_threshold(self) -> float:
        """Calibrated on clean split images: every same-identity pair vs every cross-identity pair."""
        if self._threshold is None:
            samples = self.all_samples()
            emb = self.cache.get(samples)
            labels = np.array([s.label for s in samples])
            iu = np.triu_indices(len(samples), 1)
            d = np.linalg.norm(emb[iu[0]] - emb[iu[1]], axis=1)
            same = labels[iu[0]] == labels[iu[1]]
            self._threshold = threshold_from_distances(d[same], d[~same], self.target_far)
            log.info("verification threshold %.4f (target FAR %.3f)", self._threshold, self.target_far)
        return self._threshold

    def verification_pairs(self, cloaks: Mapping[str, CloakMask | None]):
        """(cloaked probe, clean same-identity gallery image) for every probe and injectable image."""
        shape = self.backend.descriptor.input_shape
        pairs = []
        for img, s in zip(cloaked_probe_images(self.split, cloaks, shape), self.split.probes):
            pairs += [(img, ref.load(shape)) for ref in self.split.injectable[s.label]]
        return pairs

    def report(self, cloaks: Mapping[str, CloakMask | None], cfg=None, transforms: Sequence[TransformSpec] = (),
               verification: bool = True, config_id: str | None = None) -> EvalReport:
        top1, top5 = top_n_psr(self.split, cloaks, self.backend, [1, 5], cache=self.cache)
        ver = None
        if verification:
            ver = verification_psr(self.verification_pairs(cloaks), self.backend, self.verification_threshold())
        ssim_mean, psnr_mean, _, _ = perceptual_summary(self.split, cloaks, self.backend.descriptor.input_shape)
        rob = robustness_sweep(self.split, cloaks, self.backend, transforms, 1, cache=self.cache)
        return EvalReport(
            top1_psr=top1, top5_psr=top5, verification_psr=ver, ssim_mean=ssim_mean, psnr_mean_db=psnr_mean,
            robustness=rob, backend_id=self.backend.backend_id,
            eps=cfg.eps if cfg else 0.0, iterations=cfg.iterations if cfg else 0,
            n_variants=cfg.n_variants if cfg else 0,
            config_digest=config_id if config_id is not None else (cfg.digest() if cfg else ""),
            probes=len(self.split.probes),
        )


def render_report(report: EvalReport) -> str:
    """Plain-text table."""

    def fmt(v, spec=".2f"):
        return "n/a" if v is None else format(v, spec)

    rows = [
        ("backend", report.backend_id),
        ("probes", str(report.probes)),
        ("eps", f"{report.eps * 255:.2f}/255"),
        ("iterations", str(report.iterations)),
        ("variants", str(report.n_variants)),
        ("top-1 PSR %", fmt(report.top1_psr, ".1f")),
        ("top-5 PSR %", fmt(report.top5_psr, ".1f")),
        ("verification PSR %", fmt(report.verification_psr, ".1f")),
        ("SSIM", fmt(report.ssim_mean, ".4f")),
        ("PSNR dB", fmt(report.psnr_mean_db)),
    ]
    rows += [(f"top-{r['n']} PSR % [{r['transform']}={r['strength']:g}]", f"{r['psr']:.1f}") for r in report.robustness]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k:<{width}}  {v}" for k, v in rows]
    lines.append(f"config {report.config_digest}")
    return "\n".join(lines)


EVAL_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["top1_psr", "top5_psr", "verification_psr", "ssim_mean", "psnr_mean_db", "robustness", "metadata"],
    "additionalProperties": False,
    "properties": {
        "top1_psr": {"type": "number", "minimum": 0, "maximum": 100},
        "top5_psr": {"type": "number", "minimum": 0, "maximum": 100},
        "verification_psr": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "ssim_mean": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "psnr_mean_db": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "robustness": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["transform", "strength", "n", "psr"],
                "properties": {
                    "transform": {"enum": sorted(TRANSFORM_RANGES)},
                    "strength": {"type": "number"},
                    "n": {"type": "integer", "minimum": 1},
                    "psr": {"type": "number", "minimum": 0, "maximum": 100},
                },
            },
        },
        "metadata": {
            "type": "object",
            "required": ["backend_id", "eps", "iterations", "n_variants", "config_digest", "probes"],
            "properties": {
                "backend_id": {"type": "string"},
                "eps": {"type": "number", "minimum": 0},
                "iterations": {"type": "integer", "minimum": 0},
                "n_variants": {"type": "integer", "minimum": 0},
                "config_digest": {"type": "string"},
                "probes": {"type": "integer", "minimum": 0},
            },
        },
    },
}
