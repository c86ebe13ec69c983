"""Dataset loading, crop normalisation, and probe/gallery assembly.

Expected layout::

    root/
      probe/<identity>/<image>.png|jpg        users to protect
      gallery/<identity>/<image>.png|jpg      extra enrolled images
      distractor/<identity>/<image>.png|jpg   filler identities
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import MIN_SIDE, ImagePlane
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

ROLES = ("probe", "gallery", "distractor")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def load_image(path) -> ImagePlane:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return ImagePlane.from_uint8(arr)


def save_image(image: ImagePlane, path) -> None:
    Image.fromarray(image.to_uint8()).save(path, format="PNG")


def _bilinear_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Half-pixel-centre linear resampling along one axis, edge-clamped."""
    in_len = arr.shape[axis]
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0, in_len - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = src - lo
    shape = [1] * arr.ndim
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resize_and_center(image, target) -> ImagePlane:
    """Bilinear resize preserving aspect ratio, then centre-crop to ``target`` (h, w)."""
    th, tw = int(target[0]), int(target[1])
    if th < MIN_SIDE or tw < MIN_SIDE:
        raise ShapeError(f"target {th}x{tw} is below the {MIN_SIDE}px minimum")
    data = image.data if isinstance(image, ImagePlane) else np.asarray(image, dtype=np.float64)
    h, w = data.shape[:2]
    if (h, w) == (th, tw):
        return image if isinstance(image, ImagePlane) else ImagePlane(data)
    s = max(th / h, tw / w)
    nh, nw = max(th, round(h * s)), max(tw, round(w * s))
    out = _bilinear_axis(_bilinear_axis(data, nh, 0), nw, 1)
    y0, x0 = (nh - th) // 2, (nw - tw) // 2
    return ImagePlane(np.clip(out[y0:y0 + th, x0:x0 + tw], 0.0, 1.0))


# -- manifests ---------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    label: str
    path: str  # relative to the manifest root, POSIX separators
    sha256: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    exclusions: list[dict] = field(default_factory=list)
    digest: str = ""

    def identities(self, role: str) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            if e.role == role:
                out.setdefault(e.label, []).append(e)
        return out

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "digest": self.digest,
            "entries": [e.__dict__ for e in self.entries],
            "exclusions": self.exclusions,
        }

    def save(self, path=None) -> Path:
        """Write beside the root as ``<root>.manifest.json`` unless a path is given."""
        path = Path(path) if path else self.root.parent / f"{self.root.name}.manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def scan_dataset(root) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    entries, exclusions = [], []
    for role in ROLES:
        role_dir = root / role
        if not role_dir.is_dir():
            continue
        for ident_dir in sorted(p for p in role_dir.iterdir() if p.is_dir()):
            for f in sorted(ident_dir.iterdir()):
                if f.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                rel = f.relative_to(root).as_posix()
                blob = f.read_bytes()
                try:
                    with Image.open(f) as im:
                        im.load()
                        w, h = im.size
                except (OSError, UnidentifiedImageError) as exc:
                    log.warning("excluding undecodable image %s: %s", rel, exc)
                    exclusions.append({"path": rel, "reason": f"undecodable: {exc}"})
                    continue
                if min(w, h) < MIN_SIDE:
                    exclusions.append({"path": rel, "reason": f"too small: {w}x{h}"})
                    continue
                entries.append(ManifestEntry(role, ident_dir.name, rel, hashlib.sha256(blob).hexdigest()))
    entries.sort(key=lambda e: e.path)
    if not entries:
        raise DataError(f"no usable images under {root}")
    probe_ids = {e.label for e in entries if e.role == "probe"}
    clash = probe_ids & {e.label for e in entries if e.role == "distractor"}
    if clash:
        raise DataError(f"identities appear as both probe and distractor: {sorted(clash)}")
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e.role}\0{e.label}\0{e.path}\0{e.sha256}\n".encode())
    return DatasetManifest(root, entries, exclusions, h.hexdigest())


# -- probe / gallery split ------------------------------------------------------------


@dataclass
class Sample:
    label: str
    source: str
    image: ImagePlane | None = None
    root: Path | None = None

    def load(self, shape=None) -> ImagePlane:
        img = self.image if self.image is not None else load_image(self.root / self.source)
        if shape is not None and img.shape[:2] != tuple(shape[:2]):
            img = resize_and_center(img, shape[:2])
        return img


@dataclass
class ProbeGallerySplit:
    """Probes, per-identity injectable gallery images, and permanent distractors.

    A probe's own-identity images join the gallery only while that probe is
    scored (``injection = "per_probe"``).
    """

    probes: list[Sample]
    injectable: dict[str, list[Sample]]
    distractors: list[Sample]
    injection: str = "per_probe"

    def __post_init__(self):
        probe_ids = {s.label for s in self.probes}
        missing = [l for l in probe_ids if not self.injectable.get(l)]
        if missing:
            raise DataError(f"probe identities without injectable images: {sorted(missing)}")
        clash = probe_ids & {s.label for s in self.distractors}
        if clash:
            raise DataError(f"distractor labels overlap probe labels: {sorted(clash)}")

    @property
    def identities(self) -> list[str]:
        return sorted({s.label for s in self.probes})

    def seed_sample(self, label: str) -> Sample:
        """The image a user would hand over: their first injectable image."""
        return self.injectable[label][0]


def build_split(manifest: DatasetManifest, probe_per_identity: int = 5) -> ProbeGallerySplit:
    if probe_per_identity < 1:
        raise DataError("probe_per_identity must be >= 1")
    root = manifest.root
    probes, injectable = [], {}
    gallery_ids = manifest.identities("gallery")
    for label, items in sorted(manifest.identities("probe").items()):
        if len(items) <= probe_per_identity:
            raise DataError(f"identity {label} has {len(items)} images, needs > {probe_per_identity}")
        probes += [Sample(label, e.path, root=root) for e in items[:probe_per_identity]]
        injectable[label] = [Sample(label, e.path, root=root)
                             for e in items[probe_per_identity:] + gallery_ids.pop(label, [])]
    distractors = [Sample(e.label, e.path, root=root)
                   for items in manifest.identities("distractor").values() for e in items]
    # gallery identities with no probe images are permanent gallery members
    distractors += [Sample(e.label, e.path, root=root) for items in gallery_ids.values() for e in items]
    distractors.sort(key=lambda s: s.source)
    return ProbeGallerySplit(probes, injectable, distractors)


def write_dataset(root, images: np.ndarray, labels, role_of: dict[str, str]) -> None:
    """Write an in-memory corpus into the directory layout as PNGs."""
    root = Path(root)
    counters: dict[str, int] = {}
    for img, lab in zip(images, labels):
        d = root / role_of[lab] / lab
        d.mkdir(parents=True, exist_ok=True)
        i = counters.get(lab, 0)
        counters[lab] = i + 1
        save_image(ImagePlane(img), d / f"{i:03d}.png")
