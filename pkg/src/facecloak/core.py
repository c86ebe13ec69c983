"""Domain types shared across the package and the cloak container format.

Pixels live in [0, 1] as float64 in memory.  Cloak tensors (delta, attention,
budget) are float32 because that is their on-disk representation and the
save/load round trip must be bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    ContainerInvariantError,
    ContainerNotFoundError,
    CorruptHeaderError,
    CorruptPayloadError,
    InvariantError,
    PersistenceError,
    ShapeError,
)

MIN_SIDE = 16
CHANNELS = 3
UNIT_NORM_TOL = 1e-6

CLOAK_MAGIC = b"FCLK1\n"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """H x W x 3 image with every value finite and inside [0, 1].

    Out-of-range data is rejected, never clamped; use
    :func:`facecloak.optimizer.clip_image` to clamp explicitly.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != CHANNELS:
            raise ShapeError(f"image must be HxWx{CHANNELS}, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise ShapeError(f"image sides must be >= {MIN_SIDE}, got {arr.shape[:2]}")
        if not np.all(np.isfinite(arr)):
            raise InvariantError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvariantError(
                f"image values must lie in [0, 1], got [{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_uint8(self) -> np.ndarray:
        return np.round(self.data * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImagePlane":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def payload_bytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype="<f8").tobytes()

    def identity_hash(self) -> str:
        """Lowercase hex SHA-256 of the pixel payload."""
        return hashlib.sha256(self.payload_bytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.size < 2:
            raise InvariantError("embedding needs at least 2 dimensions")
        if not np.all(np.isfinite(v)):
            raise InvariantError("embedding contains non-finite values")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise InvariantError(f"embedding must be unit norm, got |e| = {norm:.9f}")
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def normalized(cls, raw) -> "Embedding":
        v = np.asarray(raw, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0.0:
            raise InvariantError("cannot normalize a zero or non-finite vector")
        return cls(v / n)

    @property
    def dim(self) -> int:
        return self.values.size

    def distance(self, other: "Embedding") -> float:
        return float(np.linalg.norm(self.values - other.values))

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    __hash__ = None


def check_label(label: str) -> str:
    if not isinstance(label, str) or not label:
        raise InvariantError(f"identity label must be a non-empty string, got {label!r}")
    return label


@dataclass(frozen=True, eq=False)
class BudgetMap:
    """Per-element perturbation bound; every element is base_eps or boosted_eps."""

    values: np.ndarray
    base_eps: float
    boosted_eps: float

    def __post_init__(self):
        base, boosted = float(self.base_eps), float(self.boosted_eps)
        if not (0.0 <= base <= 1.0 and 0.0 <= boosted <= 1.0):
            raise InvariantError("budget values must lie in [0, 1]")
        if boosted < base:
            raise InvariantError(f"boosted_eps {boosted} < base_eps {base}")
        v = np.array(self.values, dtype=np.float32, copy=True)
        if v.ndim != 3:
            raise ShapeError(f"budget map must be HxWxC, got {v.shape}")
        ok = (v == np.float32(base)) | (v == np.float32(boosted))
        if not ok.all():
            raise InvariantError("budget elements must equal base_eps or boosted_eps")
        object.__setattr__(self, "base_eps", base)
        object.__setattr__(self, "boosted_eps", boosted)
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def uniform(cls, shape, eps: float) -> "BudgetMap":
        return cls(np.full(shape, eps, dtype=np.float32), eps, eps)

    @property
    def shape(self):
        return self.values.shape

    def boosted_mask(self) -> np.ndarray:
        if self.boosted_eps == self.base_eps:
            return np.zeros(self.shape, dtype=bool)
        return self.values == np.float32(self.boosted_eps)

    def __eq__(self, other):
        if not isinstance(other, BudgetMap):
            return NotImplemented
        return (
            self.base_eps == other.base_eps
            and self.boosted_eps == other.boosted_eps
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CloakMask:
    """Identity-specific perturbation plus the state it was learned with.

    ``delta`` is stored post-projection, so applying the cloak needs nothing
    but an addition and a clamp.
    """

    delta: np.ndarray
    attention: np.ndarray
    budget: BudgetMap
    backend_id: str
    seed_identity_hash: str
    config_digest: str

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.float32, copy=True)
        attention = np.array(self.attention, dtype=np.float32, copy=True)
        if delta.shape != self.budget.shape or attention.shape != self.budget.shape:
            raise ShapeError(
                f"delta {delta.shape}, attention {attention.shape} and budget "
                f"{self.budget.shape} must share a shape"
            )
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(attention))):
            raise InvariantError("cloak tensors must be finite")
        if attention.min(initial=0.0) < 0.0 or attention.max(initial=0.0) > 2.0:
            raise InvariantError("attention elements must lie in [0, 2]")
        if np.any(np.abs(delta) > self.budget.values):
            raise InvariantError("|delta| exceeds the budget map")
        object.__setattr__(self, "delta", _readonly(delta))
        object.__setattr__(self, "attention", _readonly(attention))

    @classmethod
    def zeros(cls, shape, eps: float = 0.0, backend_id: str = "none",
              seed_identity_hash: str = "", config_digest: str = "") -> "CloakMask":
        return cls(
            delta=np.zeros(shape, np.float32),
            attention=np.ones(shape, np.float32),
            budget=BudgetMap.uniform(shape, eps),
            backend_id=backend_id,
            seed_identity_hash=seed_identity_hash,
            config_digest=config_digest,
        )

    @property
    def shape(self):
        return self.delta.shape

    def __eq__(self, other):
        if not isinstance(other, CloakMask):
            return NotImplemented
        return (
            np.array_equal(self.delta, other.delta)
            and np.array_equal(self.attention, other.attention)
            and self.budget == other.budget
            and self.backend_id == other.backend_id
            and self.seed_identity_hash == other.seed_identity_hash
            and self.config_digest == other.config_digest
        )

    __hash__ = None


@dataclass(frozen=True)
class AnchorPair:
    near: Embedding
    far: Embedding
    near_label: str
    far_label: str


@dataclass
class EvalReport:
    """Results for one run configuration; field order is the JSON order."""

    top1_psr: float
    top5_psr: float
    verification_psr: float | None
    ssim_mean: float | None
    psnr_mean_db: float | None
    robustness: list = field(default_factory=list)
    backend_id: str = ""
    eps: float = 0.0
    iterations: int = 0
    n_variants: int = 0
    config_digest: str = ""
    probes: int = 0

    def __post_init__(self):
        for name in ("top1_psr", "top5_psr", "verification_psr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise InvariantError(f"{name} must lie in [0, 100], got {v}")
        if self.ssim_mean is not None and not -1.0 <= self.ssim_mean <= 1.0:
            raise InvariantError(f"ssim_mean must lie in [-1, 1], got {self.ssim_mean}")
        if self.psnr_mean_db is not None and not self.psnr_mean_db > 0.0:
            raise InvariantError(f"psnr_mean_db must be positive, got {self.psnr_mean_db}")
        for row in self.robustness:
            if not 0.0 <= row["psr"] <= 100.0:
                raise InvariantError(f"robustness PSR out of range: {row}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "top1_psr": self.top1_psr,
            "top5_psr": self.top5_psr,
            "verification_psr": self.verification_psr,
            "ssim_mean": self.ssim_mean,
            "psnr_mean_db": self.psnr_mean_db,
            "robustness": [dict(r) for r in self.robustness],
            "metadata": {
                "backend_id": self.backend_id,
                "eps": self.eps,
                "iterations": self.iterations,
                "n_variants": self.n_variants,
                "config_digest": self.config_digest,
                "probes": self.probes,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        meta = d.get("metadata", {})
        return cls(
            top1_psr=d["top1_psr"],
            top5_psr=d["top5_psr"],
            verification_psr=d.get("verification_psr"),
            ssim_mean=d.get("ssim_mean"),
            psnr_mean_db=d.get("psnr_mean_db"),
            robustness=list(d.get("robustness", [])),
            **meta,
        )


# -- container format ------------------------------------------------------------
#
# magic | u64 LE header length | UTF-8 JSON header | payload blobs


def write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    path = Path(path)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob = magic + struct.pack("<Q", len(header_bytes)) + header_bytes + payload
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise PersistenceError(f"cannot write container ({exc.strerror or exc})", path) from exc


def read_container_header(path, magic: bytes) -> tuple[dict, int]:
    """Return (header, payload offset) without reading payload bytes."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(len(magic) + 8)
            if len(head) < len(magic) + 8 or head[: len(magic)] != magic:
                raise CorruptHeaderError("bad magic or truncated preamble", path)
            (n,) = struct.unpack("<Q", head[len(magic):])
            if n > 1 << 24:
                raise CorruptHeaderError(f"implausible header length {n}", path)
            raw = f.read(n)
    except FileNotFoundError as exc:
        raise ContainerNotFoundError("no such container", path) from exc
    except IsADirectoryError as exc:
        raise PersistenceError("path is a directory", path) from exc
    if len(raw) != n:
        raise CorruptHeaderError("truncated header", path)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON ({exc})", path) from exc
    if not isinstance(header, dict):
        raise CorruptHeaderError("header must be a JSON object", path)
    return header, len(magic) + 8 + n


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    header, offset = read_container_header(path, magic)
    with open(path, "rb") as f:
        f.seek(offset)
        payload = f.read()
    return header, payload


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


CLOAK_HEADER_KEYS = (
    "height", "width", "channels", "base_eps", "boosted_eps",
    "backend_id", "seed_identity_hash", "config_digest", "payload_sha256",
)


def save_cloak(cloak: CloakMask, path) -> None:
    h, w, c = cloak.shape
    payload = _f32_bytes(cloak.delta) + _f32_bytes(cloak.attention) + _f32_bytes(cloak.budget.values)
    header = {
        "height": h,
        "width": w,
        "channels": c,
        "base_eps": cloak.budget.base_eps,
        "boosted_eps": cloak.budget.boosted_eps,
        "backend_id": cloak.backend_id,
        "seed_identity_hash": cloak.seed_identity_hash,
        "config_digest": cloak.config_digest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    write_container(path, CLOAK_MAGIC, header, payload)


def read_cloak_header(path) -> dict:
    header, _ = read_container_header(path, CLOAK_MAGIC)
    missing = [k for k in CLOAK_HEADER_KEYS if k not in header]
    if missing:
        raise CorruptHeaderError(f"header missing keys {missing}", path)
    return header


def load_cloak(path) -> CloakMask:
    header, payload = read_container(path, CLOAK_MAGIC)
    missing = [k for k in CLOAK_HEADER_KEYS if k not in header]
    if missing:
        raise CorruptHeaderError(f"header missing keys {missing}", path)
    try:
        h, w, c = (int(header[k]) for k in ("height", "width", "channels"))
        base, boosted = float(header["base_eps"]), float(header["boosted_eps"])
    except (TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"malformed header field ({exc})", path) from exc
    if min(h, w, c) <= 0:
        raise ContainerInvariantError(f"non-positive shape {(h, w, c)}", path)
    if boosted < base:
        raise ContainerInvariantError(f"boosted_eps {boosted} < base_eps {base}", path)
    n = h * w * c * 4
    if len(payload) != 3 * n:
        raise CorruptPayloadError(f"payload is {len(payload)} bytes, expected {3 * n}", path)
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptPayloadError("payload digest mismatch", path)
    shape = (h, w, c)
    delta, attention, budget = (
        np.frombuffer(payload, dtype="<f4", count=h * w * c, offset=i * n).reshape(shape)
        for i in range(3)
    )
    try:
        return CloakMask(
            delta=delta,
            attention=attention,
            budget=BudgetMap(budget, base, boosted),
            backend_id=str(header["backend_id"]),
            seed_identity_hash=str(header["seed_identity_hash"]),
            config_digest=str(header["config_digest"]),
        )
    except InvariantError as exc:
        raise ContainerInvariantError(str(exc), path) from exc


def config_digest(obj) -> str:
    """Stable SHA-256 over a JSON-serialisable config tree."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
