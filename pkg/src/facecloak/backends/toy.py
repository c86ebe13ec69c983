"""Small convolutional embedding network for desk-scale experiments.

Three stride-2 conv blocks (16/32/64 channels), global average pooling and a
linear projection to a 64-d embedding, trained with a normalised-softmax
(cosine classifier) loss.  SiLU keeps the network smooth so input gradients
agree with finite differences everywhere.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import read_container, write_container
from ..errors import CorruptHeaderError, CorruptPayloadError, DatasetTooSmallError, TrainingError
from .base import TorchBackend

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"FCTW1\n"


class ToyEmbeddingNet(nn.Module):
    def __init__(self, widths: Sequence[int] = (16, 32, 64), embedding_dim: int = 64):
        super().__init__()
        layers = []
        cin = 3
        for w in widths:
            layers += [
                nn.Conv2d(cin, w, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(w, w, 3, stride=1, padding=1),
                nn.SiLU(),
            ]
            cin = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, embedding_dim)

    def forward(self, x):
        x = (x - 0.5) * 4.0
        x = self.features(x)
        return self.head(x.mean(dim=(2, 3)))


@dataclass
class ToyTrainConfig:
    embedding_dim: int = 64
    widths: tuple = (16, 32, 64)
    epochs: int = 120
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    logit_scale: float = 16.0
    margin: float = 0.1
    holdout_per_identity: int = 5
    accuracy_floor: float = 0.90
    # on-the-fly augmentation
    max_shift: int = 3
    noise_std: float = 0.02
    brightness: float = 0.08
    seed: int = 0


@dataclass
class ToyBackendWeights:
    state: "OrderedDict[str, np.ndarray]"
    widths: tuple
    embedding_dim: int
    input_hw: tuple
    metadata: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return int(sum(v.size for v in self.state.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, v in self.state.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()

    def build_module(self) -> ToyEmbeddingNet:
        net = ToyEmbeddingNet(self.widths, self.embedding_dim)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        return net


class ToyBackend(TorchBackend):
    def __init__(self, weights: ToyBackendWeights, dtype=torch.float32):
        super().__init__(
            weights.build_module(),
            backend_id=f"toy-{weights.digest()[:12]}",
            input_hw=weights.input_hw,
            embedding_dim=weights.embedding_dim,
            dtype=dtype,
        )
        self.weights = weights


def random_toy_backend(input_hw=(16, 16), seed: int = 0, embedding_dim: int = 64) -> ToyBackend:
    """Untrained toy backend with seeded random weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ToyEmbeddingNet(embedding_dim=embedding_dim)
    state = OrderedDict((k, v.detach().numpy().astype(np.float32)) for k, v in net.state_dict().items())
    return ToyBackend(ToyBackendWeights(state, (16, 32, 64), embedding_dim, tuple(input_hw),
                                        {"trained": False, "seed": seed}))


def dataset_digest(images: np.ndarray, labels: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update("\x00".join(labels).encode())
    return h.hexdigest()


def holdout_split(labels: Sequence[str], holdout_per_identity: int):
    """Indices of (train, held-out); the first k images of each identity are held out."""
    seen: dict[str, int] = {}
    train, held = [], []
    for i, lab in enumerate(labels):
        c = seen.get(lab, 0)
        (held if c < holdout_per_identity else train).append(i)
        seen[lab] = c + 1
    return np.array(train), np.array(held)


def nearest_neighbour_accuracy(probe_emb, probe_labels, gallery_emb, gallery_labels) -> float:
    d = ((probe_emb[:, None, :] - gallery_emb[None, :, :]) ** 2).sum(-1)
    pred = np.asarray(gallery_labels)[np.argmin(d, axis=1)]
    return float(np.mean(pred == np.asarray(probe_labels)))


def _augment_batch(x: torch.Tensor, cfg: ToyTrainConfig, gen: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    if cfg.max_shift:
        s = cfg.max_shift
        padded = F.pad(x, (s, s, s, s), mode="replicate")
        offs = torch.randint(0, 2 * s + 1, (n, 2), generator=gen)
        h, w = x.shape[2:]
        x = torch.stack([padded[i, :, oy:oy + h, ox:ox + w] for i, (oy, ox) in enumerate(offs.tolist())])
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    if cfg.brightness:
        b = (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * cfg.brightness
        c = 1 + (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1) * cfg.brightness
        x = (x - 0.5) * c + 0.5 + b
    if cfg.noise_std:
        x = x + torch.randn(x.shape, generator=gen) * cfg.noise_std
    return x.clamp(0, 1)


def train_toy_backend(images: np.ndarray, labels: Sequence[str],
                      config: ToyTrainConfig | None = None) -> ToyBackendWeights:
    """Train the toy embedding network on a labelled N x H x W x 3 image array.

    The first ``holdout_per_identity`` images of every identity are withheld;
    after training, each held-out image is identified by its nearest training
    image and the Top-1 accuracy must reach ``accuracy_floor``.
    """
    cfg = config or ToyTrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = list(labels)
    if images.ndim != 4 or images.shape[-1] != 3 or len(images) != len(labels):
        raise TrainingError(f"expected N x H x W x 3 images matching {len(labels)} labels, got {images.shape}")
    classes = sorted(set(labels))
    counts = {c: labels.count(c) for c in classes}
    if len(classes) < 10 or min(counts.values()) < 5:
        raise DatasetTooSmallError(
            f"need >= 10 identities with >= 5 images each; got {len(classes)} identities, "
            f"min {min(counts.values())} images"
        )
    if min(counts.values()) <= cfg.holdout_per_identity:
        raise DatasetTooSmallError("every identity needs more images than holdout_per_identity")

    train_idx, held_idx = holdout_split(labels, cfg.holdout_per_identity)
    class_of = {c: i for i, c in enumerate(classes)}
    y_all = torch.tensor([class_of[l] for l in labels])
    x_all = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    x_train, y_train = x_all[train_idx], y_all[train_idx]

    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = ToyEmbeddingNet(cfg.widths, cfg.embedding_dim)
        proxies = nn.Parameter(torch.randn(len(classes), cfg.embedding_dim) * 0.1)
    opt = torch.optim.Adam(list(net.parameters()) + [proxies], lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = int(np.ceil(len(train_idx) / cfg.batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch)

    net.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(train_idx), generator=gen)
        total = 0.0
        for i in range(0, len(perm), cfg.batch_size):
            b = perm[i:i + cfg.batch_size]
            xb = _augment_batch(x_train[b], cfg, gen)
            emb = F.normalize(net(xb), dim=1)
            cos = emb @ F.normalize(proxies, dim=1).T
            onehot = F.one_hot(y_train[b], len(classes)).to(cos.dtype)
            loss = F.cross_entropy(cfg.logit_scale * (cos - cfg.margin * onehot), y_train[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(b)
        log.debug("epoch %d loss %.4f", epoch, total / len(train_idx))
    net.eval()

    state = OrderedDict((k, v.detach().numpy().astype(np.float32).copy()) for k, v in net.state_dict().items())
    weights = ToyBackendWeights(
        state=state,
        widths=tuple(cfg.widths),
        embedding_dim=cfg.embedding_dim,
        input_hw=(int(images.shape[1]), int(images.shape[2])),
        metadata={
            "dataset_digest": dataset_digest(images, labels),
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "identities": len(classes),
            "train_images": int(len(train_idx)),
        },
    )
    backend = ToyBackend(weights)
    emb = backend.embed_batch(images)
    acc = nearest_neighbour_accuracy(emb[held_idx], np.asarray(labels)[held_idx],
                                     emb[train_idx], np.asarray(labels)[train_idx])
    weights.metadata["holdout_top1"] = acc
    log.info("toy backend trained: held-out top-1 %.3f (%d params)", acc, weights.param_count)
    if acc < cfg.accuracy_floor:
        raise TrainingError(f"held-out top-1 accuracy {acc:.3f} below floor {cfg.accuracy_floor}", accuracy=acc)
    return weights


def save_toy_weights(weights: ToyBackendWeights, path) -> None:
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in weights.state.values())
    header = {
        "widths": list(weights.widths),
        "embedding_dim": weights.embedding_dim,
        "input_height": weights.input_hw[0],
        "input_width": weights.input_hw[1],
        "params": [[k, list(v.shape)] for k, v in weights.state.items()],
        "metadata": weights.metadata,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    write_container(path, WEIGHTS_MAGIC, header, payload)


def load_toy_weights(path) -> ToyBackendWeights:
    header, payload = read_container(path, WEIGHTS_MAGIC)
    try:
        params = [(str(k), tuple(int(s) for s in shape)) for k, shape in header["params"]]
        digest = header["payload_sha256"]
        hw = (int(header["input_height"]), int(header["input_width"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"malformed weights header ({exc})", path) from exc
    expected = sum(int(np.prod(s)) for _, s in params) * 4
    if len(payload) != expected:
        raise CorruptPayloadError(f"payload is {len(payload)} bytes, expected {expected}", path)
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CorruptPayloadError("payload digest mismatch", path)
    state = OrderedDict()
    off = 0
    for name, shape in params:
        n = int(np.prod(shape))
        state[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += n * 4
    if not all(np.all(np.isfinite(v)) for v in state.values()):
        raise CorruptPayloadError("non-finite parameters", path)
    return ToyBackendWeights(state, tuple(header["widths"]), int(header["embedding_dim"]), hw,
                             dict(header.get("metadata", {})))
