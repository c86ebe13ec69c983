from __future__ import annotations

import abc
import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from ..core import Embedding, ImagePlane
from ..errors import BackendError, CapabilityError, ShapeError

Objective = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    input_height: int
    input_width: int
    embedding_dim: int
    differentiable: bool

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise BackendError(f"embedding_dim must be >= 2, got {self.embedding_dim}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_height, self.input_width, 3)


class Backend(abc.ABC):
    """Face embedding function phi: image -> unit-norm vector."""

    descriptor: BackendDescriptor

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def check_shape(self, shape) -> None:
        if tuple(shape[-3:]) != self.descriptor.input_shape:
            raise ShapeError(
                f"backend {self.backend_id} expects {self.descriptor.input_shape}, got {tuple(shape[-3:])}"
            )

    @abc.abstractmethod
    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        """Embed an N x H x W x 3 array in [0, 1]; returns N x d unit rows (float64)."""

    def embed(self, image: ImagePlane) -> Embedding:
        self.check_shape(image.shape)
        return Embedding.normalized(self.embed_batch(image.data[None])[0])

    def input_gradient(self, image: ImagePlane, objective: Objective) -> np.ndarray:
        raise CapabilityError(f"backend {self.backend_id} does not provide input gradients")


class TorchBackend(Backend):
    """Differentiable backend around a module mapping N x 3 x H x W -> N x d features.

    Embeddings are the L2-normalised module outputs.  ``dtype`` selects the
    arithmetic precision; :meth:`as_float64` gives a copy for gradient checks.
    """

    def __init__(self, module: torch.nn.Module, backend_id: str, input_hw: tuple[int, int],
                 embedding_dim: int, dtype=torch.float32, batch_size: int = 256):
        self.module = module.to(dtype).eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.dtype = dtype
        self.batch_size = batch_size
        self.descriptor = BackendDescriptor(
            backend_id=backend_id,
            input_height=int(input_hw[0]),
            input_width=int(input_hw[1]),
            embedding_dim=int(embedding_dim),
            differentiable=True,
        )

    def as_float64(self) -> "TorchBackend":
        clone = copy.copy(self)
        clone.module = copy.deepcopy(self.module).to(torch.float64)
        clone.dtype = torch.float64
        return clone

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable N x H x W x 3 -> N x d unit embeddings."""
        feats = self.module(x.permute(0, 3, 1, 2))
        if not torch.all(torch.isfinite(feats)):
            raise BackendError(f"backend {self.backend_id} produced non-finite activations")
        return F.normalize(feats, dim=1, eps=1e-12)

    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        self.check_shape(images.shape)
        out = []
        with torch.no_grad():
            for i in range(0, len(images), self.batch_size):
                x = torch.tensor(images[i:i + self.batch_size], dtype=self.dtype)
                out.append(self.forward(x).to(torch.float64).numpy())
        if not out:
            return np.zeros((0, self.descriptor.embedding_dim))
        e = np.concatenate(out)
        # renormalise in float64 so the unit-norm tolerance is not eaten by float32
        return e / np.linalg.norm(e, axis=1, keepdims=True)

    def input_gradient(self, image: ImagePlane, objective: Objective) -> np.ndarray:
        self.check_shape(image.shape)
        x = torch.tensor(image.data[None], dtype=self.dtype, requires_grad=True)
        with torch.enable_grad():
            value = objective(self.forward(x)[0])
            if not isinstance(value, torch.Tensor) or not value.requires_grad:
                return np.zeros(image.shape)
            if value.numel() != 1:
                raise BackendError("objective must return a scalar")
            (grad,) = torch.autograd.grad(value.reshape(()), x)
        return grad[0].to(torch.float64).numpy()
