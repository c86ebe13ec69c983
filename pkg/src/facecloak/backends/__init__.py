from __future__ import annotations

from pathlib import Path

from ..errors import BackendError
from .base import Backend, BackendDescriptor, TorchBackend
from .onnx_backend import OnnxBackend, load_exported_backend
from .toy import (
    ToyBackend,
    ToyBackendWeights,
    ToyTrainConfig,
    load_toy_weights,
    random_toy_backend,
    save_toy_weights,
    train_toy_backend,
)


class BackendRegistry:
    """Named backends; ids are unique within one registry."""

    def __init__(self):
        self._items: dict[str, Backend] = {}

    def register(self, backend: Backend) -> Backend:
        if backend.backend_id in self._items and self._items[backend.backend_id] is not backend:
            raise BackendError(f"backend id {backend.backend_id!r} already registered")
        self._items[backend.backend_id] = backend
        return backend

    def get(self, backend_id: str) -> Backend:
        try:
            return self._items[backend_id]
        except KeyError:
            raise BackendError(f"unknown backend {backend_id!r}") from None

    def __contains__(self, backend_id):
        return backend_id in self._items

    def __len__(self):
        return len(self._items)


def load_backend(kind: str, path) -> Backend:
    """``kind`` is ``toy`` (FCTW1 weights file) or ``onnx`` (exported graph)."""
    if kind == "toy":
        return ToyBackend(load_toy_weights(Path(path)))
    if kind == "onnx":
        return load_exported_backend(path)
    raise BackendError(f"unknown backend kind {kind!r}; expected 'toy' or 'onnx'")


__all__ = [
    "Backend", "BackendDescriptor", "BackendRegistry", "OnnxBackend", "TorchBackend", "ToyBackend",
    "ToyBackendWeights", "ToyTrainConfig", "load_backend", "load_exported_backend", "load_toy_weights",
    "random_toy_backend", "save_toy_weights", "train_toy_backend",
]
