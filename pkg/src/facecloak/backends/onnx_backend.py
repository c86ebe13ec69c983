"""Adapter for exported recognition models in ONNX format (evaluation targets).

The graph must have one image input of rank 4 and one embedding output.  The
input layout comes from the ``layout`` metadata property (``NCHW`` or
``NHWC``) and is otherwise inferred from which axis has 3 channels.  Optional
metadata properties ``input_mean`` / ``input_std`` (applied to [0, 1] pixels)
and ``channel_order`` (``RGB`` or ``BGR``) describe the model's preprocessing.

onnxruntime exposes no input gradients, so these backends can be targets but
never surrogates.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np

from ..errors import BackendError, ModelFormatError
from .base import Backend, BackendDescriptor

log = logging.getLogger(__name__)


def _static_dims(value_info) -> list:
    t = value_info.type.tensor_type
    if not t.HasField("shape"):
        return []
    return [d.dim_value if d.HasField("dim_value") else None for d in t.shape.dim]


class OnnxBackend(Backend):
    def __init__(self, session, input_name: str, layout: str, descriptor: BackendDescriptor,
                 mean: float = 0.0, std: float = 1.0, bgr: bool = False):
        self.session = session
        self.input_name = input_name
        self.layout = layout
        self.descriptor = descriptor
        self.mean, self.std, self.bgr = mean, std, bgr

    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        self.check_shape(images.shape)
        if len(images) == 0:
            return np.zeros((0, self.descriptor.embedding_dim))
        x = (images - self.mean) / self.std
        if self.bgr:
            x = x[..., ::-1]
        if self.layout == "NCHW":
            x = x.transpose(0, 3, 1, 2)
        x = np.ascontiguousarray(x, dtype=np.float32)
        # run one image at a time so graphs with a fixed batch of 1 work too
        feats = np.concatenate([self.session.run(None, {self.input_name: x[i:i + 1]})[0] for i in range(len(x))])
        feats = feats.reshape(len(x), -1).astype(np.float64)
        if feats.shape[1] != self.descriptor.embedding_dim or not np.all(np.isfinite(feats)):
            raise BackendError(f"backend {self.backend_id} produced invalid output {feats.shape}")
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BackendError(f"backend {self.backend_id} produced a zero embedding")
        return feats / norms


def load_exported_backend(path) -> OnnxBackend:
    import onnx
    import onnxruntime as ort

    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise BackendError(f"cannot read model {path}: {exc}") from exc
    # a serialized ModelProto starts with field 1 (ir_version, varint) -> tag byte 0x08
    if not blob or blob[0] != 0x08:
        raise ModelFormatError(f"{path} is not an ONNX model (unexpected leading bytes)")
    try:
        model = onnx.load_model_from_string(blob)
        onnx.checker.check_model(model)
    except Exception as exc:  # protobuf and checker raise assorted types
        raise ModelFormatError(f"{path} is not a valid ONNX model: {exc}") from exc

    graph = model.graph
    init_names = {i.name for i in graph.initializer}
    inputs = [i for i in graph.input if i.name not in init_names]
    if len(inputs) != 1 or len(graph.output) != 1:
        raise ModelFormatError(f"expected one image input and one output, got {len(inputs)} / {len(graph.output)}")
    meta = {p.key: p.value for p in model.metadata_props}
    dims = _static_dims(inputs[0])
    if len(dims) != 4:
        raise ModelFormatError(f"input shape metadata missing or not rank 4: {dims}")
    layout = meta.get("layout", "").upper()
    if not layout:
        if dims[1] == 3:
            layout = "NCHW"
        elif dims[3] == 3:
            layout = "NHWC"
        else:
            raise ModelFormatError(f"cannot infer input layout from {dims}; set the 'layout' metadata property")
    if layout not in ("NCHW", "NHWC"):
        raise ModelFormatError(f"unsupported layout {layout!r}")
    c, h, w = (dims[1], dims[2], dims[3]) if layout == "NCHW" else (dims[3], dims[1], dims[2])
    if c != 3 or not h or not w:
        raise ModelFormatError(f"input shape metadata missing: channels={c}, height={h}, width={w}")
    out_dims = _static_dims(graph.output[0])
    if not out_dims or not out_dims[-1]:
        raise ModelFormatError("output embedding dimension missing from graph metadata")

    try:
        mean = float(meta.get("input_mean", 0.0))
        std = float(meta.get("input_std", 1.0))
    except ValueError as exc:
        raise ModelFormatError(f"bad preprocessing metadata: {exc}") from exc
    if std == 0:
        raise ModelFormatError("input_std must be non-zero")

    opts = ort.SessionOptions()
    opts.intra_op_num_threads = 1
    try:
        session = ort.InferenceSession(blob, opts, providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise ModelFormatError(f"onnxruntime rejected {path}: {exc}") from exc
    descriptor = BackendDescriptor(
        backend_id=f"onnx-{hashlib.sha256(blob).hexdigest()[:12]}",
        input_height=int(h),
        input_width=int(w),
        embedding_dim=int(out_dims[-1]),
        differentiable=False,
    )
    log.info("loaded %s: %s input %dx%d, d=%d", path, layout, h, w, descriptor.embedding_dim)
    return OnnxBackend(session, inputs[0].name, layout, descriptor, mean, std,
                       bgr=meta.get("channel_order", "RGB").upper() == "BGR")
