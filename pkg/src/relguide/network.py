"""Sequential CNN classifier: layer specs, parameter init, forward passes
with a full activation trace, and binary weight persistence.

Two forward paths exist on purpose. ``forward_with_trace`` builds an
autodiff graph (used by training and by differentiable relevance
propagation); ``forward_inference`` runs the same kernels on plain ndarrays
(used by retrieval, evaluation and batched relevance). Both share
``relguide.kernels`` so their outputs are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine, kernels
from .engine import Tensor
from .errors import ConfigError, DimensionError, FormatError

WEIGHT_MAGIC = b"RGTW"
WEIGHT_VERSION = 1


@dataclass
class LayerSpec:
    """One layer of a sequential model. `kind` selects which hyperparameters
    apply: conv(channels,kernel,stride,padding), maxpool(window,stride),
    dropout(rate), dense(units); relu/flatten take none."""

    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    rate: float = 0.0
    units: int = 0

    KINDS = ("conv", "relu", "maxpool", "dropout", "flatten", "dense")


@dataclass
class Model:
    layers: list
    params: dict
    input_shape: tuple
    n_classes: int = 2

    def param_names(self) -> list:
        return sorted(self.params.keys())

    def astype(self, dtype) -> "Model":
        """Copy with parameters cast (float64 replicas for oracles)."""
        params = {k: Tensor(v.data.astype(dtype), dtype=None) for k, v in self.params.items()}
        return Model(list(self.layers), params, self.input_shape, self.n_classes)

    def copy(self) -> "Model":
        return self.astype(self.params[self.param_names()[0]].data.dtype)


@dataclass
class ActivationTrace:
    """Activations per trace position: entry 0 is the input, entry i is the
    output of layer i-1. `caches` carries per-layer internals (conv patch
    matrices, pool argmax indices) for relevance propagation."""

    tensors: list
    caches: list = field(default_factory=list)

    def __len__(self):
        return len(self.tensors)


def infer_shapes(layers, input_shape, n_classes=2) -> list:
    """Propagate shapes through the spec list; raises ConfigError on any
    incompatibility. Returns the shape after every layer (input first)."""
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for li, spec in enumerate(layers):
        if spec.kind == "conv":
            if len(cur) != 3:
                raise ConfigError(f"layer {li}: conv needs (C,H,W) input, has {cur}")
            c, h, w = cur
            k, s, p = spec.kernel, spec.stride, spec.padding
            if k > h + 2 * p or k > w + 2 * p:
                raise ConfigError(f"layer {li}: kernel {k} exceeds padded input {cur}")
            cur = (spec.channels, kernels.conv_out_size(h, k, s, p), kernels.conv_out_size(w, k, s, p))
        elif spec.kind == "maxpool":
            c, h, w = cur
            if spec.window > h or spec.window > w:
                raise ConfigError(f"layer {li}: pool window {spec.window} exceeds input {cur}")
            cur = (
                c,
                (h - spec.window) // spec.stride + 1,
                (w - spec.window) // spec.stride + 1,
            )
            if cur[1] < 1 or cur[2] < 1:
                raise ConfigError(f"layer {li}: input too small for pooling, shape {cur}")
        elif spec.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif spec.kind == "dense":
            if len(cur) != 1:
                raise ConfigError(f"layer {li}: dense needs flat input, has {cur}")
            cur = (spec.units,)
        elif spec.kind in ("relu", "dropout"):
            pass
        else:
            raise ConfigError(f"layer {li}: unknown kind {spec.kind!r}")
        shapes.append(cur)
    return shapes


def default_layers(
    conv_channels=(16, 32, 64, 128), dense_units=256, n_classes=2, dropout_rate=0.25
) -> list:
    """Four conv/relu/pool blocks with dropout after the first and last
    pooling stage, then two dense layers."""
    layers = []
    for bi, ch in enumerate(conv_channels):
        layers.append(LayerSpec("conv", channels=ch, kernel=3, stride=1, padding=1))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", window=2, stride=2))
        if bi in (0, len(conv_channels) - 1):
            layers.append(LayerSpec("dropout", rate=dropout_rate))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=dense_units))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", units=n_classes))
    return layers


def init_params(layers, input_shape, seed) -> dict:
    """He-style fan-in-scaled normal init for weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
    shapes = infer_shapes(layers, input_shape)
    params = {}
    for li, spec in enumerate(layers):
        if spec.kind == "conv":
            c_in = shapes[li][0]
            fan_in = c_in * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.channels, c_in, spec.kernel, spec.kernel))
            params[f"layer{li}.weight"] = Tensor(w.astype(np.float32), name=f"layer{li}.weight")
            params[f"layer{li}.bias"] = Tensor(np.zeros(spec.channels, dtype=np.float32), name=f"layer{li}.bias")
        elif spec.kind == "dense":
            fan_in = shapes[li][0]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.units, fan_in))
            params[f"layer{li}.weight"] = Tensor(w.astype(np.float32), name=f"layer{li}.weight")
            params[f"layer{li}.bias"] = Tensor(np.zeros(spec.units, dtype=np.float32), name=f"layer{li}.bias")
    return params


def build_model(layers, input_shape, seed=0, n_classes=2) -> Model:
    infer_shapes(layers, input_shape, n_classes)
    return Model(layers, init_params(layers, input_shape, seed), tuple(input_shape), n_classes)


def build_default_model(
    input_shape=(3, 64, 64),
    seed=0,
    conv_channels=(16, 32, 64, 128),
    dense_units=256,
    n_classes=2,
    dropout_rate=0.25,
) -> Model:
    layers = default_layers(conv_channels, dense_units, n_classes, dropout_rate)
    return build_model(layers, input_shape, seed, n_classes)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def forward_with_trace(
    model: Model,
    x,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Graph-building forward pass. Returns (logits, ActivationTrace).

    The trace holds graph tensors, so any entry can serve as a relevance
    starting point or as a feature source while staying differentiable.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.shape != model.input_shape:
        raise DimensionError(f"input {x.data.shape} does not match model {model.input_shape}")
    if training and rng is None:
        rng = np.random.default_rng(0)
    h = x
    tensors = [x]
    caches = []
    for li, spec in enumerate(model.layers):
        cache = {"in": h}
        if spec.kind == "conv":
            h, conv_cache = engine.conv2d_with_cache(
                h, model.params[f"layer{li}.weight"], model.params[f"layer{li}.bias"],
                spec.stride, spec.padding,
            )
            cache.update(conv_cache)
        elif spec.kind == "relu":
            h = engine.relu(h)
        elif spec.kind == "maxpool":
            cache["in_hw"] = h.data.shape[1:]
            h = engine.maxpool2d(h, spec.window, spec.stride)
            cache["idx"] = h.cache
        elif spec.kind == "dropout":
            h = engine.dropout(h, spec.rate, training, rng)
        elif spec.kind == "flatten":
            cache["in_shape"] = h.data.shape
            h = engine.flatten(h)
        elif spec.kind == "dense":
            h = engine.dense(h, model.params[f"layer{li}.weight"], model.params[f"layer{li}.bias"])
        tensors.append(h)
        caches.append(cache)
    return h, ActivationTrace(tensors, caches)


def forward_inference(model: Model, x: np.ndarray):
    """Traceless ndarray forward pass (dropout off). Returns (logits,
    activations, caches) with the same cache layout as the graph path."""
    x = np.ascontiguousarray(x, dtype=model.params[model.param_names()[0]].data.dtype)
    if x.shape != model.input_shape:
        raise DimensionError(f"input {x.shape} does not match model {model.input_shape}")
    h = x
    acts = [x]
    caches = []
    for li, spec in enumerate(model.layers):
        cache = {"in": h}
        if spec.kind == "conv":
            w = model.params[f"layer{li}.weight"].data
            b = model.params[f"layer{li}.bias"].data
            c_out, c_in, k, _ = w.shape
            c, hh, ww = h.shape
            ho = kernels.conv_out_size(hh, k, spec.stride, spec.padding)
            wo = kernels.conv_out_size(ww, k, spec.stride, spec.padding)
            cols = kernels.im2col(h, k, spec.stride, spec.padding)
            wm = w.reshape(c_out, c_in * k * k)
            zmat = wm @ cols + b.reshape(c_out, 1)
            h = zmat.reshape(c_out, ho, wo)
            cache.update(
                {"cols": cols, "wm": wm, "zmat": zmat,
                 "geom": (c, hh, ww, k, spec.stride, spec.padding, ho, wo)}
            )
        elif spec.kind == "relu":
            h = np.where(h > 0, h, 0)
        elif spec.kind == "maxpool":
            cache["in_hw"] = h.shape[1:]
            h, idx = kernels.maxpool_forward(h, spec.window, spec.stride)
            cache["idx"] = idx
        elif spec.kind == "dropout":
            pass
        elif spec.kind == "flatten":
            cache["in_shape"] = h.shape
            h = h.reshape(-1)
        elif spec.kind == "dense":
            w = model.params[f"layer{li}.weight"].data
            b = model.params[f"layer{li}.bias"].data
            if w.shape[1] != h.shape[0]:
                raise DimensionError(f"dense weight {w.shape} vs input {h.shape}")
            h = w @ h + b
        acts.append(h)
        caches.append(cache)
    return h, acts, caches


def predict(model: Model, x: np.ndarray) -> int:
    logits, _, _ = forward_inference(model, x)
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# weight persistence
# ---------------------------------------------------------------------------

def save_weights(model: Model, path) -> None:
    """Binary little-endian format: magic, version, tensor count, then per
    tensor name (u16 length + UTF-8), rank u32, dims u32*rank, f32 payload."""
    names = model.param_names()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(names)))
        for name in names:
            data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated weight file while reading {what}")
    return buf


def read_weight_tensors(path) -> dict:
    """Read the raw name -> ndarray mapping from a weight file."""
    tensors = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != WEIGHT_MAGIC:
            raise FormatError("bad magic: not a weight file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            if rank > 8:
                raise FormatError(f"implausible tensor rank {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            payload = _read_exact(f, 4 * n, f"tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise FormatError("trailing bytes after last tensor")
    return tensors


def load_weights(path, template: Optional[Model] = None) -> Model:
    """Rebuild a model from a weight file.

    With a `template`, the file must provide exactly the template's tensors
    with matching dims. Without one, the default conv/pool/dense layout is
    reconstructed from the stored tensor shapes (spatial size from the
    first dense fan-in).
    """
    tensors = read_weight_tensors(path)
    if template is None:
        template = _model_from_tensor_shapes(tensors)
    names = template.param_names()
    if sorted(tensors.keys()) != names:
        raise FormatError(
            f"weight file tensors {sorted(tensors.keys())} do not match model {names}"
        )
    params = {}
    for name in names:
        want = template.params[name].data.shape
        if tensors[name].shape != want:
            raise FormatError(f"tensor {name} has dims {tensors[name].shape}, expected {want}")
        params[name] = Tensor(tensors[name], name=name)
    return Model(list(template.layers), params, template.input_shape, template.n_classes)


def _model_from_tensor_shapes(tensors: dict) -> Model:
    conv_shapes = []
    dense_shapes = []
    for name in sorted(tensors, key=lambda n: int(n.split(".")[0][5:])):
        if not name.endswith(".weight"):
            continue
        shape = tensors[name].shape
        if len(shape) == 4:
            conv_shapes.append(shape)
        elif len(shape) == 2:
            dense_shapes.append(shape)
        else:
            raise FormatError(f"cannot infer a layer from tensor {name} with dims {shape}")
    if not conv_shapes or len(dense_shapes) != 2:
        raise FormatError("weight file does not match the default architecture family")
    channels = tuple(s[0] for s in conv_shapes)
    in_channels = conv_shapes[0][1]
    dense_units, flat = dense_shapes[0]
    n_classes = dense_shapes[1][0]
    spatial = flat // channels[-1]
    side = int(round(np.sqrt(spatial))) * (2 ** len(channels))
    layers = default_layers(channels, dense_units, n_classes)
    model = build_model(layers, (in_channels, side, side), seed=0, n_classes=n_classes)
    return model
