"""Network assembly: the triplet embedder, the MLP classifier, the residual baseline.

Architectures follow the layer vocabulary of :mod:`tripletvol.layers`:

* embedder: residual blocks (stride 2) -> flatten -> dense 1024 -> PReLU ->
  dense ``embedding_dim`` -> L2 row normalisation
* classifier: dense 256 -> 64 -> 32 (leaky, fixed slope) -> 1 -> sigmoid
* baseline: six residual blocks -> flatten -> the same four-layer head

Checkpoint layout::

    4s   magic "TVCK"
    u32  version (1)
    u64  header length H
    H    UTF-8 JSON {"spec": ..., "tensors": [{"name", "shape", "offset", "nbytes"}]}
    ...  little-endian f32 payload, tensors back to back
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .layers import Dense, Module, Parameter, PReLU, ResidualBlock, sigmoid
from .tensor import Tensor, flatten, l2_normalize_rows

EMBEDDER = "rtcnn-embedder"
CLASSIFIER = "rtcnn-classifier"
BASELINE = "rcnn-baseline"
VARIANTS = (EMBEDDER, CLASSIFIER, BASELINE)

_DEFAULT_WIDTHS = {EMBEDDER: [8, 16, 32, 64], BASELINE: [8, 16, 32, 64, 128, 128], CLASSIFIER: []}


@dataclass
class ModelSpec:
    variant: str = EMBEDDER
    input_dims: tuple[int, int, int] = (32, 32, 16)
    channel_widths: Optional[list[int]] = None
    strides: Optional[list[int]] = None
    embedding_dim: int = 512
    dense_hidden: list[int] = field(default_factory=lambda: [1024])
    classifier_hidden: list[int] = field(default_factory=lambda: [256, 64, 32])
    in_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        self.input_dims = tuple(int(d) for d in self.input_dims)  # type: ignore[assignment]
        if self.channel_widths is None:
            self.channel_widths = list(_DEFAULT_WIDTHS[self.variant])
        self.channel_widths = [int(c) for c in self.channel_widths]
        if self.strides is None and self.variant != CLASSIFIER:
            self.strides = default_strides(self.input_dims, len(self.channel_widths))

    @property
    def n_residual_blocks(self) -> int:
        return len(self.channel_widths or [])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model spec keys {sorted(unknown)}")
        return cls(**doc)


def _halve(extent: int) -> int:
    return (extent - 1) // 2 + 1


def default_strides(input_dims: Sequence[int], n_blocks: int) -> list[int]:
    """Stride 2 per block while the downsampled grid keeps at least 4 voxels.

    Instance norm needs spatial statistics, so the grid is never driven down
    to a single voxel; the remaining blocks run at stride 1.
    """
    dims = list(input_dims)
    strides = []
    for _ in range(n_blocks):
        nxt = [_halve(d) for d in dims]
        if math.prod(nxt) >= 4:
            strides.append(2)
            dims = nxt
        else:
            strides.append(1)
    return strides


def trace_spatial(input_dims: Sequence[int], strides: Sequence[int]) -> list[tuple[int, int, int]]:
    """Spatial extents after each residual block; raises on underflow."""
    dims = tuple(int(d) for d in input_dims)
    out = []
    for i, s in enumerate(strides):
        dims = tuple((d - 1) // s + 1 for d in dims)
        if min(dims) < 1 or math.prod(dims) < 2:
            raise ConfigError(f"spatial underflow after block {i}: extent {dims} leaves no statistics for instance norm")
        out.append(dims)  # type: ignore[arg-type]
    return out


# ----------------------------------------------------------------------
# networks


class MLPHead(Module):
    """Dense stack with fixed-slope leaky activations and a sigmoid output."""

    def __init__(self, in_features: int, hidden: Sequence[int], rng, dtype=np.float32):
        widths = [in_features, *hidden]
        self.layers = [Dense(a, b, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.acts = [PReLU(b, learnable=False, dtype=dtype) for b in hidden]
        self.out = Dense(widths[-1], 1, rng=rng, dtype=dtype)

    def logits(self, x: Tensor) -> Tensor:
        for layer, act in zip(self.layers, self.acts):
            x = act(layer(x))
        return self.out(x)

    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))


class ResidualEncoder(Module):
    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        trace_spatial(spec.input_dims, spec.strides)
        widths = [spec.in_channels, *spec.channel_widths]
        self.blocks = [
            ResidualBlock(a, b, s, rng=rng, dtype=dtype)
            for a, b, s in zip(widths[:-1], widths[1:], spec.strides)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return flatten(x)


def flat_features(spec: ModelSpec) -> int:
    final = trace_spatial(spec.input_dims, spec.strides)[-1]
    return spec.channel_widths[-1] * math.prod(final)


class Embedder(Module):
    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.spec = spec
        self.encoder = ResidualEncoder(spec, rng, dtype)
        widths = [flat_features(spec), *spec.dense_hidden, spec.embedding_dim]
        self.dense = [Dense(a, b, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.acts = [PReLU(b, dtype=dtype) for b in spec.dense_hidden]

    def raw(self, x: Tensor) -> Tensor:
        h = self.encoder(x)
        for i, layer in enumerate(self.dense):
            h = layer(h)
            if i < len(self.acts):
                h = self.acts[i](h)
        return h

    def forward(self, x: Tensor) -> Tensor:
        return l2_normalize_rows(self.raw(x))


class Classifier(MLPHead):
    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.spec = spec
        super().__init__(spec.embedding_dim, spec.classifier_hidden, rng, dtype)


class RCNNBaseline(Module):
    def __init__(self, spec: ModelSpec, rng, dtype=np.float32):
        self.spec = spec
        self.encoder = ResidualEncoder(spec, rng, dtype)
        self.head = MLPHead(flat_features(spec), spec.classifier_hidden, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encoder(x))


class RTCNN(Module):
    """Frozen-able embedder feeding the classifier; outputs P(mTBI)."""

    def __init__(self, embedder: Embedder, classifier: Classifier):
        if classifier.spec.embedding_dim != embedder.spec.embedding_dim:
            raise ConfigError("classifier input width does not match embedder output")
        self.embedder = embedder
        self.classifier = classifier

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.embedder(x))


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build_embedder(spec: ModelSpec, rng=0, dtype=np.float32) -> Embedder:
    if spec.variant != EMBEDDER:
        raise ConfigError(f"build_embedder needs variant {EMBEDDER!r}, got {spec.variant!r}")
    return Embedder(spec, _rng(rng), dtype)


def build_classifier(spec: ModelSpec, rng=0, dtype=np.float32) -> Classifier:
    if spec.embedding_dim < 1:
        raise ConfigError("classifier input width must be positive")
    return Classifier(spec, _rng(rng), dtype)


def build_rcnn_baseline(spec: ModelSpec, rng=0, dtype=np.float32) -> RCNNBaseline:
    if spec.variant != BASELINE:
        raise ConfigError(f"build_rcnn_baseline needs variant {BASELINE!r}, got {spec.variant!r}")
    return RCNNBaseline(spec, _rng(rng), dtype)


def build(spec: ModelSpec, rng=0, dtype=np.float32) -> Module:
    return {EMBEDDER: build_embedder, CLASSIFIER: build_classifier, BASELINE: build_rcnn_baseline}[spec.variant](
        spec, rng, dtype
    )


def classifier_spec_for(embedder_spec: ModelSpec) -> ModelSpec:
    return ModelSpec(
        variant=CLASSIFIER,
        input_dims=embedder_spec.input_dims,
        embedding_dim=embedder_spec.embedding_dim,
        classifier_hidden=list(embedder_spec.classifier_hidden),
    )


def parameter_count(network: Module) -> int:
    return sum(p.size for p in network.parameters())


@dataclass
class ParameterBundle:
    """Named parameters of one network; frozen entries get no optimizer updates."""

    params: dict[str, Parameter]

    @classmethod
    def of(cls, network: Module) -> "ParameterBundle":
        return cls(dict(network.named_parameters()))

    @property
    def frozen(self) -> set[str]:
        return {name for name, p in self.params.items() if p.frozen}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


# ----------------------------------------------------------------------
# memory accounting


def memory_report(network: Module, input_shape: Sequence[int], bytes_per_value: int = 4) -> dict:
    """Parameter and activation sizes for one sample, in Table-2 style columns.

    Activation bytes are measured from the tape: every intermediate tensor
    of one forward pass counts once for the forward value and once for its
    gradient.
    """
    from .tensor import _topological_order

    x = Tensor(np.zeros((1, *input_shape), dtype=np.float32))
    out = network(x)
    nodes = [t for t in _topological_order(out) if not t.is_leaf]
    activation_values = sum(t.size for t in nodes)
    n_params = parameter_count(network)
    mb = 1024.0**2
    input_mb = x.size * bytes_per_value / mb
    pass_mb = 2 * activation_values * bytes_per_value / mb
    params_mb = n_params * bytes_per_value / mb
    return {
        "parameters": n_params,
        "forward_backward_mb": pass_mb,
        "params_mb": params_mb,
        "total_mb": input_mb + pass_mb + params_mb,
    }


def format_memory_row(name: str, report: dict) -> str:
    return (
        f"{name:<16}{report['parameters']:>14,}{report['forward_backward_mb']:>12.2f}"
        f"{report['params_mb']:>10.2f}{report['total_mb']:>10.2f}"
    )


# ----------------------------------------------------------------------
# checkpoints

_CK_MAGIC = b"TVCK"
_CK_VERSION = 1
_CK_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(network: Module, path) -> None:
    spec: ModelSpec = network.spec  # type: ignore[attr-defined]
    tensors, chunks, offset = [], [], 0
    for name, p in network.named_parameters():
        blob = np.asarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps({"spec": spec.to_json(), "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_PREFIX.pack(_CK_MAGIC, _CK_VERSION, len(header)))
        fh.write(header)
        for blob in chunks:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> Module:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CK_PREFIX.unpack_from(raw)
    if magic != _CK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _CK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _CK_PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated JSON header")
    try:
        header = json.loads(raw[_CK_PREFIX.size : start].decode())
        spec = ModelSpec.from_json(header["spec"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    network = build(spec, 0, dtype)
    params = dict(network.named_parameters())
    payload = raw[start:]
    if [e["name"] for e in entries] != list(params):
        raise FormatError(f"{path}: tensor names do not match the network built from its spec")
    for e in entries:
        p = params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise FormatError(f"{path}: tensor {e['name']} has shape {e['shape']}, expected {list(p.shape)}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload) or e["nbytes"] != 4 * p.size:
            raise FormatError(f"{path}: truncated payload for tensor {e['name']}")
        p.data = np.frombuffer(payload[e["offset"] : end], dtype="<f4").reshape(p.shape).astype(dtype)
    return network
