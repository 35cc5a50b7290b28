"""Forward graph for gated multi-view hashing.

Pipeline per enabled view: two-layer encoder (relu hidden, tanh out) ->
sigmoid confidence gate multiplied elementwise -> fusion across views
(trainable per-view scalar weights, plain sum, or concatenation) ->
expand/contract residual block -> tanh hash layer -> linear classifier
head used only at train time. Ablation flags drop individual stages.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nd
from .errors import ConfigError, FormatError, ShapeError

FUSION_KINDS = ("weighted_sum", "concat")

CHECKPOINT_MAGIC = b"MVCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    view_dims: tuple[int, ...]
    n_classes: int
    d: int = 512
    k: int = 16
    use_gate: bool = True
    use_adaptive: bool = True
    use_dilation: bool = True
    views_enabled: tuple[int, ...] | None = None
    fusion: str = "weighted_sum"
    shared_gate: bool = False

    def __post_init__(self):
        self.view_dims = tuple(int(x) for x in self.view_dims)
        if not self.view_dims or any(x < 1 for x in self.view_dims):
            raise ConfigError(f"bad view dims {self.view_dims}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.d < 1:
            raise ConfigError(f"embedding dim must be positive, got {self.d}")
        if self.k < 1:
            raise ConfigError(f"code bits must be positive, got {self.k}")
        if self.views_enabled is None:
            self.views_enabled = tuple(range(len(self.view_dims)))
        self.views_enabled = tuple(sorted(int(m) for m in self.views_enabled))
        if not self.views_enabled:
            raise ConfigError("at least one view must be enabled")
        if any(m < 0 or m >= len(self.view_dims) for m in self.views_enabled):
            raise ConfigError(f"views_enabled {self.views_enabled} out of range")
        if len(set(self.views_enabled)) != len(self.views_enabled):
            raise ConfigError("views_enabled has duplicates")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}")
        if self.fusion == "concat" and self.use_adaptive:
            raise ConfigError("concat fusion requires use_adaptive=False")

    @property
    def n_views(self) -> int:
        return len(self.view_dims)

    @property
    def fused_dim(self) -> int:
        if self.fusion == "concat":
            return self.d * len(self.views_enabled)
        return self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["view_dims"] = tuple(doc["view_dims"])
        if doc.get("views_enabled") is not None:
            doc["views_enabled"] = tuple(doc["views_enabled"])
        return cls(**doc)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Canonical parameter directory for a config, in creation order."""
    d, k = config.d, config.k
    fd = config.fused_dim
    shapes: dict[str, tuple[int, int]] = {}
    for m in config.views_enabled:
        dm = config.view_dims[m]
        shapes[f"enc.{m}.w1"] = (dm, d)
        shapes[f"enc.{m}.b1"] = (1, d)
        shapes[f"enc.{m}.w2"] = (d, d)
        shapes[f"enc.{m}.b2"] = (1, d)
    if config.use_gate:
        if config.shared_gate:
            shapes["gate.w"] = (d, d)
            shapes["gate.b"] = (1, d)
        else:
            for m in config.views_enabled:
                shapes[f"gate.{m}.w"] = (d, d)
                shapes[f"gate.{m}.b"] = (1, d)
    if config.use_adaptive:
        for m in config.views_enabled:
            shapes[f"view_weight.{m}"] = (1, 1)
    if config.use_dilation:
        shapes["dilation.w1"] = (fd, 4 * fd)
        shapes["dilation.b1"] = (1, 4 * fd)
        shapes["dilation.w2"] = (4 * fd, fd)
        shapes["dilation.b2"] = (1, fd)
    shapes["hash.w"] = (fd, k)
    shapes["hash.b"] = (1, k)
    shapes["classifier.w"] = (k, config.n_classes)
    shapes["classifier.b"] = (1, config.n_classes)
    return shapes


class ModelParams:
    """Named trainable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, nd.Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(
                    f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Seeded init: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases,
        view weights 1/(enabled view count)."""
        rng = np.random.default_rng([int(seed), 0])
        n_enabled = len(config.views_enabled)
        tensors = {}
        for name, (r, c) in param_shapes(config).items():
            if name.startswith("view_weight."):
                arr = np.full((r, c), 1.0 / n_enabled)
            elif ".b" in name:
                arr = np.zeros((r, c))
            else:
                bound = np.sqrt(6.0 / (r + c))
                arr = rng.uniform(-bound, bound, size=(r, c))
            tensors[name] = nd.Tensor(arr)
        return cls(config, tensors)

    def bind(self, tape: nd.Tape) -> dict[str, nd.Tensor]:
        """Register every parameter as a leaf on ``tape``; returns recording twins."""
        return {name: tape.leaf(t) for name, t in self.tensors.items()}

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.config, {n: nd.Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, aligned with enabled views."""

    encoded: list[nd.Tensor]
    gate_weights: list[nd.Tensor]
    gated: list[nd.Tensor]
    fused: nd.Tensor
    expanded: nd.Tensor | None
    enhanced: nd.Tensor
    hash_act: nd.Tensor
    class_scores: nd.Tensor


def _tensors(params) -> Mapping[str, nd.Tensor]:
    return params.tensors if isinstance(params, ModelParams) else params


def encode_view(params, m: int, z: nd.Tensor) -> nd.Tensor:
    """Two-layer encoder: tanh(relu(z W1 + b1) W2 + b2), output in (-1, 1)."""
    t = _tensors(params)
    hidden = nd.relu(nd.add_row_broadcast(nd.matmul(z, t[f"enc.{m}.w1"]), t[f"enc.{m}.b1"]))
    return nd.tanh(nd.add_row_broadcast(nd.matmul(hidden, t[f"enc.{m}.w2"]), t[f"enc.{m}.b2"]))


def gate_view(params, m: int, e: nd.Tensor) -> tuple[nd.Tensor, nd.Tensor]:
    """Per-dimension confidence weights in (0,1) and the gated features.

    With the gate ablated (no gate parameters) the weights are all ones
    and the features pass through unchanged.
    """
    t = _tensors(params)
    if f"gate.{m}.w" in t:
        w_g, b_g = t[f"gate.{m}.w"], t[f"gate.{m}.b"]
    elif "gate.w" in t:
        w_g, b_g = t["gate.w"], t["gate.b"]
    else:
        return nd.Tensor(np.ones(e.shape)), e
    w = nd.sigmoid(nd.add_row_broadcast(nd.matmul(e, w_g), b_g))
    return w, nd.elementwise(w, e, "mul")


def fuse(params, config: ModelConfig, gated: Sequence[nd.Tensor]) -> nd.Tensor:
    """Combine per-view gated features into one representation."""
    t = _tensors(params)
    if len(gated) != len(config.views_enabled):
        raise ShapeError(
            f"fuse: got {len(gated)} views, config enables {len(config.views_enabled)}")
    if config.fusion == "concat":
        if config.use_adaptive:
            raise ConfigError("concat fusion cannot use adaptive view weights")
        return nd.hstack(list(gated))
    acc = None
    for m, c in zip(config.views_enabled, gated):
        term = nd.scalar_scale(c, t[f"view_weight.{m}"]) if config.use_adaptive else c
        acc = term if acc is None else nd.add(acc, term)
    return acc


def dilate(params, a: nd.Tensor) -> nd.Tensor:
    """Expand/contract residual block; identity when ablated."""
    _, g = _dilate_parts(params, a)
    return g


def _dilate_parts(params, a: nd.Tensor) -> tuple[nd.Tensor | None, nd.Tensor]:
    t = _tensors(params)
    if "dilation.w1" not in t:
        return None, a
    u = nd.relu(nd.add_row_broadcast(nd.matmul(a, t["dilation.w1"]), t["dilation.b1"]))
    g = nd.add(nd.add_row_broadcast(nd.matmul(u, t["dilation.w2"]), t["dilation.b2"]), a)
    return u, g


def hash_forward(params, g: nd.Tensor) -> nd.Tensor:
    """Continuous hash activations tanh(g W + b), entries in (-1, 1)."""
    t = _tensors(params)
    return nd.tanh(nd.add_row_broadcast(nd.matmul(g, t["hash.w"]), t["hash.b"]))


def binarize(h) -> np.ndarray:
    """Snap activations to {-1,+1} codes; sign(0) is +1."""
    arr = h.data if isinstance(h, nd.Tensor) else np.asarray(h, dtype=np.float64)
    return np.where(arr >= 0.0, 1.0, -1.0)


def classify(params, h: nd.Tensor) -> nd.Tensor:
    """Linear classifier head over hash activations (no activation)."""
    t = _tensors(params)
    return nd.add_row_broadcast(nd.matmul(h, t["classifier.w"]), t["classifier.b"])


def forward(params: ModelParams, config: ModelConfig, views: Sequence,
            tape: nd.Tape | None = None) -> ForwardTrace:
    """Run the full pipeline over a batch; records on ``tape`` when given.

    ``views`` holds one matrix per dataset view (disabled entries may be
    None); only the enabled ones are read.
    """
    t = params.bind(tape) if tape is not None else _tensors(params)
    return forward_bound(t, config, views)


def forward_bound(t: Mapping[str, nd.Tensor], config: ModelConfig,
                  views: Sequence) -> ForwardTrace:
    """Forward pass over an explicit name->tensor mapping (bound or raw)."""
    encoded, weights, gated = [], [], []
    for m in config.views_enabled:
        z = views[m]
        if z is None:
            raise ShapeError(f"view {m} is enabled but missing from the batch")
        if not isinstance(z, nd.Tensor):
            z = nd.Tensor(z)
        if z.cols != config.view_dims[m]:
            raise ShapeError(
                f"view {m} has width {z.cols}, model expects {config.view_dims[m]}")
        e = encode_view(t, m, z)
        w, c = gate_view(t, m, e)
        encoded.append(e)
        weights.append(w)
        gated.append(c)
    fused = fuse(t, config, gated)
    expanded, enhanced = _dilate_parts(t, fused)
    h = hash_forward(t, enhanced)
    scores = classify(t, h)
    return ForwardTrace(encoded, weights, gated, fused, expanded, enhanced, h, scores)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Byte layout: magic "MVCK" | u32 LE header length | header JSON (UTF-8) |
# concatenated float64 little-endian tensor payloads. The header holds
# {"format_version", "config", "meta", "tensors": {name: [rows, cols,
# offset]}} with offsets relative to the payload start; payload order is
# sorted tensor name.

_CKPT_PREFIX = struct.Struct("<4sI")


def save_checkpoint(params: ModelParams, path: str | Path,
                    extra_tensors: Mapping[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    entries: dict[str, np.ndarray] = {n: t.data for n, t in params.tensors.items()}
    for name, arr in (extra_tensors or {}).items():
        if name in entries:
            raise ConfigError(f"extra tensor name collides with a parameter: {name}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"extra tensor {name} must be 2-D, got {arr.shape}")
        entries[name] = arr

    directory: dict[str, list[int]] = {}
    offset = 0
    ordered = sorted(entries)
    for name in ordered:
        r, c = entries[name].shape
        directory[name] = [r, c, offset]
        offset += r * c * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "meta": meta or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, len(blob)))
        f.write(blob)
        for name in ordered:
            f.write(np.ascontiguousarray(entries[name], dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    config: ModelConfig
    meta: dict
    tensors: dict[str, np.ndarray] = field(repr=False)

    def params(self) -> ModelParams:
        names = set(param_shapes(self.config))
        return ModelParams(
            self.config,
            {n: nd.Tensor(self.tensors[n]) for n in names if n in self.tensors})

    def extras(self) -> dict[str, np.ndarray]:
        names = set(param_shapes(self.config))
        return {n: a for n, a in self.tensors.items() if n not in names}


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if len(raw) < _CKPT_PREFIX.size + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(raw[_CKPT_PREFIX.size:_CKPT_PREFIX.size + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('format_version')}")
    payload = raw[_CKPT_PREFIX.size + hlen:]
    expected = sum(r * c * 8 for r, c, _ in header["tensors"].values())
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, directory implies {expected}")
    tensors = {}
    for name, (r, c, off) in header["tensors"].items():
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=r * c,
                                      offset=off).reshape(r, c).copy()
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(config, header.get("meta", {}), tensors)
