"""Multi-view dataset ingestion, synthesis, and split management.

Feature matrices travel in the MVHF container: magic ``MVHF``, u32
version, u8 dtype code (1=f32, 2=f64, 3=u8), u64 rows, u64 cols, then
the row-major little-endian payload. A dataset on disk is one MVHF file
per view, a u8 MVHF label file, newline-delimited split index files,
and a JSON manifest tying them together.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

MVHF_MAGIC = b"MVHF"
MVHF_VERSION = 1
_HEADER = struct.Struct("<4sIBQQ")

_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_CODE_BY_KIND = {("f", 4): 1, ("f", 8): 2, ("u", 1): 3}


def write_matrix(path: str | Path, arr: np.ndarray) -> None:
    """Write a 2-D array as an MVHF v1 file (bit-exact round trip)."""
    arr = np.ascontiguousarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"MVHF holds 2-D matrices; got shape {arr.shape}")
    code = _CODE_BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValidationError(f"MVHF cannot store dtype {arr.dtype}")
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MVHF_MAGIC, MVHF_VERSION, code, arr.shape[0], arr.shape[1]))
        f.write(le.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    """Read an MVHF v1 file back into a fresh array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MVHF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MVHF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dtype = _DTYPE_BY_CODE.get(code)
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype code {code}")
    expected = rows * cols * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------

def _as_index_array(idx) -> np.ndarray:
    return np.asarray(idx, dtype=np.int64).reshape(-1)


@dataclass
class Split:
    """Disjoint train / retrieval / query row indices."""

    train: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    retrieval: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    query: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.train = _as_index_array(self.train)
        self.retrieval = _as_index_array(self.retrieval)
        self.query = _as_index_array(self.query)

    def parts(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "retrieval": self.retrieval, "query": self.query}


@dataclass
class MultiViewDataset:
    """Per-view feature matrices with aligned multi-hot labels."""

    views: list[np.ndarray]
    labels: np.ndarray
    split: Split = field(default_factory=Split)
    view_names: list[str] = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        if not self.views:
            raise ValidationError("dataset needs at least one view")
        if not self.view_names:
            self.view_names = [f"view{m}" for m in range(len(self.views))]
        if len(self.view_names) != len(self.views):
            raise ValidationError("view_names does not match view count")
        n = self.views[0].shape[0]
        for name, v in zip(self.view_names, self.views):
            if v.ndim != 2:
                raise ValidationError(f"view '{name}' is not a matrix")
            if v.shape[0] != n:
                raise ValidationError(
                    f"view '{name}' has {v.shape[0]} rows, expected {n}")
        if self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ValidationError(
                f"label matrix has {self.labels.shape[0]} rows, views have {n}")
        vals = np.unique(self.labels)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError("labels must be 0/1 multi-hot")
        empties = np.flatnonzero(self.labels.sum(axis=1) == 0)
        if empties.size:
            raise ValidationError(f"sample {empties[0]} has no positive label")
        seen: np.ndarray | None = None
        for part, idx in self.split.parts().items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"{part} split indexes outside [0, {n})")
            if seen is not None and np.intersect1d(seen, idx).size:
                raise ValidationError(f"{part} split overlaps another split")
            seen = idx if seen is None else np.concatenate([seen, idx])

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def view_dims(self) -> tuple[int, ...]:
        return tuple(v.shape[1] for v in self.views)


# ---------------------------------------------------------------------------
# manifest + disk round trip
# ---------------------------------------------------------------------------

@dataclass
class ViewSpec:
    name: str
    path: str
    dim: int


@dataclass
class Manifest:
    name: str
    views: list[ViewSpec]
    labels: str
    splits: dict[str, str]

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "views": [{"name": v.name, "path": v.path, "dim": v.dim} for v in self.views],
            "labels": self.labels,
            "splits": dict(self.splits),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        try:
            views = [ViewSpec(v["name"], v["path"], int(v["dim"])) for v in doc["views"]]
            return cls(doc["name"], views, doc["labels"], dict(doc["splits"]))
        except KeyError as e:
            raise ValidationError(f"manifest is missing field {e}") from e


def _read_split_file(path: Path) -> np.ndarray:
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    return np.array([int(ln) for ln in lines], dtype=np.int64)


def _write_split_file(path: Path, idx: np.ndarray) -> None:
    path.write_text("".join(f"{i}\n" for i in idx))


def load(manifest_path: str | Path) -> MultiViewDataset:
    """Load a dataset described by a manifest, enforcing all invariants."""
    manifest_path = Path(manifest_path)
    manifest = Manifest.from_json(manifest_path.read_text())
    base = manifest_path.parent

    views, names = [], []
    for spec in manifest.views:
        mat = read_matrix(base / spec.path)
        if mat.shape[1] != spec.dim:
            raise ValidationError(
                f"view '{spec.name}': file has {mat.shape[1]} cols, "
                f"manifest declares {spec.dim}")
        views.append(mat.astype(np.float64, copy=False))
        names.append(spec.name)

    labels = read_matrix(base / manifest.labels)
    unknown = set(manifest.splits) - {"train", "retrieval", "query"}
    if unknown:
        raise ValidationError(f"manifest has unknown split names: {sorted(unknown)}")
    split = Split(**{
        part: _read_split_file(base / rel) for part, rel in manifest.splits.items()
    })
    return MultiViewDataset(views, labels, split, names, manifest.name)


def save(ds: MultiViewDataset, out_dir: str | Path) -> Path:
    """Write a dataset plus manifest into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = []
    for name, mat in zip(ds.view_names, ds.views):
        rel = f"view_{name}.mvhf"
        write_matrix(out / rel, mat)
        specs.append(ViewSpec(name, rel, mat.shape[1]))
    write_matrix(out / "labels.mvhf", ds.labels.astype(np.uint8, copy=False))
    splits = {}
    for part, idx in ds.split.parts().items():
        rel = f"split_{part}.txt"
        _write_split_file(out / rel, idx)
        splits[part] = rel
    manifest = Manifest(ds.name, specs, "labels.mvhf", splits)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(manifest.to_json())
    return manifest_path


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Class-conditional Gaussian clusters with a noise-only dimension block.

    ``noise_fraction`` of each view's dimensions carry label-independent
    noise; the rest hold the class signal. With ``correlated_noise`` the
    noise block is driven half by a latent shared across views, modeling
    redundancy that per-dimension gating can learn to suppress.
    """

    n_samples: int
    view_dims: tuple[int, ...]
    n_classes: int
    labels_per_sample: tuple[int, int] = (1, 1)
    noise_fraction: tuple[float, ...] = (0.0,)
    seed: int = 0
    class_sep: float = 1.0
    signal_noise: float = 1.0
    noise_scale: float = 1.0
    correlated_noise: bool = False
    view_signal_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        self.view_dims = tuple(int(d) for d in self.view_dims)
        if isinstance(self.noise_fraction, (int, float)):
            self.noise_fraction = (float(self.noise_fraction),) * len(self.view_dims)
        self.noise_fraction = tuple(float(f) for f in self.noise_fraction)
        if len(self.noise_fraction) == 1 and len(self.view_dims) > 1:
            self.noise_fraction = self.noise_fraction * len(self.view_dims)
        if isinstance(self.labels_per_sample, int):
            self.labels_per_sample = (self.labels_per_sample, self.labels_per_sample)
        if self.view_signal_scale is None:
            self.view_signal_scale = (1.0,) * len(self.view_dims)
        self.view_signal_scale = tuple(float(s) for s in self.view_signal_scale)

        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if any(d < 1 for d in self.view_dims):
            raise ConfigError("view dims must be >= 1")
        if len(self.noise_fraction) != len(self.view_dims):
            raise ConfigError("need one noise fraction per view")
        if any(not 0.0 <= f <= 1.0 for f in self.noise_fraction):
            raise ConfigError("noise fractions must lie in [0, 1]")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        lo, hi = self.labels_per_sample
        if not (1 <= lo <= hi <= self.n_classes):
            raise ConfigError("labels_per_sample must satisfy 1 <= lo <= hi <= n_classes")
        if len(self.view_signal_scale) != len(self.view_dims):
            raise ConfigError("need one signal scale per view")


def synth(cfg: SynthConfig) -> MultiViewDataset:
    """Generate a dataset; a pure function of the config (seed included)."""
    rng = np.random.default_rng(cfg.seed)
    n, c = cfg.n_samples, cfg.n_classes
    lo, hi = cfg.labels_per_sample

    labels = np.zeros((n, c), dtype=np.uint8)
    counts = rng.integers(lo, hi + 1, size=n)
    for i in range(n):
        labels[i, rng.choice(c, size=counts[i], replace=False)] = 1

    max_noise = max(int(round(f * d)) for f, d in zip(cfg.noise_fraction, cfg.view_dims))
    shared = rng.standard_normal((n, max_noise)) if cfg.correlated_noise and max_noise else None

    label_f = labels.astype(np.float64)
    per_sample = label_f.sum(axis=1, keepdims=True)

    views = []
    for d, frac, scale in zip(cfg.view_dims, cfg.noise_fraction, cfg.view_signal_scale):
        n_noise = int(round(frac * d))
        n_sig = d - n_noise
        centroids = rng.normal(0.0, cfg.class_sep, size=(c, n_sig)) * scale
        signal = (label_f @ centroids) / per_sample
        signal = signal + rng.normal(0.0, cfg.signal_noise, size=(n, n_sig))
        own = rng.standard_normal((n, n_noise))
        if shared is not None and n_noise:
            noise = cfg.noise_scale * (shared[:, :n_noise] + own) / np.sqrt(2.0)
        else:
            noise = cfg.noise_scale * own
        views.append(np.ascontiguousarray(np.hstack([signal, noise])))

    return MultiViewDataset(views, labels, Split(), name="synthetic")


def split(ds: MultiViewDataset, sizes: tuple[int, int, int], seed: int) -> MultiViewDataset:
    """Assign disjoint shuffled train/retrieval/query indices of the given sizes."""
    n_train, n_retr, n_query = (int(s) for s in sizes)
    total = n_train + n_retr + n_query
    if min(n_train, n_retr, n_query) < 0:
        raise ConfigError("split sizes must be non-negative")
    if total > ds.n_samples:
        raise ConfigError(
            f"split sizes sum to {total} but dataset has {ds.n_samples} samples")
    perm = np.random.default_rng(seed).permutation(ds.n_samples)
    new_split = Split(
        train=perm[:n_train],
        retrieval=perm[n_train:n_train + n_retr],
        query=perm[n_train + n_retr:total],
    )
    return MultiViewDataset(ds.views, ds.labels, new_split, ds.view_names, ds.name)


# ---------------------------------------------------------------------------
# per-view z-score normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-12


def view_stats(views: Sequence[np.ndarray], rows: np.ndarray | None = None):
    """Per-view column mean/std, computed over ``rows`` (default: all)."""
    stats = []
    for v in views:
        sub = v if rows is None or rows.size == 0 else v[rows]
        mean = sub.mean(axis=0, keepdims=True)
        std = np.maximum(sub.std(axis=0, keepdims=True), STD_FLOOR)
        stats.append((mean, std))
    return stats


def apply_view_stats(views: Sequence[np.ndarray], stats) -> list[np.ndarray]:
    return [(v - mean) / std for v, (mean, std) in zip(views, stats)]
