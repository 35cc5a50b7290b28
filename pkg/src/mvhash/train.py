"""Mini-batch gradient training with seeded determinism and resume.

Every number the trainer emits is a pure function of (dataset, configs,
seed): epoch shuffles are derived from (seed, epoch) rather than a
stateful RNG, so a run restored from a checkpoint at epoch e continues
bit-identically to one that never stopped. Wall-clock timing is only
recorded when a clock is injected, keeping default outputs reproducible
byte for byte.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as data_mod
from . import loss as loss_mod
from . import model as model_mod
from . import nd, retrieval
from .errors import ConfigError, NumericalAbort

OPTIMIZERS = ("sgd", "adam")

METRICS_HEADER = "epoch,l_sim,l_clf,l_total,map,seconds"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mu: float = 1.0
    seed: int = 0
    eval_every: int = 10
    clip_norm: float = 0.0
    normalize: bool = True
    include_diagonal: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")


@dataclass
class EpochRecord:
    epoch: int
    l_sim: float
    l_clf: float
    l_total: float
    map: float | None = None
    seconds: float | None = None


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    kind = "sgd"

    def apply(self, params: model_mod.ModelParams, grads: dict[str, np.ndarray],
              lr: float) -> None:
        for name, t in params.tensors.items():
            t.data = t.data - lr * grads[name]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def state_meta(self) -> dict:
        return {"kind": self.kind}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        pass


class Adam:
    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def apply(self, params: model_mod.ModelParams, grads: dict[str, np.ndarray],
              lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, t in params.tensors.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def state_meta(self) -> dict:
        return {"kind": self.kind, "step_count": self.step_count}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.step_count = int(meta.get("step_count", 0))
        for name, arr in tensors.items():
            if name.startswith("opt.m."):
                self.m[name[len("opt.m."):]] = arr.copy()
            elif name.startswith("opt.v."):
                self.v[name[len("opt.v."):]] = arr.copy()


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd()
    return Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)


def step(params: model_mod.ModelParams, grads: dict[str, np.ndarray],
         optimizer_state, lr: float) -> None:
    """Apply one optimizer update in place."""
    missing = set(params.tensors) - set(grads)
    if missing:
        raise ConfigError(f"gradient map is missing parameters: {sorted(missing)}")
    for name, t in params.tensors.items():
        if grads[name].shape != t.shape:
            raise ConfigError(
                f"gradient for {name} has shape {grads[name].shape}, "
                f"parameter is {t.shape}")
    optimizer_state.apply(params, grads, lr)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Global-norm clipping; returns fresh arrays only when clipping bites."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _epoch_batches(train_idx: np.ndarray, batch_size: int, seed: int,
                   epoch: int) -> list[np.ndarray]:
    """Seeded reshuffle, then contiguous batches; a trailing singleton is
    merged into the previous batch so the pairwise loss stays meaningful."""
    order = np.random.default_rng([seed, 1, epoch]).permutation(train_idx)
    batches = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _batch_views(views: Sequence[np.ndarray], config: model_mod.ModelConfig,
                 idx: np.ndarray) -> list:
    out: list = [None] * len(views)
    for m in config.views_enabled:
        out[m] = views[m][idx]
    return out


@dataclass
class TrainResult:
    params: model_mod.ModelParams
    records: list[EpochRecord]
    optimizer: object
    view_stats: list | None
    model_config: model_mod.ModelConfig
    train_config: TrainConfig
    final_epoch: int = 0

    def stats_tensors(self) -> dict[str, np.ndarray]:
        if self.view_stats is None:
            return {}
        out = {}
        for m, (mean, std) in enumerate(self.view_stats):
            out[f"norm.mean.{m}"] = mean
            out[f"norm.std.{m}"] = std
        return out

    def save_checkpoint(self, path: str | Path) -> None:
        extras = dict(self.stats_tensors())
        extras.update(self.optimizer.state_tensors())
        meta = {
            "epoch": self.final_epoch,
            "optimizer": self.optimizer.state_meta(),
            "train_config": asdict(self.train_config),
            "normalize": self.train_config.normalize,
        }
        model_mod.save_checkpoint(self.params, path, extras, meta)


def stats_from_checkpoint(ckpt: model_mod.Checkpoint) -> list | None:
    """Recover per-view normalization stats stored alongside the weights."""
    if not ckpt.meta.get("normalize"):
        return None
    extras = ckpt.extras()
    stats = []
    m = 0
    while f"norm.mean.{m}" in extras:
        stats.append((extras[f"norm.mean.{m}"], extras[f"norm.std.{m}"]))
        m += 1
    return stats or None


def train(dataset: data_mod.MultiViewDataset, model_config: model_mod.ModelConfig,
          train_config: TrainConfig, resume: model_mod.Checkpoint | None = None,
          clock: Callable[[], float] | None = None,
          map_cutoff: int | None = None) -> TrainResult:
    """Fit the model on the train split; returns params plus the epoch curve.

    With ``resume`` the stored weights, optimizer state, and
    normalization stats continue from the recorded epoch; running
    (stop + resume) equals one straight run bit-exactly because every
    epoch's shuffle depends only on (seed, epoch).
    """
    if dataset.split.train.size == 0:
        raise ConfigError("dataset has no train split")
    if tuple(dataset.view_dims) != tuple(model_config.view_dims):
        raise ConfigError(
            f"dataset views {dataset.view_dims} do not match model "
            f"{model_config.view_dims}")
    cfg = train_config

    if resume is not None:
        params = resume.params()
        optimizer = make_optimizer(cfg)
        opt_meta = resume.meta.get("optimizer", {})
        if opt_meta.get("kind") != optimizer.kind:
            raise ConfigError(
                f"checkpoint was trained with {opt_meta.get('kind')}, "
                f"config says {optimizer.kind}")
        optimizer.load_state(resume.extras(), opt_meta)
        start_epoch = int(resume.meta.get("epoch", 0)) + 1
        stats = stats_from_checkpoint(resume)
    else:
        params = model_mod.ModelParams.init(model_config, cfg.seed)
        optimizer = make_optimizer(cfg)
        start_epoch = 1
        stats = data_mod.view_stats(dataset.views, dataset.split.train) \
            if cfg.normalize else None

    views = data_mod.apply_view_stats(dataset.views, stats) if stats else dataset.views
    labels = dataset.labels
    n_train = dataset.split.train.size

    records: list[EpochRecord] = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = clock() if clock else None
        sums = np.zeros(3)
        for b, idx in enumerate(_epoch_batches(dataset.split.train, cfg.batch_size,
                                               cfg.seed, epoch)):
            tape = nd.Tape()
            bound = params.bind(tape)
            # divergence shows up as inf/nan in the loss and aborts below;
            # numpy's overflow warnings would only duplicate that signal
            with np.errstate(over="ignore", invalid="ignore"):
                trace = model_mod.forward_bound(
                    bound, model_config, _batch_views(views, model_config, idx))
                phi = loss_mod.affinity(labels[idx])
                l_sim = loss_mod.sim_loss(trace.hash_act, phi, cfg.include_diagonal)
                l_clf = loss_mod.clf_loss(trace.class_scores, labels[idx])
                breakdown = loss_mod.total_loss(l_sim, l_clf, cfg.mu)
            if not np.isfinite(breakdown.l_total):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} batch {b}: "
                    f"l_sim={breakdown.l_sim} l_clf={breakdown.l_clf}")
            gmap = nd.backward(breakdown.tensor)
            grads = {name: gmap[t] for name, t in bound.items()}
            if cfg.clip_norm > 0:
                grads = clip_gradients(grads, cfg.clip_norm)
            step(params, grads, optimizer, cfg.learning_rate)
            sums += idx.size * np.array(
                [breakdown.l_sim, breakdown.l_clf, breakdown.l_total])

        mean_sim, mean_clf, mean_total = sums / n_train
        epoch_map = None
        want_eval = cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs)
        if want_eval and dataset.split.query.size and dataset.split.retrieval.size:
            epoch_map = evaluate_map(params, model_config, views, labels,
                                     dataset.split.query, dataset.split.retrieval,
                                     cutoff=map_cutoff)
        records.append(EpochRecord(
            epoch=epoch, l_sim=float(mean_sim), l_clf=float(mean_clf),
            l_total=float(mean_total), map=epoch_map,
            seconds=(clock() - t0) if clock else None))

    final_epoch = records[-1].epoch if records else start_epoch - 1
    return TrainResult(params, records, optimizer, stats, model_config, cfg,
                       final_epoch)


def encode_rows(params: model_mod.ModelParams, config: model_mod.ModelConfig,
                views: Sequence[np.ndarray], rows: np.ndarray,
                chunk: int = 2048) -> np.ndarray:
    """Binarized codes for the given dataset rows, in row order."""
    out = np.empty((rows.size, config.k))
    for start in range(0, rows.size, chunk):
        idx = rows[start:start + chunk]
        trace = model_mod.forward(params, config, _batch_views(views, config, idx))
        out[start:start + idx.size] = model_mod.binarize(trace.hash_act)
    return out


def evaluate_map(params, config, views, labels, query_idx, bank_idx,
                 cutoff: int | None = None) -> float:
    """mAP of query rows against bank rows using binarized codes only."""
    query = retrieval.CodeBank.from_codes(
        encode_rows(params, config, views, query_idx), labels[query_idx])
    bank = retrieval.CodeBank.from_codes(
        encode_rows(params, config, views, bank_idx), labels[bank_idx])
    return retrieval.evaluate(query, bank, cutoff=cutoff).map


# ---------------------------------------------------------------------------
# metrics CSV
# ---------------------------------------------------------------------------

def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def write_metrics_csv(records: Sequence[EpochRecord], path: str | Path) -> None:
    lines = [METRICS_HEADER]
    for r in records:
        lines.append(f"{r.epoch},{r.l_sim!r},{r.l_clf!r},{r.l_total!r},"
                     f"{_fmt(r.map)},{_fmt(r.seconds)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> list[EpochRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ConfigError(f"{path}: not a metrics CSV")
    records = []
    for line in lines[1:]:
        epoch, l_sim, l_clf, l_total, map_s, sec_s = line.split(",")
        records.append(EpochRecord(
            epoch=int(epoch), l_sim=float(l_sim), l_clf=float(l_clf),
            l_total=float(l_total), map=float(map_s) if map_s else None,
            seconds=float(sec_s) if sec_s else None))
    return records
