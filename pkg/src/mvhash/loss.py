"""Training objectives: pairwise cosine-affinity matching plus a linear
classifier penalty, combined with a weight ``mu``.

The affinity target for a pair of samples is ``2/(1+exp(-y_i.y_j)) - 1``
over their 0/1 label vectors: exactly 0 for disjoint labels, rising
toward 1 as they share more. The similarity loss drives the cosine of
hash activations toward that target, averaged over all ordered pairs in
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .errors import ConfigError, ShapeError, ValidationError


def affinity(labels_batch: np.ndarray) -> np.ndarray:
    """Pairwise label-agreement targets in [0, 1) for a 0/1 label batch."""
    lab = np.asarray(labels_batch)
    if lab.ndim != 2:
        raise ValidationError(f"labels must be a matrix, got shape {lab.shape}")
    if not np.isin(np.unique(lab), (0, 1)).all():
        raise ValidationError("labels must contain only 0/1 entries")
    lab = lab.astype(np.float64)
    gram = lab @ lab.T
    phi = 2.0 / (1.0 + np.exp(-gram)) - 1.0
    # float64 rounds the formula to exactly 1.0 once the dot exceeds ~36;
    # clamp to the largest double below 1 to keep the open upper bound
    return np.minimum(phi, np.nextafter(1.0, 0.0))


def sim_loss(h: nd.Tensor, phi: np.ndarray, include_diagonal: bool = True) -> nd.Tensor:
    """Mean squared gap between rowwise cosines of ``h`` and the targets.

    Averages over all S^2 ordered pairs; ``include_diagonal=False``
    drops the i==j pairs and averages over S^2-S instead.
    """
    s = h.rows
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (s, s):
        raise ShapeError(f"affinity is {phi.shape}, batch needs ({s}, {s})")
    diff = nd.sub(nd.rowwise_cosine(h), nd.Tensor(phi))
    sq = nd.elementwise(diff, diff, "mul")
    if include_diagonal:
        return nd.const_scale(nd.sum_all(sq), 1.0 / (s * s))
    if s < 2:
        raise ConfigError("off-diagonal similarity loss needs a batch of >= 2")
    mask = np.ones((s, s)) - np.eye(s)
    off = nd.elementwise(sq, nd.Tensor(mask), "mul")
    return nd.const_scale(nd.sum_all(off), 1.0 / (s * s - s))


def clf_loss(y_pred: nd.Tensor, y_true: np.ndarray) -> nd.Tensor:
    """Mean over samples of the squared L2 gap to the label vector."""
    truth = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != truth.shape:
        raise ShapeError(f"predictions {y_pred.shape} vs labels {truth.shape}")
    diff = nd.sub(y_pred, nd.Tensor(truth))
    sq = nd.elementwise(diff, diff, "mul")
    return nd.const_scale(nd.sum_all(sq), 1.0 / y_pred.rows)


@dataclass
class LossBreakdown:
    l_sim: float
    l_clf: float
    mu: float
    l_total: float
    tensor: nd.Tensor | None = None


def total_loss(l_sim, l_clf, mu: float) -> LossBreakdown:
    """Weighted sum of the two losses; keeps the parts for logging.

    Accepts recorded 1x1 tensors (training path, combined on the tape)
    or plain floats.
    """
    mu = float(mu)
    if mu < 0:
        raise ConfigError(f"loss weight mu must be >= 0, got {mu}")
    if isinstance(l_sim, nd.Tensor):
        combined = nd.add(l_sim, nd.const_scale(l_clf, mu))
        return LossBreakdown(l_sim.item(), l_clf.item(), mu, combined.item(), combined)
    return LossBreakdown(float(l_sim), float(l_clf), mu, float(l_sim) + mu * float(l_clf))
