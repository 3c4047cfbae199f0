"""Training objectives: token cross-entropy, Siamese contrastive, and their blend."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError, VocabularyError
from .nncore import autograd as ag
from .nncore.autograd import Tensor
from .nncore.vocab import PAD


@dataclass
class LossValue:
    """A differentiable scalar plus the bookkeeping that produced it."""

    tensor: Tensor
    components: dict = field(default_factory=dict)

    @property
    def scalar(self) -> float:
        return float(self.tensor.data)

    def backward(self):
        ag.backward(self.tensor)


def cross_entropy(logits, targets, pad_id: int = PAD) -> LossValue:
    """Mean negative log-likelihood over non-pad target positions."""
    logits = ag.as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 3 or logits.shape[:2] != t.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {t.shape}")
    M = logits.shape[2]
    if t.min() < 0 or t.max() >= M:
        raise VocabularyError(f"target id out of range [0, {M})")
    mask = t != pad_id
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")

    z = logits.data - logits.data.max(axis=2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    picked = np.take_along_axis(logp, t[:, :, None], axis=2)[:, :, 0]
    value = -(picked * mask).sum() / count

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[:, :, None], np.take_along_axis(p, t[:, :, None], axis=2) - 1, axis=2)
        return (p * (mask[:, :, None] * (g / count)),)

    out = ag._make(np.asarray(value, dtype=logits.dtype), (logits,), back)
    return LossValue(out, {"cross_entropy": float(value)})


def euclidean_distance(a, b) -> Tensor:
    """Row-wise ``||a_i - b_i||_2`` for ``(N, E)`` inputs."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"euclidean_distance needs equal (N, E) shapes, got {a.shape} and {b.shape}")
    return ag.row_norm(ag.sub(a, b))


@dataclass
class ContrastiveBatch:
    embeddings_a: Tensor
    embeddings_b: Tensor
    labels: np.ndarray
    margin: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.labels.ndim != 1 or len(self.labels) < 1:
            raise ShapeError("labels must be a non-empty vector")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("contrastive labels must be 0 or 1")


def contrastive(batch: ContrastiveBatch) -> LossValue:
    """Mean of ``y D^2 + (1 - y) max(0, m - D)^2`` over the pairs."""
    a = ag.as_tensor(batch.embeddings_a)
    d = euclidean_distance(a, batch.embeddings_b)
    if len(batch.labels) != d.shape[0]:
        raise ShapeError(f"{len(batch.labels)} labels for {d.shape[0]} pairs")
    y = batch.labels.astype(a.dtype)
    pos = ag.mul(y, ag.square(d))
    neg = ag.mul(1 - y, ag.square(ag.relu(ag.sub(float(batch.margin), d))))
    loss = ag.mean(ag.add(pos, neg))
    dist = d.data
    comps = {
        "contrastive": float(loss.data),
        "margin": float(batch.margin),
        "mean_pos_d": float(dist[y == 1].mean()) if (y == 1).any() else None,
        "mean_neg_d": float(dist[y == 0].mean()) if (y == 0).any() else None,
    }
    return LossValue(loss, comps)


def soli_loss(contrastive_loss: LossValue, cross_entropy_loss: LossValue,
              gamma: float = 1.0, lam: float = 1.0) -> LossValue:
    """``gamma * contrastive + lam * cross_entropy`` with the parts retained."""
    if gamma < 0 or lam < 0:
        raise ConfigError(f"gamma and lambda must be >= 0, got {gamma}, {lam}")
    if gamma == 0 and lam == 0:
        raise ConfigError("gamma and lambda cannot both be zero")
    dtype = contrastive_loss.tensor.dtype
    total = ag.add(ag.mul(contrastive_loss.tensor, np.asarray(gamma, dtype)),
                   ag.mul(cross_entropy_loss.tensor, np.asarray(lam, dtype)))
    comps = dict(contrastive_loss.components)
    comps.update(cross_entropy_loss.components)
    comps.update({
        "contrastive": contrastive_loss.scalar,
        "cross_entropy": cross_entropy_loss.scalar,
        "gamma": float(gamma),
        "lambda": float(lam),
        "combined": float(total.data),
    })
    return LossValue(total, comps)


def mean_of(losses: list[LossValue], key: str) -> LossValue:
    """Average several scalar losses (used to pool per-branch cross-entropy)."""
    t = losses[0].tensor
    for other in losses[1:]:
        t = ag.add(t, other.tensor)
    t = ag.mul(t, np.asarray(1.0 / len(losses), losses[0].tensor.dtype))
    return LossValue(t, {key: float(t.data)})
