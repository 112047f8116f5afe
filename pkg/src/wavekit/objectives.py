"""Contrastive training objectives over embedding batches.

Both losses score candidates by cosine similarity scaled by a temperature and
reduce with a numerically stable softmax cross-entropy; with the default
temperature of 0.01 the log-sum-exp form is mandatory, not cosmetic. The
retrieval loss is symmetric over in-batch negatives; the QA loss ranks one
positive answer against per-sample distractors only, with no swapped
direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    reshape,
    softmax_cross_entropy,
    sqrt,
    tensor_sum,
    transpose,
)


class DegenerateInputError(ValueError):
    """Raised for zero-norm embeddings, which have no direction."""


@dataclass
class ObjectiveConfig:
    """Loss hyperparameters. The reference full-scale setup uses a fixed
    temperature of 0.01; it is a constant here, never a learned parameter."""

    temperature: float = 0.01
    batch_size: int = 16
    distractors: int = 3

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.distractors < 1:
            raise ValueError(f"distractors must be >= 1, got {self.distractors}")


@dataclass
class EmbeddingBatch:
    """Source/target embedding rows, plus optional per-sample distractors.

    sources: (N, d); targets: (N, d); distractors: (N, n, d) or None.
    ``task_tag`` is a bookkeeping label; the losses validate it only through
    the distractor presence rules.
    """

    sources: Tensor
    targets: Tensor
    distractors: Tensor | None = None
    task_tag: str | None = None

    def __post_init__(self):
        if self.sources.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("sources and targets must be (N, d) matrices")
        if self.sources.shape != self.targets.shape:
            raise ValueError(
                f"source/target shapes disagree: {self.sources.shape} vs {self.targets.shape}")
        if self.distractors is not None:
            n, d = self.sources.shape
            if self.distractors.ndim != 3 or self.distractors.shape[0] != n \
                    or self.distractors.shape[2] != d:
                raise ValueError(
                    f"distractors must be (N, n, {d}), got {self.distractors.shape}")
        for name, t in (("sources", self.sources), ("targets", self.targets)):
            _check_nonzero_rows(t.data.reshape(-1, t.shape[-1]), name)
        if self.distractors is not None:
            _check_nonzero_rows(
                self.distractors.data.reshape(-1, self.distractors.shape[-1]), "distractors")

    @property
    def n(self) -> int:
        return self.sources.shape[0]


def _check_nonzero_rows(rows: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{name} contains a zero-norm row")


def _normalize_rows(t: Tensor) -> Tensor:
    sq = tensor_sum(t * t, axis=-1, keepdims=True)
    return t / sqrt(sq)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, differentiable, in [-1, 1]."""
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_sim expects 1-D vectors")
    if np.linalg.norm(a.data) == 0.0 or np.linalg.norm(b.data) == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    dot = tensor_sum(a * b)
    return dot / (sqrt(tensor_sum(a * a)) * sqrt(tensor_sum(b * b)))


def retrieval_loss(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    """Symmetric in-batch contrastive (InfoNCE) loss.

    Builds the N x N matrix of temperature-scaled cosine similarities and
    averages the row-wise (source as query) and column-wise (target as query)
    cross-entropies, so every non-matching pair in the mini-batch acts as a
    negative in both directions.
    """
    if batch.distractors is not None:
        raise ValueError("retrieval batches must not carry distractors")
    if batch.n < 1:
        raise ValueError("retrieval loss needs a non-empty batch")
    cfg.validate()
    s = _normalize_rows(batch.sources)
    t = _normalize_rows(batch.targets)
    scores = (s @ transpose(t)) * (1.0 / cfg.temperature)
    labels = np.arange(batch.n)
    forward = softmax_cross_entropy(scores, labels)
    backward = softmax_cross_entropy(transpose(scores), labels)
    return (forward + backward) * 0.5


def qa_loss(batch: EmbeddingBatch, cfg: ObjectiveConfig) -> Tensor:
    """Distractor-ranking loss for question answering.

    Per sample, the candidates are its own positive answer plus its n
    distractors, scored against the query embedding; the target is always the
    positive. Other samples' answers are never used as extra negatives, and
    there is no swapped direction.
    """
    if batch.distractors is None:
        raise ValueError("qa batches require distractor embeddings")
    cfg.validate()
    n, d = batch.sources.shape
    k = batch.distractors.shape[1]
    s = _normalize_rows(batch.sources)
    t = _normalize_rows(batch.targets)
    dn = _normalize_rows(batch.distractors)
    pos = tensor_sum(s * t, axis=-1, keepdims=True)            # (N, 1)
    wide = reshape(s, (n, 1, d))
    negs = tensor_sum(wide * dn, axis=-1)                      # (N, k)
    logits = concat([pos, negs], axis=1) * (1.0 / cfg.temperature)
    return softmax_cross_entropy(logits, np.zeros(n, dtype=np.intp))
