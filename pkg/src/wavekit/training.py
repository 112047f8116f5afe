"""Training loop: task-homogeneous batches, AdamW, loss trace.

Retrieval batches use the symmetric contrastive loss, QA batches the
distractor-ranking loss. With low-rank adapters enabled, only the modality
aligners, the adapters, and the fusion/pooling heads receive updates; the
base transformer and the token embedding table stay bit-for-bit frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import PairRecord, TaskBatchPlan, sample_batches
from .model import Model
from .objectives import EmbeddingBatch, ObjectiveConfig, qa_loss, retrieval_loss
from .seeding import derive_rng

logger = logging.getLogger("wavekit.train")


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    The full-scale reference run uses a learning rate of 2e-5 on a 7B
    backbone; the toy default is 3e-4. The degenerate values steps=0 and
    learning_rate=0 are accepted so that no-op training is expressible for
    verification runs.
    """

    learning_rate: float = 3e-4
    steps: int = 1500
    batch_size: int = 16
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.05
    lr_decay: str = "none"  # "none" holds the rate after warmup; "cosine" anneals
    lr_floor_fraction: float = 0.1
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")
        if not 0 <= self.lr_floor_fraction <= 1:
            raise ValueError("lr_floor_fraction must be in [0, 1]")


@dataclass
class TrainResult:
    model: Model
    trace: list[dict] = field(default_factory=list)


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter dict.

    Parameters whose gradient is None in a step are skipped entirely, decay
    included, so untouched heads stay at initialization.
    """

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)
            p.data = p.data - lr * update - lr * cfg.weight_decay * p.data


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def plan_loss(model: Model, records: list[PairRecord], plan: TaskBatchPlan,
              objective: ObjectiveConfig, rng: np.random.Generator) -> Tensor:
    """Embed one batch plan and compute its task loss."""
    batch = [records[i] for i in plan.indices]
    sources = model.embed_batch([r.source for r in batch], train=True, rng=rng)
    targets = model.embed_batch([r.target for r in batch], train=True, rng=rng)
    if plan.task_tag == "retrieval":
        return retrieval_loss(EmbeddingBatch(sources, targets), objective)
    n = len(batch[0].distractors)
    if n == 0:
        raise ValueError("qa batch has records without distractors")
    flat = [d for r in batch for d in r.distractors]
    distract = model.embed_batch(flat, train=True, rng=rng)
    distract = distract.reshape(len(batch), n, model.config.d_embed)
    return qa_loss(EmbeddingBatch(sources, targets, distract), objective)


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    warmup = max(1, int(round(cfg.warmup_fraction * cfg.steps)))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    if cfg.lr_decay == "cosine":
        progress = (step - warmup) / max(1, cfg.steps - warmup)
        floor = cfg.lr_floor_fraction
        return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * progress)))
    return cfg.learning_rate


def train(model: Model, records: list[PairRecord], objective: ObjectiveConfig,
          cfg: TrainConfig, *, on_checkpoint=None) -> TrainResult:
    """Run the optimization loop, returning the model and its loss trace.

    ``on_checkpoint(step)`` fires every ``checkpoint_every`` steps when set.
    Raises DivergenceError as soon as a loss is non-finite.
    """
    cfg.validate()
    objective.validate()
    if not records:
        raise ValueError("cannot train on an empty dataset")
    model.set_trainable_flags()
    trainable = model.trainable_parameters()
    optimizer = AdamW(trainable, cfg)
    plans = sample_batches(records, cfg.batch_size, cfg.seed)
    trace: list[dict] = []
    for step in range(cfg.steps):
        plan = next(plans)
        rng = derive_rng(cfg.seed, "dropout", step)
        for p in trainable.values():
            p.grad = None
        loss = plan_loss(model, records, plan, objective, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite loss {value} at step {step} "
                f"(task={plan.task_tag}, source={plan.source_tag})")
        loss.backward()
        grad_norm = clip_gradients(trainable, cfg.clip_norm)
        lr = learning_rate_at(step, cfg)
        optimizer.step(lr)
        trace.append({"step": step, "task": plan.task_tag, "source": plan.source_tag,
                      "loss": value, "lr": lr, "grad_norm": grad_norm})
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d %s/%s loss %.4f", step, plan.task_tag,
                        plan.source_tag, value)
        if on_checkpoint is not None and cfg.checkpoint_every > 0 \
                and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return TrainResult(model=model, trace=trace)
