"""Shared fixtures-in-spirit: tiny configs and independent oracles.

Everything here is deliberately written without reusing the library's own
ranking/metric code paths, so tests compare against independent
implementations.
"""

from __future__ import annotations

import math

import numpy as np

from wavekit import LatentSpec, LoraConfig, ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """A minimal config whose head_dim (6) admits a full three-axis rotary
    split; used where default-size runs would be wastefully slow."""
    base = dict(d_model=24, n_layers=2, n_heads=4, d_embed=8, d_ff=32,
                fusion_hidden=16, frame_dim=16, speech_dim=16, audio_dim=16,
                vocab_size=120, max_seq_len=48)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_lora(**overrides) -> LoraConfig:
    base = dict(rank=2, scale=2.0, dropout=0.05, enabled=True)
    base.update(overrides)
    return LoraConfig(**base)


def small_latent_spec(**overrides) -> LatentSpec:
    base = dict(classes=8, core_dim=4, slot_dim=4, instances=4, instance_dim=4,
                sigma=0.1, frame_dim=16, speech_dim=16, audio_dim=16, frames_min=2,
                frames_max=4, distractors=3, latent_seed=3)
    base.update(overrides)
    return LatentSpec.build(**base)


def brute_force_recall(queries: np.ndarray, targets: np.ndarray,
                       correct: np.ndarray, k: int) -> float:
    """Full-scan retrieval oracle: per query, count targets strictly better
    than the correct one, plus equal-similarity targets with a lower index
    (the deterministic tie rule). Independent of the harness ranking path."""
    normed_targets = np.stack([t / np.linalg.norm(t) for t in targets])
    hits = 0
    for qi in range(len(queries)):
        q = queries[qi] / np.linalg.norm(queries[qi])
        sims = normed_targets @ q
        c = int(correct[qi])
        rank = int(np.sum(sims > sims[c])
                   + np.sum((sims == sims[c]) & (np.arange(len(targets)) < c)))
        hits += rank < k
    return hits / len(queries)


def binomial_interval(n: int, p: float, coverage: float = 0.99) -> tuple[int, int]:
    """Smallest central acceptance region [lo, hi] with >= coverage mass."""
    pmf = [math.comb(n, i) * p**i * (1 - p) ** (n - i) for i in range(n + 1)]
    order = sorted(range(n + 1), key=lambda i: -pmf[i])
    mass, chosen = 0.0, []
    for i in order:
        chosen.append(i)
        mass += pmf[i]
        if mass >= coverage:
            break
    return min(chosen), max(chosen)
