"""Shared fixtures. The session-scoped training run backs the learnability
and prompt-conditioning acceptance criteria, so it happens once."""

import time

import pytest

import wavekit as wk
from wavekit.evaluation import ModelEmbedder
from wavekit.training import TrainConfig, train

# The acceptance training recipe: default model/adapter/objective configs,
# class count and noise level fixed by the acceptance criteria.
ACCEPTANCE_SEED = 0
ACCEPTANCE_CLASSES = 32
ACCEPTANCE_SIGMA = 0.1
ACCEPTANCE_TRAIN_COUNTS = {"video_text": 512, "videoaudio_text": 512,
                           "audio_video": 512, "audio_text": 512, "video_qa": 512}
ACCEPTANCE_EVAL_COUNTS = {g: 128 for g in wk.GROUPS}
ACCEPTANCE_STEPS = 3000
ACCEPTANCE_BATCH = 24


@pytest.fixture(scope="session")
def acceptance_run():
    spec = wk.LatentSpec.build(classes=ACCEPTANCE_CLASSES, sigma=ACCEPTANCE_SIGMA,
                               instances=16, latent_seed=11)
    train_records = wk.generate_records(spec, ACCEPTANCE_TRAIN_COUNTS,
                                        seed=ACCEPTANCE_SEED)
    eval_records = wk.generate_records(spec, ACCEPTANCE_EVAL_COUNTS,
                                       seed=ACCEPTANCE_SEED + 1)
    model = wk.Model(wk.ModelConfig(), wk.LoraConfig(), seed=ACCEPTANCE_SEED)
    cfg = TrainConfig(steps=ACCEPTANCE_STEPS, batch_size=ACCEPTANCE_BATCH,
                      seed=ACCEPTANCE_SEED, log_every=0)
    started = time.monotonic()
    result = train(model, train_records, wk.ObjectiveConfig(), cfg)
    elapsed = time.monotonic() - started
    return {"spec": spec, "train_records": train_records,
            "eval_records": eval_records, "model": model,
            "embedder": ModelEmbedder(model), "trace": result.trace,
            "train_seconds": elapsed, "train_config": cfg}
