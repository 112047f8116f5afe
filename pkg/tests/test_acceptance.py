"""Acceptance suite: one test per criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s``. The learnability run
(criterion 5) trains the default model once per session; the prompt-
conditioning checks reuse it.
"""

import math
import time

import numpy as np
import pytest

import wavekit as wk
from helpers import binomial_interval, brute_force_recall, small_latent_spec
from test_autodiff import OPS
from wavekit import (
    EmbeddingBatch,
    ObjectiveConfig,
    Tensor,
    apply_tmrope,
    grad_check,
    qa_loss,
    recall_at_k,
    retrieval_loss,
)
from wavekit.data import generate_records
from wavekit.evaluation import (
    ModelEmbedder,
    beats_chance,
    evaluate_qa,
    evaluate_retrieval,
    prompt_argmax_accuracy,
    run_fusion_ablation,
)
from wavekit.model import LoraConfig, Model, ModelConfig, MultimodalSample, PositionGrid
from wavekit.seeding import derive_rng
from wavekit.training import TrainConfig, train


def _report(number: int, text: str) -> None:
    print(f"\n[PASS] criterion {number}: {text}")


# -- criterion 1: gradient correctness ---------------------------------------------


def _tiny_pipeline():
    """A reduced-size model and dataset for end-to-end finite differencing."""
    spec = small_latent_spec()
    cfg = ModelConfig(d_model=12, n_layers=2, n_heads=2, d_embed=6, d_ff=24,
                      fusion_hidden=12, frame_dim=16, speech_dim=16, audio_dim=16,
                      vocab_size=120, max_seq_len=48)
    model = Model(cfg, LoraConfig(rank=2, enabled=True), seed=1)
    retrieval = generate_records(spec, {"videoaudio_text": 4}, seed=2)
    qa = generate_records(spec, {"video_qa": 2}, seed=3)
    return model, retrieval, qa


def _loss_through_model(model, records, objective, kind):
    if kind == "retrieval":
        s = model.embed_batch([r.source for r in records])
        t = model.embed_batch([r.target for r in records])
        return retrieval_loss(EmbeddingBatch(s, t), objective)
    s = model.embed_batch([r.source for r in records])
    t = model.embed_batch([r.target for r in records])
    flat = [d for r in records for d in r.distractors]
    dn = model.embed_batch(flat).reshape(len(records), len(records[0].distractors),
                                         model.config.d_embed)
    return qa_loss(EmbeddingBatch(s, t, dn), objective)


def test_criterion_1_gradient_correctness():
    started = time.monotonic()
    # every differentiable op, 100 random trials each, inputs in [-2, 2]
    for name, fn in sorted(OPS.items()):
        rng = np.random.default_rng(hash(name) % 2**32)
        for trial in range(100):
            x = rng.uniform(-2, 2, (3, 4))
            c = rng.uniform(-2, 2, (3, 4))
            rep = grad_check(lambda v: fn(v, c), Tensor(x), eps=1e-5, tol=1e-4)
            assert rep.passed, f"{name} trial {trial}: rel err {rep.max_rel_error:.2e}"

    # both losses end-to-end through the model, >= 100 parameter-coordinate
    # trials each across every parameter family that feeds the loss
    model, retrieval, qa = _tiny_pipeline()
    objective = ObjectiveConfig(temperature=0.01, batch_size=4, distractors=3)
    tensors = ["embed.table", "visual.w", "speech.w", "audio.w", "audio.b",
               "layers.0.attn.q.w", "layers.0.attn.v.b", "layers.0.attn.o.w",
               "layers.0.attn.q.lora_a", "layers.0.attn.q.lora_b",
               "layers.1.mlp.fc1.w", "layers.1.mlp.fc2.b", "layers.0.ln1.g",
               "layers.1.ln2.b", "fusion.fc1.w", "fusion.fc2.b", "text_head.w"]
    for kind, records in (("retrieval", retrieval), ("qa", qa)):
        trials = 0
        for tensor_name in tensors:
            original = model.params[tensor_name]

            def f(x):
                model.params[tensor_name] = x
                try:
                    return _loss_through_model(model, records, objective, kind)
                finally:
                    model.params[tensor_name] = original

            rep = grad_check(f, Tensor(original.data.copy()), eps=1e-5, tol=1e-4,
                             max_coords=7, rng=derive_rng(4, kind, tensor_name))
            assert rep.passed, f"{kind} loss wrt {tensor_name}: {rep.max_rel_error:.2e}"
            trials += rep.checked
        assert trials >= 100, f"{kind}: only {trials} coordinate trials"

    elapsed = time.monotonic() - started
    assert elapsed < 300, f"gradient suite took {elapsed:.0f}s (budget 300s)"
    _report(1, f"all ops and both end-to-end losses pass central finite "
               f"differences at rtol 1e-4 ({elapsed:.0f}s)")


# -- criterion 2: analytic loss identities ------------------------------------------


def test_criterion_2_loss_identities():
    cfg_sharp = ObjectiveConfig(temperature=0.01, batch_size=4, distractors=3)
    # N = 1 -> exactly zero
    single = retrieval_loss(EmbeddingBatch(Tensor([[1.0, 2.0]], requires_grad=True),
                                           Tensor([[0.3, -0.7]], requires_grad=True)),
                            cfg_sharp)
    assert single.item() == 0.0
    # uniform similarities -> ln N and ln(n + 1)
    rows = Tensor(np.tile([1.0, 1.0], (4, 1)), requires_grad=True)
    uniform = retrieval_loss(EmbeddingBatch(rows, Tensor(np.tile([1.0, 1.0], (4, 1)))),
                             cfg_sharp)
    assert uniform.item() == pytest.approx(math.log(4), abs=1e-12)
    s = Tensor(np.tile([1.0, 0.0], (2, 1)))
    d = Tensor(np.tile([1.0, 0.0], (2, 3, 1)))
    qa_uniform = qa_loss(EmbeddingBatch(s, Tensor(np.tile([1.0, 0.0], (2, 1))), d),
                         cfg_sharp)
    assert qa_uniform.item() == pytest.approx(math.log(4), abs=1e-12)
    # source/target swap invariance, exact
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    assert retrieval_loss(EmbeddingBatch(Tensor(a), Tensor(b)), cfg_sharp).item() == \
        retrieval_loss(EmbeddingBatch(Tensor(b), Tensor(a)), cfg_sharp).item()
    # positive rescaling of any single row, <= 1e-12
    dist = rng.normal(size=(6, 2, 8))
    base_r = retrieval_loss(EmbeddingBatch(Tensor(a), Tensor(b)), cfg_sharp).item()
    base_q = qa_loss(EmbeddingBatch(Tensor(a), Tensor(b), Tensor(dist)),
                     ObjectiveConfig(0.01, 6, 2)).item()
    for row, scale in ((0, 7.3), (3, 1e-3), (5, 412.0)):
        scaled = a.copy()
        scaled[row] *= scale
        got_r = retrieval_loss(EmbeddingBatch(Tensor(scaled), Tensor(b)), cfg_sharp).item()
        got_q = qa_loss(EmbeddingBatch(Tensor(scaled), Tensor(b), Tensor(dist)),
                        ObjectiveConfig(0.01, 6, 2)).item()
        assert abs(got_r - base_r) <= 1e-12
        assert abs(got_q - base_q) <= 1e-12
    _report(2, "loss identities: zero at N=1, ln N / ln(n+1) uniform, swap-exact, "
               "scale-invariant to 1e-12")


# -- criterion 3: rotary position properties ----------------------------------------


def _grid(ids):
    ids = np.asarray(ids, dtype=np.int64).reshape(-1, 3)
    return PositionGrid(ids=ids, next_text_position=int(ids.max(initial=0)) + 1)


def test_criterion_3_tmrope_properties():
    rng = np.random.default_rng(1)
    # zero-position identity, exact
    x = rng.normal(size=(6, 12))
    np.testing.assert_array_equal(apply_tmrope(Tensor(x), _grid(np.zeros((6, 3)))).data, x)
    # norm preservation (partial rotary block included), <= 1e-12
    y = rng.normal(size=(9, 16))
    grid = _grid(rng.integers(0, 64, (9, 3)))
    np.testing.assert_allclose(
        np.linalg.norm(apply_tmrope(Tensor(y), grid).data, axis=-1),
        np.linalg.norm(y, axis=-1), atol=1e-12)
    # relative-shift invariance over 1000 random draws, <= 1e-9
    worst = 0.0
    for _ in range(1000):
        q = rng.normal(size=(1, 12))
        k = rng.normal(size=(1, 12))
        p1, p2, c = (rng.integers(0, 50, (1, 3)) for _ in range(3))
        dot = (apply_tmrope(Tensor(q), _grid(p1)).data
               * apply_tmrope(Tensor(k), _grid(p2)).data).sum()
        shifted = (apply_tmrope(Tensor(q), _grid(p1 + c)).data
                   * apply_tmrope(Tensor(k), _grid(p2 + c)).data).sum()
        worst = max(worst, abs(dot - shifted))
    assert worst <= 1e-9
    # structural: same-frame tokens share the temporal id
    sample = MultimodalSample(
        modality_kind="audio_visual", instruction=[0, 1],
        frames=rng.normal(size=(4, 16)),
        speech_stream=rng.normal(size=(4, 16)),
        audio_stream=rng.normal(size=(4, 16)))
    ids = wk.assign_positions(sample).ids
    for frame in range(4):
        assert ids[frame, 0] == ids[4 + 2 * frame, 0] == ids[4 + 2 * frame + 1, 0] == frame
    _report(3, f"rotary identities hold (worst relative-shift error {worst:.1e}); "
               "frame-aligned tokens share temporal ids")


# -- criterion 4: adapter identity and frozen base ----------------------------------


def test_criterion_4_lora_identity_and_frozen_base():
    cfg = ModelConfig(d_model=24, n_layers=2, n_heads=4, d_embed=8, d_ff=32,
                      fusion_hidden=16, vocab_size=120, max_seq_len=48)
    rng = np.random.default_rng(2)
    sample = MultimodalSample(
        modality_kind="audio_visual", instruction=[0, 1],
        frames=rng.normal(size=(3, 16)),
        speech_stream=rng.normal(size=(3, 16)),
        audio_stream=rng.normal(size=(3, 16)))
    enabled = Model(cfg, LoraConfig(rank=4, enabled=True), seed=7)
    disabled = Model(cfg, LoraConfig(rank=4, enabled=False), seed=7)
    np.testing.assert_array_equal(enabled.forward(sample).last_tokens.data,
                                  disabled.forward(sample).last_tokens.data)

    spec = small_latent_spec()
    records = generate_records(spec, {"video_text": 12, "video_qa": 12}, seed=5)
    before = {n: p.data.copy() for n, p in enabled.params.items()}
    train(enabled, records, ObjectiveConfig(batch_size=4),
          TrainConfig(steps=15, batch_size=4, log_every=0))
    trainable = set(enabled.trainable_parameter_names())
    frozen = [n for n in enabled.params if n not in trainable]
    assert any("attn" in n and n.endswith(".w") for n in frozen)
    for name in frozen:
        np.testing.assert_array_equal(before[name], enabled.params[name].data)
    _report(4, f"fresh adapters are a bitwise identity; {len(frozen)} base tensors "
               "bitwise-unchanged after training")


# -- criterion 5: learnability -------------------------------------------------------


def test_criterion_5_learnability(acceptance_run):
    embedder = acceptance_run["embedder"]
    eval_records = acceptance_run["eval_records"]
    t2v = evaluate_retrieval(embedder, eval_records, "text_to_video", ks=(1,))
    v2a = evaluate_retrieval(embedder, eval_records, "video_to_audio", ks=(1,))
    assert t2v["pool"] >= 128 and v2a["pool"] >= 128
    chance = 1.0 / t2v["pool"]
    assert chance <= 0.008
    elapsed = acceptance_run["train_seconds"]
    assert acceptance_run["train_config"].steps <= 3000
    assert elapsed <= 900, f"training took {elapsed:.0f}s (budget 900s)"
    r_t2v = t2v["recalls"]["r_at_1"]
    r_v2a = v2a["recalls"]["r_at_1"]
    assert r_t2v >= 0.90, f"text->visual R@1 {r_t2v:.3f} < 0.90"
    assert r_v2a >= 0.90, f"visual->audio R@1 {r_v2a:.3f} < 0.90"
    retrieval_losses = [r["loss"] for r in acceptance_run["trace"]
                        if r["task"] == "retrieval"]
    assert np.mean(retrieval_losses[-100:]) < np.mean(retrieval_losses[:100])
    _report(5, f"text->visual R@1 {r_t2v:.3f}, visual->audio R@1 {r_v2a:.3f} "
               f"on pool {t2v['pool']} after {acceptance_run['train_config'].steps} "
               f"steps in {elapsed:.0f}s")


# -- criterion 6: prompt-aware direction ---------------------------------------------


def test_criterion_6_prompt_awareness(acceptance_run):
    embedder = acceptance_run["embedder"]
    eval_records = acceptance_run["eval_records"]
    spec = acceptance_run["spec"]
    per_q = evaluate_qa(embedder, eval_records, "per_question", seed=3)["accuracy"]
    common = evaluate_qa(embedder, eval_records, "common_prompt", seed=3)["accuracy"]
    assert per_q - common >= 0.15, f"gap {per_q - common:.3f} < 0.15"
    qa = [r for r in eval_records if r.task_tag == "qa"]
    argmax_acc = prompt_argmax_accuracy(embedder, spec, qa)
    assert argmax_acc >= 0.90, f"demo argmax accuracy {argmax_acc:.3f} < 0.90"
    _report(6, f"QA accuracy {per_q:.3f} with questions vs {common:.3f} with a "
               f"common prompt (gap {per_q - common:.3f}); demo argmax "
               f"accuracy {argmax_acc:.3f}")


# -- criterion 7: fusion-strategy ablation -------------------------------------------


def test_criterion_7_fusion_ablation():
    spec = wk.LatentSpec.build(classes=32, sigma=0.1, instances=16, latent_seed=11)
    train_records = generate_records(
        spec, {"video_text": 256, "videoaudio_text": 256, "audio_video": 256,
               "audio_text": 256, "video_qa": 256}, seed=21)
    eval_records = generate_records(spec, {g: 128 for g in wk.GROUPS}, seed=22)
    rows = run_fusion_ablation(
        ModelConfig(), LoraConfig(), wk.ObjectiveConfig(),
        TrainConfig(steps=700, batch_size=24, log_every=0),
        train_records, eval_records, seed=17)
    assert len(rows) == 10  # 5 strategies x 2 modality settings
    for row in rows:
        assert row["beats_chance_99"], \
            f"{row['strategy']}/{row['modality']} R@1 {row['r_at_1']:.3f} " \
            f"does not beat chance {row['chance']:.4f}"
    mlp = {r["modality"]: r["r_at_1"] for r in rows if r["strategy"] == "mlp_fusion"}
    assert mlp["audio_visual"] >= mlp["visual"], \
        f"A+V {mlp['audio_visual']:.3f} < V {mlp['visual']:.3f} for mlp_fusion"
    _report(7, f"10 ablation rows, all beat chance at 99%; mlp_fusion "
               f"A+V {mlp['audio_visual']:.3f} >= V {mlp['visual']:.3f}")


# -- criterion 8: metric oracle equivalence ------------------------------------------


def test_criterion_8_metric_oracle_equivalence():
    rng = np.random.default_rng(8)
    for pool_idx in range(50):
        n = int(rng.integers(10, 1001))
        d = int(rng.integers(4, 24))
        queries = rng.normal(size=(n, d))
        targets = rng.normal(size=(n, d))
        if pool_idx % 7 == 0:  # force ties
            targets[1] = targets[0] * 2.0
        correct = rng.permutation(n)
        for k in (1, 5, 10):
            harness = recall_at_k(queries, targets, correct, ks=(k,))[k]
            oracle = brute_force_recall(queries, targets, correct, k)
            assert harness == oracle, f"pool {pool_idx} (n={n}) k={k}"
    _report(8, "recall matches the brute-force full-scan oracle exactly on "
               "50 random pools up to size 1000")


# -- criterion 9: determinism ---------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    import hashlib

    spec = small_latent_spec()
    counts = {"video_text": 16, "audio_video": 16, "video_qa": 16}
    digests = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.jsonl"
        wk.generate_dataset(spec, counts, seed=13, path=path)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]

    cfg = ModelConfig(d_model=24, n_layers=2, n_heads=4, d_embed=8, d_ff=32,
                      fusion_hidden=16, vocab_size=120, max_seq_len=48)
    records = generate_records(spec, counts, seed=13)

    def run():
        model = Model(cfg, LoraConfig(rank=2), seed=5)
        result = train(model, records, ObjectiveConfig(batch_size=4),
                       TrainConfig(steps=10, batch_size=4, seed=5, log_every=0))
        embedder = ModelEmbedder(model)
        report = {
            "trace": [(r["step"], r["loss"]) for r in result.trace],
            "r1": evaluate_retrieval(embedder, records, "text_to_video",
                                     ks=(1, 5))["recalls"],
            "qa": evaluate_qa(embedder, records, "per_question", seed=2)["accuracy"],
        }
        return report

    first, second = run(), run()
    assert first == second  # bitwise-identical losses, recalls, accuracy
    _report(9, "datasets, loss traces, and evaluation reports are "
               "bitwise-identical across runs with the same seed")
