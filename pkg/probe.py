"""Scratch probe for training-recipe calibration (not part of the package)."""

import sys
import time

import numpy as np

import wavekit as wk
from wavekit.evaluation import (
    ModelEmbedder,
    evaluate_qa,
    evaluate_retrieval,
    prompt_argmax_accuracy,
    recall_at_k,
)
from wavekit.training import TrainConfig, train


def class_level_recall(embedder, records, direction):
    from wavekit.evaluation import DIRECTIONS, _normalize
    group, qside, pside = DIRECTIONS[direction]
    subset = [r for r in records if r.source_tag == group]
    q = _normalize(embedder.embed([getattr(r, qside) for r in subset]))
    t = _normalize(embedder.embed([getattr(r, pside) for r in subset]))
    sims = q @ t.T
    top = np.argmax(sims, axis=1)
    classes = np.array([r.class_id for r in subset])
    return float(np.mean(classes[top] == classes))


def main():
    arm = sys.argv[1]
    counts_av = int(sys.argv[2])
    counts_other = int(sys.argv[3])
    batch = int(sys.argv[4])
    steps_list = [int(s) for s in sys.argv[5].split(",")]
    decay = sys.argv[6] == "decay"

    spec = wk.LatentSpec.build(classes=32, instances=16, latent_seed=11)
    counts = {g: counts_other for g in wk.GROUPS}
    counts["audio_video"] = counts_av
    train_recs = wk.generate_records(spec, counts, seed=5)
    eval_recs = wk.generate_records(spec, {g: 128 for g in wk.GROUPS}, seed=1005)

    model = wk.Model(wk.ModelConfig(), wk.LoraConfig(), seed=0)
    obj = wk.ObjectiveConfig()
    emb = ModelEmbedder(model)
    t0 = time.time()
    total = 0
    for phase, steps in enumerate(steps_list):
        tc = TrainConfig(steps=steps, batch_size=batch, seed=300 + phase, log_every=0,
                         lr_decay="cosine" if decay else "none")
        res = train(model, train_recs, obj, tc)
        total += steps
        r1a = evaluate_retrieval(emb, eval_recs, "text_to_video", ks=(1,))["recalls"]["r_at_1"]
        r1b = evaluate_retrieval(emb, eval_recs, "video_to_audio", ks=(1,))["recalls"]["r_at_1"]
        r1b_cls = class_level_recall(emb, eval_recs, "video_to_audio")
        qa_p = evaluate_qa(emb, eval_recs, "per_question")["accuracy"]
        qa_c = evaluate_qa(emb, eval_recs, "common_prompt")["accuracy"]
        last = np.mean([r["loss"] for r in res.trace[-50:]])
        print(f"[{arm}] steps={total} t={time.time()-t0:.0f}s loss={last:.3f} "
              f"t2v={r1a:.3f} v2a={r1b:.3f} v2a_class={r1b_cls:.3f} "
              f"qa_pq={qa_p:.3f} qa_cp={qa_c:.3f}", flush=True)
    qa = [r for r in eval_recs if r.task_tag == "qa"]
    print(f"[{arm}] demo argmax acc: {prompt_argmax_accuracy(emb, spec, qa):.4f}")


if __name__ == "__main__":
    main()
