"""Evaluation harness: ranking semantics, oracle equivalence, QA modes."""

import numpy as np
import pytest

from helpers import (
    binomial_interval,
    brute_force_recall,
    small_latent_spec,
    tiny_lora,
    tiny_model_config,
)
from wavekit import (
    Model,
    ModelEmbedder,
    generate_records,
    recall_at_k,
)
from wavekit.evaluation import (
    beats_chance,
    binomial_sf,
    evaluate_qa,
    evaluate_retrieval,
    prompt_similarity_matrix,
)


class TestRecallAtK:
    def test_pool_of_one_is_always_hit(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(5, 8))
        t = rng.normal(size=(1, 8))
        out = recall_at_k(q, t, np.zeros(5, dtype=int), ks=(1,))
        assert out[1] == 1.0

    def test_untrained_chance_level_binomial_interval(self):
        """Random embeddings, 1000 queries against a pool of 100."""
        rng = np.random.default_rng(1)
        q = rng.normal(size=(1000, 16))
        t = rng.normal(size=(100, 16))
        correct = np.arange(1000) % 100
        out = recall_at_k(q, t, correct, ks=(1,))
        lo, hi = binomial_interval(1000, 1 / 100, coverage=0.99)
        assert lo <= out[1] * 1000 <= hi

    def test_matches_brute_force_oracle_exactly(self):
        rng = np.random.default_rng(2)
        for trial in range(6):  # the acceptance suite runs 50 pools up to 1000
            n = int(rng.integers(5, 120))
            d = int(rng.integers(3, 12))
            q = rng.normal(size=(n, d))
            t = rng.normal(size=(n, d))
            correct = rng.permutation(n)
            for k in (1, 5):
                got = recall_at_k(q, t, correct, ks=(k,))[k]
                assert got == brute_force_recall(q, t, correct, k)

    def test_tie_breaking_ascending_index_and_stable(self):
        q = np.array([[1.0, 0.0]])
        t = np.array([[2.0, 0.0], [1.0, 0.0], [3.0, 0.0]])  # all cosine 1
        assert recall_at_k(q, t, [0], ks=(1,))[1] == 1.0
        assert recall_at_k(q, t, [1], ks=(1,))[1] == 0.0
        again = recall_at_k(q, t, [1], ks=(1,))[1]
        assert again == 0.0


class TestBinomial:
    def test_sf_edge_cases(self):
        assert binomial_sf(0, 10, 0.5) == 1.0
        assert binomial_sf(11, 10, 0.5) == 0.0
        assert binomial_sf(1, 1, 0.5) == pytest.approx(0.5)

    def test_beats_chance(self):
        assert beats_chance(hits=30, trials=100, chance=0.01)
        assert not beats_chance(hits=2, trials=100, chance=0.01)


@pytest.fixture(scope="module")
def eval_setup():
    spec = small_latent_spec()
    records = generate_records(
        spec, {"video_text": 20, "audio_video": 20, "video_qa": 20}, seed=6)
    model = Model(tiny_model_config(), tiny_lora(), seed=0)
    return spec, records, ModelEmbedder(model)


class OracleEmbedder:
    """Ground-truth embedder: decodes samples back to latent space.

    Text answer tokens map to their slot-value latents; multimodal samples
    project their payload through the known rendering matrices conditioned on
    the question slot; captions use the questioned slot via instruction-free
    class lookup (class + instance concatenation).
    """

    def __init__(self, spec):
        self.spec = spec

    def embed(self, samples, *, instruction_override=None):
        out = []
        for s in samples:
            instr = instruction_override if instruction_override is not None \
                else s.instruction
            out.append(self._one(s, np.asarray(instr, dtype=np.int64)))
        return np.stack(out)

    def _one(self, s, instr):
        spec = self.spec
        if s.modality_kind == "text_only":
            tok = int(s.text_tokens[0]) - 8
            slot, value = divmod(tok, spec.classes)
            return spec.slot_values[slot, value]
        slot = int(instr[1]) - 2 if int(instr[1]) >= 2 else 0
        if slot == 0 and s.frames is not None:
            est = spec.render_frame.T @ s.frames.mean(axis=0)
        elif slot == 1:
            est = spec.render_audio.T @ s.audio_stream.mean(axis=0)
        else:
            est = spec.render_speech.T @ s.speech_stream.mean(axis=0)
        return est[spec.core_dim:spec.core_dim + spec.slot_dim]


class TestRetrievalEvaluation:
    def test_untrained_model_near_chance(self, eval_setup):
        _, records, embedder = eval_setup
        res = evaluate_retrieval(embedder, records, "text_to_video", ks=(1,))
        assert res["pool"] == 20
        lo, hi = binomial_interval(20, 1 / 20, coverage=0.999)
        assert lo <= res["recalls"]["r_at_1"] * 20 <= hi

    def test_unknown_direction_rejected(self, eval_setup):
        _, records, embedder = eval_setup
        with pytest.raises(ValueError, match="direction"):
            evaluate_retrieval(embedder, records, "text_to_nowhere")

    def test_missing_group_rejected(self, eval_setup):
        _, records, embedder = eval_setup
        with pytest.raises(ValueError, match="no records"):
            evaluate_retrieval(embedder, records, "audio_to_text")

    def test_repeated_evaluation_bitwise_stable(self, eval_setup):
        _, records, embedder = eval_setup
        a = evaluate_retrieval(embedder, records, "video_to_audio")
        b = evaluate_retrieval(embedder, records, "video_to_audio")
        assert a == b


class TestQAEvaluation:
    def test_oracle_embeddings_reach_perfect_accuracy(self, eval_setup):
        spec, records, _ = eval_setup
        res = evaluate_qa(OracleEmbedder(spec), records, "per_question", seed=1)
        assert res["accuracy"] == 1.0

    def test_identical_candidates_tie_contract(self, eval_setup):
        """With all candidates identical, the lowest index wins, so accuracy
        equals the rate at which the shuffle lands the answer at slot 0."""
        spec, records, embedder = eval_setup
        qa = [r for r in records if r.task_tag == "qa"]
        clones = []
        for r in qa:
            from wavekit.data import PairRecord
            clones.append(PairRecord(
                task_tag=r.task_tag, source_tag=r.source_tag, class_id=r.class_id,
                instance=r.instance, source=r.source, target=r.target,
                distractors=[r.target] * len(r.distractors), slot=r.slot,
                answer_value=r.answer_value, distractor_values=r.distractor_values))
        res = evaluate_qa(embedder, clones, "per_question", seed=3)
        from wavekit.seeding import derive_rng
        expected = np.mean([
            int(np.argmax(derive_rng(3, "qa-shuffle", i).permutation(4) == 0)) == 0
            for i in range(len(clones))])
        assert res["accuracy"] == pytest.approx(expected)

    def test_prompt_modes_validated(self, eval_setup):
        _, records, embedder = eval_setup
        with pytest.raises(ValueError):
            evaluate_qa(embedder, records, "sideways")

    def test_common_prompt_uses_general_instruction(self, eval_setup):
        _, records, embedder = eval_setup
        res = evaluate_qa(embedder, records, "common_prompt", seed=0)
        assert res["records"] == 20 and 0.0 <= res["accuracy"] <= 1.0


def test_prompt_similarity_matrix_shape(eval_setup):
    spec, records, embedder = eval_setup
    qa = [r for r in records if r.task_tag == "qa"]
    matrix = prompt_similarity_matrix(embedder, spec, qa[0])
    assert matrix.shape == (4, 4)
    assert np.all(matrix <= 1.0 + 1e-12) and np.all(matrix >= -1.0 - 1e-12)
