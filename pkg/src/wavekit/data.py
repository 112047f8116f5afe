"""Synthetic multimodal data with known latent semantics.

Every sample is rendered from a shared latent code, so cross-modal retrieval
is learnable and its ground truth is checkable without a trained model. The
latent code has two parts:

* three compositional attribute slots (object, sound, speaker), each a
  per-class value drawn from a slot vocabulary the size of the class count,
  assigned bijectively so any single slot identifies the class;
* a discrete instance identity that distinguishes co-class pairs, so
  exact-pair retrieval stays solvable even when the candidate pool holds
  several samples of the same class.

Frames render the object slot, the speech stream the speaker slot, and the
audio stream the sound slot (each plus the instance code), through per-
modality orthonormal projections with additive Gaussian noise. Text is a
short deterministic token sequence: captions list the three attribute value
tokens plus the instance token; answer texts are single attribute value
tokens.

Generation is deterministic per seed regardless of any internal parallelism:
every record draws from its own generator keyed by (seed, group, index).
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import MultimodalSample
from .seeding import derive_rng

logger = logging.getLogger("wavekit.data")

SLOTS = ("object", "sound", "speaker")
SLOT_OBJECT, SLOT_SOUND, SLOT_SPEAKER = 0, 1, 2

# Reserved token ids 0..7; attribute value and instance tokens follow.
TOK_INSTR = 0
TOK_GENERAL = 1
TOK_QUESTION_BASE = 2  # question word for slot k is 2 + k


@dataclass(frozen=True)
class GroupSpec:
    task_tag: str
    source_kind: str
    target_kind: str


# Task groups: four retrieval modality pairings plus QA. The group tag acts
# as the data-source label, so batches homogeneous in (task, source) are also
# homogeneous in modality layout.
GROUPS: dict[str, GroupSpec] = {
    "video_text": GroupSpec("retrieval", "visual_only", "text_only"),
    "videoaudio_text": GroupSpec("retrieval", "audio_visual", "text_only"),
    "audio_video": GroupSpec("retrieval", "audio_only", "visual_only"),
    "audio_text": GroupSpec("retrieval", "audio_only", "text_only"),
    "video_qa": GroupSpec("qa", "audio_visual", "text_only"),
}
RETRIEVAL_GROUPS = tuple(g for g, s in GROUPS.items() if s.task_tag == "retrieval")


class EmptyEpochError(ValueError):
    """Raised when no (task, source) group can fill a single batch."""


# -- token layout --------------------------------------------------------------


def general_prompt() -> np.ndarray:
    return np.array([TOK_INSTR, TOK_GENERAL], dtype=np.int64)


def slot_question(slot: int) -> np.ndarray:
    return np.array([TOK_INSTR, TOK_QUESTION_BASE + slot], dtype=np.int64)


def value_token(classes: int, slot: int, value: int) -> int:
    return 8 + slot * classes + value


def instance_token(classes: int, instance: int) -> int:
    return 8 + 3 * classes + instance


def required_vocab(classes: int, instances: int) -> int:
    return 8 + 3 * classes + instances


def answer_tokens(classes: int, slot: int, value: int) -> np.ndarray:
    return np.array([value_token(classes, slot, value)], dtype=np.int64)


# -- latent specification -------------------------------------------------------


@dataclass
class LatentSpec:
    """Latent factors plus per-modality rendering projections.

    Every modality renders a shared per-class core alongside its own
    attribute slot and the instance code, so any rendered pair of modalities
    is directly alignable. Distinct latent values keep a minimum pairwise
    distance above 4 sigma, so nearest-latent decoding of any rendered
    modality is unambiguous.
    """

    classes: int
    core_dim: int
    slot_dim: int
    instances: int
    instance_dim: int
    sigma: float
    frame_dim: int
    speech_dim: int
    audio_dim: int
    frames_min: int
    frames_max: int
    distractors: int
    latent_seed: int
    class_core: np.ndarray        # (C, core_dim), shared across modalities
    slot_values: np.ndarray       # (3, C, slot_dim)
    slot_assignment: np.ndarray   # (3, C) class -> value, bijective per slot
    instance_values: np.ndarray   # (instances, instance_dim)
    render_frame: np.ndarray      # (frame_dim, core_dim + slot_dim + instance_dim)
    render_speech: np.ndarray
    render_audio: np.ndarray

    @classmethod
    def build(cls, *, classes: int = 32, core_dim: int = 8, slot_dim: int = 8,
              instances: int = 16, instance_dim: int = 8, sigma: float = 0.1,
              frame_dim: int = 24, speech_dim: int = 24, audio_dim: int = 24,
              frames_min: int = 2, frames_max: int = 8, distractors: int = 3,
              latent_seed: int = 11) -> "LatentSpec":
        if classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= frames_min <= frames_max:
            raise ValueError(f"bad frame range [{frames_min}, {frames_max}]")
        if not 1 <= distractors < classes:
            raise ValueError(f"distractors must be in [1, classes), got {distractors}")
        if instances < 1:
            raise ValueError("need at least one instance code")
        joint = core_dim + slot_dim + instance_dim
        for name, dim in (("frame_dim", frame_dim), ("speech_dim", speech_dim),
                          ("audio_dim", audio_dim)):
            if dim < joint:
                raise ValueError(
                    f"{name}={dim} must be >= core_dim + slot_dim + instance_dim = {joint}")

        rng = derive_rng(latent_seed, "latents")
        floor = 4.0 * sigma
        for _ in range(64):
            class_core = rng.normal(size=(classes, core_dim))
            slot_values = rng.normal(size=(3, classes, slot_dim))
            # Instance codes get extra spread: they are what separates
            # co-class pairs, so their margins must dominate render noise
            # even for the shortest (noisiest) clips. The factor balances
            # instance discrimination against drowning the class signal.
            instance_values = 1.5 * rng.normal(size=(instances, instance_dim))
            if _min_pairwise(class_core) > floor and \
                    _min_pairwise(slot_values.reshape(-1, slot_dim)) > floor and \
                    _min_pairwise(instance_values) > floor:
                break
        else:
            raise RuntimeError("could not draw latents with the required separation")

        assignment = np.zeros((3, classes), dtype=np.int64)
        assignment[0] = np.arange(classes)
        assignment[1] = rng.permutation(classes)
        assignment[2] = rng.permutation(classes)

        def ortho(dim: int) -> np.ndarray:
            q, _ = np.linalg.qr(rng.normal(size=(dim, joint)))
            return q

        return cls(classes=classes, core_dim=core_dim, slot_dim=slot_dim,
                   instances=instances, instance_dim=instance_dim, sigma=sigma,
                   frame_dim=frame_dim, speech_dim=speech_dim, audio_dim=audio_dim,
                   frames_min=frames_min, frames_max=frames_max,
                   distractors=distractors, latent_seed=latent_seed,
                   class_core=class_core, slot_values=slot_values,
                   slot_assignment=assignment, instance_values=instance_values,
                   render_frame=ortho(frame_dim), render_speech=ortho(speech_dim),
                   render_audio=ortho(audio_dim))

    # scalar parameters, enough to rebuild the spec bit-for-bit
    def params(self) -> dict:
        return {"classes": self.classes, "core_dim": self.core_dim,
                "slot_dim": self.slot_dim,
                "instances": self.instances, "instance_dim": self.instance_dim,
                "sigma": self.sigma, "frame_dim": self.frame_dim,
                "speech_dim": self.speech_dim, "audio_dim": self.audio_dim,
                "frames_min": self.frames_min, "frames_max": self.frames_max,
                "distractors": self.distractors, "latent_seed": self.latent_seed}

    def digest(self) -> str:
        return hashlib.sha256(_canonical_json(self.params()).encode()).hexdigest()

    def class_attributes(self, class_id: int) -> tuple[int, int, int]:
        return tuple(int(self.slot_assignment[k, class_id]) for k in range(3))

    def class_latent(self, class_id: int) -> np.ndarray:
        return np.concatenate(
            [self.class_core[class_id]]
            + [self.slot_values[k, self.slot_assignment[k, class_id]] for k in range(3)])

    def caption_tokens(self, class_id: int, instance: int) -> np.ndarray:
        toks = [value_token(self.classes, k, self.slot_assignment[k, class_id])
                for k in range(3)]
        toks.append(instance_token(self.classes, instance))
        return np.asarray(toks, dtype=np.int64)

    def _joint_latent(self, slot: int, class_id: int, instance: int) -> np.ndarray:
        value = self.slot_assignment[slot, class_id]
        return np.concatenate([self.class_core[class_id], self.slot_values[slot, value],
                               self.instance_values[instance]])

    def render_frames(self, class_id: int, instance: int, count: int,
                      rng: np.random.Generator) -> np.ndarray:
        mean = self.render_frame @ self._joint_latent(SLOT_OBJECT, class_id, instance)
        return mean + self.sigma * rng.normal(size=(count, self.frame_dim))

    def render_speech_stream(self, class_id: int, instance: int, count: int,
                             rng: np.random.Generator) -> np.ndarray:
        mean = self.render_speech @ self._joint_latent(SLOT_SPEAKER, class_id, instance)
        return mean + self.sigma * rng.normal(size=(count, self.speech_dim))

    def render_audio_stream(self, class_id: int, instance: int, count: int,
                            rng: np.random.Generator) -> np.ndarray:
        mean = self.render_audio @ self._joint_latent(SLOT_SOUND, class_id, instance)
        return mean + self.sigma * rng.normal(size=(count, self.audio_dim))

    def required_vocab(self) -> int:
        return required_vocab(self.classes, self.instances)


def _min_pairwise(vectors: np.ndarray) -> float:
    if len(vectors) < 2:
        return np.inf
    diffs = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diffs * diffs).sum(-1))
    dist[np.diag_indices(len(vectors))] = np.inf
    return float(dist.min())


# -- records --------------------------------------------------------------------


@dataclass(eq=False)
class PairRecord:
    """One (source, target) training pair; QA records add distractor answers
    and the questioned attribute slot."""

    task_tag: str
    source_tag: str
    class_id: int
    instance: int
    source: MultimodalSample
    target: MultimodalSample
    distractors: list[MultimodalSample] = field(default_factory=list)
    slot: int | None = None
    answer_value: int | None = None
    distractor_values: list[tuple[int, int]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairRecord):
            return NotImplemented
        return (self.task_tag == other.task_tag and self.source_tag == other.source_tag
                and self.class_id == other.class_id and self.instance == other.instance
                and self.slot == other.slot and self.answer_value == other.answer_value
                and self.distractor_values == other.distractor_values
                and self.source == other.source and self.target == other.target
                and self.distractors == other.distractors)


@dataclass
class TaskBatchPlan:
    """Indices of one mini-batch; all share task and source tags."""

    task_tag: str
    source_tag: str
    indices: list[int]


def _build_sample(spec: LatentSpec, kind: str, class_id: int, instance: int, *,
                  instruction: np.ndarray, rng: np.random.Generator,
                  task_tag: str, source_tag: str,
                  text: np.ndarray | None = None) -> MultimodalSample:
    frames = speech = audio = None
    if kind in ("visual_only", "audio_visual"):
        k = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        frames = spec.render_frames(class_id, instance, k, rng)
    if kind in ("audio_only", "audio_visual"):
        k = len(frames) if frames is not None else int(
            rng.integers(spec.frames_min, spec.frames_max + 1))
        speech = spec.render_speech_stream(class_id, instance, k, rng)
        audio = spec.render_audio_stream(class_id, instance, k, rng)
    return MultimodalSample(modality_kind=kind, instruction=instruction,
                            text_tokens=text, frames=frames, speech_stream=speech,
                            audio_stream=audio, task_tag=task_tag, source_tag=source_tag)


def _build_retrieval_record(spec: LatentSpec, group: str, class_id: int, instance: int,
                            rng: np.random.Generator) -> PairRecord:
    gs = GROUPS[group]
    source = _build_sample(spec, gs.source_kind, class_id, instance,
                           instruction=general_prompt(), rng=rng,
                           task_tag=gs.task_tag, source_tag=group)
    if gs.target_kind == "text_only":
        target = MultimodalSample(modality_kind="text_only", instruction=[],
                                  text_tokens=spec.caption_tokens(class_id, instance),
                                  task_tag=gs.task_tag, source_tag=group)
    else:
        target = _build_sample(spec, gs.target_kind, class_id, instance,
                               instruction=general_prompt(), rng=rng,
                               task_tag=gs.task_tag, source_tag=group)
    return PairRecord(task_tag=gs.task_tag, source_tag=group, class_id=class_id,
                      instance=instance, source=source, target=target)


def _build_qa_record(spec: LatentSpec, class_id: int, instance: int, n: int,
                     rng: np.random.Generator, source_tag: str = "video_qa") -> PairRecord:
    """QA pair: an audio-visual source with a slot question, the correct
    attribute answer, and n distractor answers.

    Distractor policy: one random same-slot value of a different class first,
    then the sample's own other-slot values (content-plausible candidates
    that only the question disambiguates), then more same-slot values.
    """
    if not 1 <= n < spec.classes:
        raise ValueError(f"distractor count must satisfy 1 <= n < classes, got {n}")
    slot = int(rng.integers(3))
    correct = int(spec.slot_assignment[slot, class_id])
    same_slot = [v for v in range(spec.classes) if v != correct]
    rng.shuffle(same_slot)
    cross = [(k, int(spec.slot_assignment[k, class_id])) for k in range(3) if k != slot]
    rng.shuffle(cross)
    picks: list[tuple[int, int]] = [(slot, same_slot[0])]
    picks.extend(cross[:max(0, n - 1)][:2])
    for v in same_slot[1:]:
        if len(picks) >= n:
            break
        picks.append((slot, v))
    picks = picks[:n]

    source = _build_sample(spec, "audio_visual", class_id, instance,
                           instruction=slot_question(slot), rng=rng,
                           task_tag="qa", source_tag=source_tag)
    answer = MultimodalSample(modality_kind="text_only", instruction=[],
                              text_tokens=answer_tokens(spec.classes, slot, correct),
                              task_tag="qa", source_tag=source_tag)
    distractors = [MultimodalSample(modality_kind="text_only", instruction=[],
                                    text_tokens=answer_tokens(spec.classes, k, v),
                                    task_tag="qa", source_tag=source_tag)
                   for k, v in picks]
    return PairRecord(task_tag="qa", source_tag=source_tag, class_id=class_id,
                      instance=instance, source=source, target=answer,
                      distractors=distractors, slot=slot, answer_value=correct,
                      distractor_values=[(int(k), int(v)) for k, v in picks])


def make_qa_record(class_id: int, spec: LatentSpec, n: int, seed: int,
                   instance: int = 0) -> PairRecord:
    """Build one QA record with a reproducible distractor choice."""
    return _build_qa_record(spec, class_id, instance, n, derive_rng(seed, "qa-record"))


def _balanced_identities(classes: int, instances: int, count: int,
                         rng: np.random.Generator) -> list[tuple[int, int]]:
    """Class-balanced (class, instance) assignments, unique while
    count <= classes * instances."""
    m_order = {c: rng.permutation(instances) for c in range(classes)}
    class_seq: list[int] = []
    while len(class_seq) < count:
        class_seq.extend(int(c) for c in rng.permutation(classes))
    class_seq = class_seq[:count]
    seen: dict[int, int] = {}
    out = []
    for c in class_seq:
        occ = seen.get(c, 0)
        seen[c] = occ + 1
        out.append((c, int(m_order[c][occ % instances])))
    return out


def generate_records(spec: LatentSpec, counts: dict[str, int], seed: int,
                     duplicate_fraction: float = 0.0) -> list[PairRecord]:
    """Deterministically generate records for every requested group.

    ``duplicate_fraction`` appends that fraction of extra records per group
    reusing an earlier record's identity (same class and instance, fresh
    noise), to stress-test in-batch false negatives; the default dataset has
    no duplicate targets by construction.
    """
    unknown = sorted(set(counts) - set(GROUPS))
    if unknown:
        raise ValueError(f"unknown dataset groups: {unknown}; valid: {sorted(GROUPS)}")
    records: list[PairRecord] = []
    for group in GROUPS:  # fixed order keeps the file layout deterministic
        count = int(counts.get(group, 0))
        if count < 0:
            raise ValueError(f"negative count for group {group}")
        if count == 0:
            continue
        layout_rng = derive_rng(seed, "layout", group)
        identities = _balanced_identities(spec.classes, spec.instances, count, layout_rng)
        extra = int(round(duplicate_fraction * count))
        for j in range(extra):
            identities.append(identities[int(layout_rng.integers(count))])
        for idx, (class_id, instance) in enumerate(identities):
            rng = derive_rng(seed, "record", group, idx)
            if GROUPS[group].task_tag == "qa":
                records.append(_build_qa_record(spec, class_id, instance,
                                                spec.distractors, rng, group))
            else:
                records.append(_build_retrieval_record(spec, group, class_id, instance, rng))
    return records


# -- serialization ---------------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _encode_array(arr: np.ndarray | None):
    if arr is None:
        return None
    packed = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape),
            "data": base64.b64encode(packed.tobytes()).decode("ascii")}


def _decode_array(obj) -> np.ndarray | None:
    if obj is None:
        return None
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def _sample_to_json(s: MultimodalSample) -> dict:
    return {"kind": s.modality_kind,
            "instr": s.instruction.tolist(),
            "text": None if s.text_tokens is None else s.text_tokens.tolist(),
            "frames": _encode_array(s.frames),
            "speech": _encode_array(s.speech_stream),
            "audio": _encode_array(s.audio_stream),
            "task": s.task_tag, "src": s.source_tag}


def _sample_from_json(obj: dict) -> MultimodalSample:
    return MultimodalSample(modality_kind=obj["kind"], instruction=obj["instr"],
                            text_tokens=obj["text"], frames=_decode_array(obj["frames"]),
                            speech_stream=_decode_array(obj["speech"]),
                            audio_stream=_decode_array(obj["audio"]),
                            task_tag=obj["task"], source_tag=obj["src"])


def _record_to_json(r: PairRecord) -> dict:
    return {"task": r.task_tag, "source_tag": r.source_tag, "class": r.class_id,
            "instance": r.instance, "slot": r.slot, "answer_value": r.answer_value,
            "distractor_values": [list(p) for p in r.distractor_values] or None,
            "s": _sample_to_json(r.source), "t": _sample_to_json(r.target),
            "d": [_sample_to_json(d) for d in r.distractors] or None}


def _record_from_json(obj: dict) -> PairRecord:
    return PairRecord(task_tag=obj["task"], source_tag=obj["source_tag"],
                      class_id=obj["class"], instance=obj["instance"],
                      source=_sample_from_json(obj["s"]),
                      target=_sample_from_json(obj["t"]),
                      distractors=[_sample_from_json(d) for d in (obj["d"] or [])],
                      slot=obj["slot"], answer_value=obj["answer_value"],
                      distractor_values=[tuple(p) for p in (obj["distractor_values"] or [])])


def save_dataset(path: str | Path, spec: LatentSpec, records: list[PairRecord],
                 seed: int, counts: dict[str, int]) -> dict:
    """Write header + records as line-delimited JSON; returns the header."""
    header = {"format": "wavekit-dataset", "version": 1, "seed": int(seed),
              "counts": {g: int(counts.get(g, 0)) for g in GROUPS},
              "records": len(records), "spec": spec.params(), "digest": spec.digest()}
    lines = [_canonical_json(header)]
    lines.extend(_canonical_json(_record_to_json(r)) for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return header


def load_dataset(path: str | Path) -> tuple[LatentSpec, list[PairRecord], dict]:
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format") != "wavekit-dataset":
            raise ValueError(f"{path}: not a wavekit dataset")
        records = [_record_from_json(json.loads(line)) for line in f if line.strip()]
    spec = LatentSpec.build(**header["spec"])
    if spec.digest() != header["digest"]:
        raise ValueError(f"{path}: header digest does not match the rebuilt latent spec")
    return spec, records, header


def generate_dataset(spec: LatentSpec, counts: dict[str, int], seed: int,
                     path: str | Path, duplicate_fraction: float = 0.0) -> dict:
    """Generate and serialize one dataset file; same seed, same bytes."""
    records = generate_records(spec, counts, seed, duplicate_fraction)
    return save_dataset(path, spec, records, seed, counts)


# -- batching ---------------------------------------------------------------------


def group_indices(records: list[PairRecord]) -> dict[tuple[str, str], list[int]]:
    groups: dict[tuple[str, str], list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((r.task_tag, r.source_tag), []).append(i)
    return groups


def epoch_plans(records: list[PairRecord], batch_size: int,
                rng: np.random.Generator, *, warn: bool = True) -> list[TaskBatchPlan]:
    """One epoch of batch plans: a fresh permutation within each (task,
    source) group chunked into full batches, then the plans shuffled across
    groups. Groups smaller than the batch size are dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = group_indices(records)
    retained = {k: v for k, v in sorted(groups.items()) if len(v) >= batch_size}
    if warn:
        for key in sorted(set(groups) - set(retained)):
            logger.warning("dropping group %s: %d samples < batch size %d",
                           key, len(groups[key]), batch_size)
    if not retained:
        raise EmptyEpochError(
            f"no group has {batch_size} samples; group sizes: "
            f"{ {k: len(v) for k, v in groups.items()} }")
    plans: list[TaskBatchPlan] = []
    for (task, source), idx in retained.items():
        arr = np.asarray(idx)
        shuffled = arr[rng.permutation(len(arr))]
        for b in range(len(arr) // batch_size):
            chunk = shuffled[b * batch_size:(b + 1) * batch_size]
            plans.append(TaskBatchPlan(task, source, [int(i) for i in chunk]))
    order = rng.permutation(len(plans))
    return [plans[i] for i in order]


def sample_batches(records: list[PairRecord], batch_size: int,
                   seed: int) -> Iterator[TaskBatchPlan]:
    """Infinite stream of task-homogeneous batch plans, reshuffled each epoch."""
    epoch = 0
    while True:
        rng = derive_rng(seed, "epoch", epoch)
        yield from epoch_plans(records, batch_size, rng, warn=epoch == 0)
        epoch += 1
