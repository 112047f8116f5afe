"""Miniature multimodal embedding transformer.

Synthetic modality encoders (single linear aligners per stream), time-aligned
multi-axis rotary positions shared across modalities of the same frame, a
pre-norm causal transformer with optional low-rank adapters on every
attention and MLP projection, and five embedding-extraction strategies over
the per-layer last-token states. Text-only inputs always use last-token
pooling from the final layer through their own learned projection.

Parameters are read-shared: forward passes never mutate them, so concurrent
evaluation over disjoint samples is safe. Training mutates parameters from a
single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import derive_rng

FUSION_STRATEGIES = ("first_layer", "middle_layer", "last_layer", "weighted_sum", "mlp_fusion")
MODALITY_KINDS = ("text_only", "visual_only", "audio_only", "audio_visual")

_POSITION_AXES = 3  # temporal, height, width
_NEG_INF = -1e30


class AlignmentError(ValueError):
    """Raised when the two audio streams disagree in length."""


class CapacityError(ValueError):
    """Raised when an encoded sequence exceeds the model's maximum length."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    d_embed: int = 32
    fusion_strategy: str = "mlp_fusion"
    max_seq_len: int = 64
    d_ff: int = 256
    fusion_hidden: int | None = None  # hidden width of the fusion MLP; defaults to d_model
    frame_dim: int = 24
    speech_dim: int = 24
    audio_dim: int = 24
    vocab_size: int = 120
    rope_base: float = 10000.0
    max_frames: int = 8

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rotary_dim(self) -> int:
        # Largest even per-axis split that fits the head: each of the three
        # axes rotates rotary_dim/3 dimensions, remaining dims pass through.
        return 2 * _POSITION_AXES * (self.head_dim // (2 * _POSITION_AXES))

    @property
    def middle_layer_index(self) -> int:
        return self.n_layers // 2

    @property
    def resolved_fusion_hidden(self) -> int:
        return self.fusion_hidden if self.fusion_hidden is not None else self.d_model

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rotary_dim < 2 * _POSITION_AXES:
            raise ValueError(
                f"head_dim={self.head_dim} too small for a {_POSITION_AXES}-axis rotary split")
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ValueError(
                f"unknown fusion_strategy {self.fusion_strategy!r}; choose from {FUSION_STRATEGIES}")
        for name in ("d_model", "n_layers", "n_heads", "d_embed", "max_seq_len", "d_ff",
                     "frame_dim", "speech_dim", "audio_dim", "vocab_size", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class LoraConfig:
    """Low-rank adapter settings. ``scale`` multiplies the A@B update
    directly (the full-scale reference uses 2.0 at rank 128)."""

    rank: int = 4
    scale: float = 2.0
    dropout: float = 0.05
    enabled: bool = True

    def validate(self) -> None:
        if self.enabled and self.rank < 1:
            raise ValueError(f"lora rank must be >= 1 when enabled, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"lora dropout must be in [0, 1), got {self.dropout}")


def _as_tokens(x) -> np.ndarray:
    return np.asarray([] if x is None else x, dtype=np.int64).reshape(-1)


def _as_features(x, dim_name: str) -> np.ndarray | None:
    if x is None:
        return None
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{dim_name} features must be a (length, dim) matrix, got {arr.shape}")
    return arr


@dataclass(eq=False)
class MultimodalSample:
    """One model input: modality payloads plus its text prompt.

    Non-text samples always carry a non-empty instruction. The two audio
    streams, when present, are synchronized frame-by-frame and must have
    equal length. Frame counts are capped upstream by the data generator.
    """

    modality_kind: str
    instruction: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    text_tokens: np.ndarray | None = None
    frames: np.ndarray | None = None
    speech_stream: np.ndarray | None = None
    audio_stream: np.ndarray | None = None
    task_tag: str = "retrieval"
    source_tag: str = "synth"

    def __post_init__(self):
        if self.modality_kind not in MODALITY_KINDS:
            raise ValueError(f"unknown modality_kind {self.modality_kind!r}")
        self.instruction = _as_tokens(self.instruction)
        if self.text_tokens is not None:
            self.text_tokens = _as_tokens(self.text_tokens)
        self.frames = _as_features(self.frames, "frame")
        self.speech_stream = _as_features(self.speech_stream, "speech")
        self.audio_stream = _as_features(self.audio_stream, "audio")
        if self.modality_kind != "text_only" and self.instruction.size == 0:
            raise ValueError("non-text samples must carry a non-empty instruction")
        if (self.speech_stream is None) != (self.audio_stream is None):
            raise AlignmentError("speech and audio streams must be provided together")
        if self.speech_stream is not None and \
                len(self.speech_stream) != len(self.audio_stream):
            raise AlignmentError(
                f"speech/audio stream lengths disagree: "
                f"{len(self.speech_stream)} vs {len(self.audio_stream)}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalSample):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (self.modality_kind == other.modality_kind
                and self.task_tag == other.task_tag
                and self.source_tag == other.source_tag
                and same(self.instruction, other.instruction)
                and same(self.text_tokens, other.text_tokens)
                and same(self.frames, other.frames)
                and same(self.speech_stream, other.speech_stream)
                and same(self.audio_stream, other.audio_stream))


@dataclass
class PositionGrid:
    """Per-token (temporal, height, width) ids plus the next free text id."""

    ids: np.ndarray  # (S, 3) int64
    next_text_position: int

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class LayerStates:
    """Last-token hidden state after every transformer layer, (L, d_model),
    plus the final layer's full sequence."""

    last_tokens: Tensor
    final_sequence: Tensor


def assign_positions(sample: MultimodalSample) -> PositionGrid:
    """Build the position grid for one sample.

    Frame-aligned tokens (the visual token of frame i and both audio tokens
    of frame i) share temporal id i, with height/width fixed at zero for
    synthetic frame features. Text tokens after a multimodal block get
    sequential ids on all three axes, starting after the block's maximum id.
    """
    rows: list[tuple[int, int, int]] = []
    block_max = -1
    if sample.frames is not None:
        for i in range(len(sample.frames)):
            rows.append((i, 0, 0))
        block_max = max(block_max, len(sample.frames) - 1)
    if sample.speech_stream is not None:
        for i in range(len(sample.speech_stream)):
            rows.append((i, 0, 0))  # speech token of frame i
            rows.append((i, 0, 0))  # audio token of frame i
        block_max = max(block_max, len(sample.speech_stream) - 1)
    text = sample.instruction if sample.modality_kind != "text_only" else (
        sample.text_tokens if sample.text_tokens is not None else sample.instruction)
    start = block_max + 1
    for j in range(len(text)):
        p = start + j
        rows.append((p, p, p))
    ids = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    return PositionGrid(ids=ids, next_text_position=start + len(text))


def _rope_frequencies(rotary_dim: int, base: float) -> np.ndarray:
    """Per-pair frequencies, one equal block of the rotary dims per axis."""
    block = rotary_dim // _POSITION_AXES      # dims per axis
    half = block // 2                         # rotation pairs per axis
    ladder = base ** (-2.0 * np.arange(half) / block)
    return np.tile(ladder, _POSITION_AXES)    # (rotary_dim / 2,)


def _rope_angles(ids: np.ndarray, rotary_dim: int, base: float) -> np.ndarray:
    """Angles per token and rotation pair: (..., S, rotary_dim / 2)."""
    freqs = _rope_frequencies(rotary_dim, base)
    half = rotary_dim // (2 * _POSITION_AXES)
    axis_ids = np.repeat(ids.astype(np.float64), half, axis=-1)  # (..., S, 3*half)
    return axis_ids * freqs


def apply_tmrope(x: Tensor, grid: PositionGrid, *, rotary_dim: int | None = None,
                 base: float = 10000.0) -> Tensor:
    """Rotate per-head query/key vectors by their multi-axis positions.

    ``x`` has shape (..., S, head_dim). The leading ``rotary_dim`` dims are
    split into three equal contiguous blocks (temporal, height, width), each
    rotated by that axis's id; the remaining dims pass through unchanged.
    """
    head_dim = x.shape[-1]
    if rotary_dim is None:
        rotary_dim = 2 * _POSITION_AXES * (head_dim // (2 * _POSITION_AXES))
    if rotary_dim % (2 * _POSITION_AXES) != 0:
        raise ValueError(
            f"rotary_dim={rotary_dim} must be divisible by {2 * _POSITION_AXES}")
    angles = _rope_angles(grid.ids, rotary_dim, base)
    cos, sin = np.cos(angles), np.sin(angles)
    if rotary_dim == head_dim:
        return ad.rope_rotate(x, cos, sin)
    rotated = ad.rope_rotate(x[..., :rotary_dim], cos, sin)
    return ad.concat([rotated, x[..., rotary_dim:]], axis=-1)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


class Model:
    """The full network. Parameters live in a flat name -> Tensor map."""

    def __init__(self, config: ModelConfig, lora: LoraConfig | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.lora = lora if lora is not None else LoraConfig(enabled=False)
        self.lora.validate()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init_params(derive_rng(seed, "model-init"))

    # -- parameters ----------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d = cfg.d_model
        self._add("embed.table", rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)))
        for name, fan_in in (("visual", cfg.frame_dim), ("speech", cfg.speech_dim),
                             ("audio", cfg.audio_dim)):
            self._add(f"{name}.w", _linear_init(rng, fan_in, d))
            self._add(f"{name}.b", np.zeros(d))
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            self._add(f"{p}.ln1.g", np.ones(d))
            self._add(f"{p}.ln1.b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.{proj}.w", _linear_init(rng, d, d))
                self._add(f"{p}.attn.{proj}.b", np.zeros(d))
            self._add(f"{p}.ln2.g", np.ones(d))
            self._add(f"{p}.ln2.b", np.zeros(d))
            self._add(f"{p}.mlp.fc1.w", _linear_init(rng, d, cfg.d_ff))
            self._add(f"{p}.mlp.fc1.b", np.zeros(cfg.d_ff))
            self._add(f"{p}.mlp.fc2.w", _linear_init(rng, cfg.d_ff, d))
            self._add(f"{p}.mlp.fc2.b", np.zeros(d))
        self._add("text_head.w", _linear_init(rng, d, cfg.d_embed))
        self._add("text_head.b", np.zeros(cfg.d_embed))
        self._add("pool_head.w", _linear_init(rng, d, cfg.d_embed))
        self._add("pool_head.b", np.zeros(cfg.d_embed))
        self._add("layer_weights", np.zeros(cfg.n_layers))
        hidden = cfg.resolved_fusion_hidden
        self._add("fusion.fc1.w", _linear_init(rng, cfg.n_layers * d, hidden))
        self._add("fusion.fc1.b", np.zeros(hidden))
        self._add("fusion.fc2.w", _linear_init(rng, hidden, cfg.d_embed))
        self._add("fusion.fc2.b", np.zeros(cfg.d_embed))
        # Adapters exist regardless of the enabled flag so toggling it never
        # perturbs base initialization. B starts at zero: a fresh adapter is
        # exactly the identity.
        lora_rng = derive_rng(self.seed, "lora-init")
        r = max(1, self.lora.rank)
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            for proj, fan_in, fan_out in (("attn.q", d, d), ("attn.k", d, d),
                                          ("attn.v", d, d), ("attn.o", d, d),
                                          ("mlp.fc1", d, cfg.d_ff), ("mlp.fc2", cfg.d_ff, d)):
                self._add(f"{p}.{proj}.lora_a", lora_rng.normal(0.0, 0.02, size=(fan_in, r)))
                self._add(f"{p}.{proj}.lora_b", np.zeros((r, fan_out)))

    def trainable_parameter_names(self) -> list[str]:
        """With adapters enabled the base transformer and the token embedding
        table stay frozen; aligners, adapters, and every fusion head train.
        With adapters disabled everything trains."""
        if not self.lora.enabled:
            return [n for n in self.params if ".lora_" not in n]
        keep_prefixes = ("visual.", "speech.", "audio.", "text_head.", "pool_head.",
                         "fusion.", "layer_weights")
        names = []
        for n in self.params:
            if ".lora_" in n or n.startswith(keep_prefixes) or n == "layer_weights":
                names.append(n)
        return names

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in self.trainable_parameter_names()}

    def set_trainable_flags(self) -> None:
        """Mark only trainable parameters as requiring gradients."""
        trainable = set(self.trainable_parameter_names())
        for n, p in self.params.items():
            p.requires_grad = n in trainable

    # -- encoding ------------------------------------------------------------

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def encode_modalities(self, sample: MultimodalSample) -> tuple[Tensor, PositionGrid]:
        """Map one sample to its token-embedding sequence and position grid.

        Layout: visual tokens (one per frame), then the two audio streams
        interleaved speech-then-audio per frame, then instruction/text tokens
        through the embedding table.
        """
        parts: list[Tensor] = []
        if sample.frames is not None and len(sample.frames):
            parts.append(self._lin(Tensor(sample.frames), "visual"))
        if sample.speech_stream is not None and len(sample.speech_stream):
            sp = self._lin(Tensor(sample.speech_stream), "speech")
            au = self._lin(Tensor(sample.audio_stream), "audio")
            k, d = sp.shape
            parts.append(ad.concat([sp, au], axis=1).reshape(2 * k, d))
        text = sample.instruction if sample.modality_kind != "text_only" else (
            sample.text_tokens if sample.text_tokens is not None else sample.instruction)
        if len(text):
            if int(text.max()) >= self.config.vocab_size:
                raise ValueError(
                    f"token id {int(text.max())} out of range for vocab {self.config.vocab_size}")
            parts.append(ad.embedding_lookup(self.params["embed.table"], text))
        if not parts:
            raise ValueError("sample encodes to an empty sequence")
        seq = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return seq, assign_positions(sample)

    # -- transformer ---------------------------------------------------------

    def _project(self, x: Tensor, name: str, *, train: bool,
                 rng: np.random.Generator | None) -> Tensor:
        out = self._lin(x, name)
        if self.lora.enabled:
            branch = x
            if train and self.lora.dropout > 0.0:
                if rng is None:
                    raise ValueError("training forward needs an rng for adapter dropout")
                branch = ad.dropout(branch, self.lora.dropout, rng)
            a = self.params[f"{name}.lora_a"]
            b = self.params[f"{name}.lora_b"]
            out = out + (branch @ a @ b) * self.lora.scale
        return out

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layernorm(x) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def _forward_padded(self, seqs: list[Tensor], grids: list[PositionGrid], *,
                        train: bool, rng: np.random.Generator | None):
        """Run the transformer over right-padded sequences.

        Returns (per-layer last-token tensors [(B, d)], final states (B, S, d),
        lengths).
        """
        cfg = self.config
        lengths = [t.shape[0] for t in seqs]
        s_max = max(lengths)
        for n in lengths:
            if n > cfg.max_seq_len:
                raise CapacityError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
        x = ad.pad_stack(seqs, s_max)                          # (B, S, d)
        bsz = len(seqs)

        ids = np.zeros((bsz, s_max, _POSITION_AXES), dtype=np.int64)
        valid = np.zeros((bsz, s_max), dtype=bool)
        for i, g in enumerate(grids):
            ids[i, :lengths[i]] = g.ids
            valid[i, :lengths[i]] = True

        angles = _rope_angles(ids, cfg.rotary_dim, cfg.rope_base)
        cos = np.cos(angles)[:, None, :, :]                    # (B, 1, S, rot/2)
        sin = np.sin(angles)[:, None, :, :]

        causal = np.triu(np.full((s_max, s_max), _NEG_INF), k=1)
        mask = np.broadcast_to(causal, (bsz, 1, s_max, s_max)).copy()
        mask[~valid[:, None, None, :].repeat(s_max, axis=2)] = _NEG_INF
        mask_t = Tensor(mask)

        last_idx = np.asarray(lengths, dtype=np.intp) - 1
        last_tokens: list[Tensor] = []
        h = cfg.n_heads
        dh = cfg.head_dim
        scale = 1.0 / np.sqrt(dh)

        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            normed = self._ln(x, f"{p}.ln1")
            q = self._project(normed, f"{p}.attn.q", train=train, rng=rng)
            k = self._project(normed, f"{p}.attn.k", train=train, rng=rng)
            v = self._project(normed, f"{p}.attn.v", train=train, rng=rng)
            q = q.reshape(bsz, s_max, h, dh).transpose((0, 2, 1, 3))
            k = k.reshape(bsz, s_max, h, dh).transpose((0, 2, 1, 3))
            v = v.reshape(bsz, s_max, h, dh).transpose((0, 2, 1, 3))
            q = self._rotate(q, cos, sin)
            k = self._rotate(k, cos, sin)
            scores = (q @ k.transpose((0, 1, 3, 2))) * scale + mask_t
            attn = ad.softmax(scores, axis=-1)
            ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(bsz, s_max, cfg.d_model)
            x = x + self._project(ctx, f"{p}.attn.o", train=train, rng=rng)
            normed = self._ln(x, f"{p}.ln2")
            inner = ad.gelu(self._project(normed, f"{p}.mlp.fc1", train=train, rng=rng))
            x = x + self._project(inner, f"{p}.mlp.fc2", train=train, rng=rng)
            last_tokens.append(ad.gather_rows(x, last_idx))

        return last_tokens, x, lengths

    def _rotate(self, t: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
        rot = self.config.rotary_dim
        if rot == self.config.head_dim:
            return ad.rope_rotate(t, cos, sin)
        rotated = ad.rope_rotate(t[..., :rot], cos, sin)
        return ad.concat([rotated, t[..., rot:]], axis=-1)

    def forward(self, sample: MultimodalSample, *, train: bool = False,
                rng: np.random.Generator | None = None) -> LayerStates:
        """Single-sample forward pass recording every layer's last token."""
        seq, grid = self.encode_modalities(sample)
        last_tokens, final, lengths = self._forward_padded(
            [seq], [grid], train=train, rng=rng)
        stacked = ad.concat([t.reshape(1, self.config.d_model) for t in last_tokens], axis=0)
        return LayerStates(last_tokens=stacked, final_sequence=final[0, :lengths[0]])

    # -- embedding extraction --------------------------------------------------

    def _fuse(self, last_tokens: list[Tensor], modality_kind: str) -> Tensor:
        """Reduce per-layer last tokens (each (B, d)) to embeddings (B, e)."""
        cfg = self.config
        if modality_kind == "text_only":
            return self._lin(last_tokens[-1], "text_head")
        strategy = cfg.fusion_strategy
        if strategy == "first_layer":
            return self._lin(last_tokens[0], "pool_head")
        if strategy == "middle_layer":
            return self._lin(last_tokens[cfg.middle_layer_index], "pool_head")
        if strategy == "last_layer":
            return self._lin(last_tokens[-1], "pool_head")
        bsz = last_tokens[0].shape[0]
        stacked = ad.concat(
            [t.reshape(bsz, 1, cfg.d_model) for t in last_tokens], axis=1)  # (B, L, d)
        if strategy == "weighted_sum":
            weights = ad.softmax(self.params["layer_weights"], axis=-1)
            combined = ad.tensor_sum(stacked * weights.reshape(1, cfg.n_layers, 1), axis=1)
            return self._lin(combined, "pool_head")
        flat = stacked.reshape(bsz, cfg.n_layers * cfg.d_model)
        hidden = ad.gelu(self._lin(flat, "fusion.fc1"))
        return self._lin(hidden, "fusion.fc2")

    def extract_embedding(self, states: LayerStates, modality_kind: str) -> Tensor:
        """Fuse one sample's layer states into a d_embed vector."""
        rows = [states.last_tokens[i].reshape(1, self.config.d_model)
                for i in range(self.config.n_layers)]
        return self._fuse(rows, modality_kind).reshape(self.config.d_embed)

    def embed_batch(self, samples: Sequence[MultimodalSample], *, train: bool = False,
                    rng: np.random.Generator | None = None,
                    instruction_override: np.ndarray | None = None) -> Tensor:
        """Embed a modality-homogeneous batch, returning (B, d_embed).

        ``instruction_override`` swaps every sample's prompt for a common one
        (prompt-conditioning experiments).
        """
        kinds = {s.modality_kind for s in samples}
        if len(kinds) != 1:
            raise ValueError(f"embed_batch needs a single modality kind, got {sorted(kinds)}")
        kind = kinds.pop()
        if instruction_override is not None:
            override = np.asarray(instruction_override, dtype=np.int64)
            samples = [MultimodalSample(
                modality_kind=s.modality_kind, instruction=override,
                text_tokens=s.text_tokens, frames=s.frames,
                speech_stream=s.speech_stream, audio_stream=s.audio_stream,
                task_tag=s.task_tag, source_tag=s.source_tag) for s in samples]
        encoded = [self.encode_modalities(s) for s in samples]
        last_tokens, _, _ = self._forward_padded(
            [e[0] for e in encoded], [e[1] for e in encoded], train=train, rng=rng)
        return self._fuse(last_tokens, kind)

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        unexpected = sorted(set(state) - set(self.params))
        if missing or unexpected:
            raise ValueError(
                f"checkpoint does not match model: missing={missing} unexpected={unexpected}")
        for n, arr in state.items():
            if arr.shape != self.params[n].data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {n}: {arr.shape} vs {self.params[n].data.shape}")
            self.params[n] = Tensor(np.asarray(arr, dtype=np.float64),
                                    requires_grad=self.params[n].requires_grad)
