"""Command-line entry point.

Subcommands: ``generate`` (write train/eval dataset files), ``train``,
``eval``, ``ablate`` (the five embedding-extraction strategies), ``demo``
(prompt-conditioned similarity matrix). Every run is driven by one JSON
config with a strict schema: unknown keys are errors, not warnings, and each
command drops a resolved-config snapshot into its output directory so runs
can be reproduced bit-for-bit.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    GROUPS,
    RETRIEVAL_GROUPS,
    LatentSpec,
    generate_dataset,
    load_dataset,
    required_vocab,
)
from .evaluation import (
    ABLATION_REFERENCE_FOOTER,
    DIRECTIONS,
    EvalReport,
    ModelEmbedder,
    demo_prompts,
    evaluate_qa,
    evaluate_retrieval,
    prompt_argmax_accuracy,
    prompt_similarity_matrix,
    run_fusion_ablation,
)
from .model import LoraConfig, Model, ModelConfig
from .objectives import ObjectiveConfig
from .reports import (
    save_ablation_chart,
    save_heatmap,
    save_loss_curve,
    save_metric_bars,
    write_csv,
    write_json,
)
from .training import DivergenceError, TrainConfig, train

logger = logging.getLogger("wavekit.cli")

DEFAULT_DIRECTIONS = ("text_to_video", "text_to_videoaudio", "video_to_audio",
                      "audio_to_text")


class ConfigError(ValueError):
    """Carries every bad config field, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class DataConfig:
    """Synthetic data parameters plus per-group record counts."""

    classes: int = 32
    core_dim: int = 8
    slot_dim: int = 8
    instances: int = 16
    instance_dim: int = 8
    sigma: float = 0.1
    frame_dim: int = 24
    speech_dim: int = 24
    audio_dim: int = 24
    frames_min: int = 2
    frames_max: int = 8
    distractors: int = 3
    latent_seed: int = 11
    duplicate_fraction: float = 0.0
    counts: dict = field(default_factory=lambda: {g: 512 for g in GROUPS})
    eval_counts: dict = field(default_factory=lambda: {g: 128 for g in GROUPS})

    def build_spec(self) -> LatentSpec:
        return LatentSpec.build(
            classes=self.classes, core_dim=self.core_dim, slot_dim=self.slot_dim,
            instances=self.instances,
            instance_dim=self.instance_dim, sigma=self.sigma, frame_dim=self.frame_dim,
            speech_dim=self.speech_dim, audio_dim=self.audio_dim,
            frames_min=self.frames_min, frames_max=self.frames_max,
            distractors=self.distractors, latent_seed=self.latent_seed)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def resolved(self) -> dict:
        return {"seed": self.seed, "out_dir": self.out_dir,
                "model": dataclasses.asdict(self.model),
                "lora": dataclasses.asdict(self.lora),
                "objective": dataclasses.asdict(self.objective),
                "train": dataclasses.asdict(self.train),
                "data": dataclasses.asdict(self.data)}

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- strict config parsing --------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "lora": LoraConfig, "objective": ObjectiveConfig,
             "train": TrainConfig, "data": DataConfig}
# train.seed is derived from the top-level seed; setting it directly would
# silently fork the run's reproducibility story.
_BANNED = {("train", "seed"): "set the top-level seed instead"}


def _coerce(section: str, key: str, value, default, errors: list[str]):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{section}.{key}: expected bool, got {type(value).__name__}")
            return default
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{section}.{key}: expected int, got {type(value).__name__}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{section}.{key}: expected number, got {type(value).__name__}")
            return default
        return float(value)
    if isinstance(default, str) or default is None:
        if default is not None and not isinstance(value, str):
            errors.append(f"{section}.{key}: expected string, got {type(value).__name__}")
            return default
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            errors.append(f"{section}.{key}: expected object, got {type(value).__name__}")
            return default
        out = {}
        for g, v in value.items():
            if g not in GROUPS:
                errors.append(f"{section}.{key}.{g}: unknown group (valid: {sorted(GROUPS)})")
                continue
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                errors.append(f"{section}.{key}.{g}: expected non-negative int")
                continue
            out[g] = v
        merged = dict(default)
        merged.update(out)
        return merged
    return value


def _parse_section(cls, payload: dict, section: str, errors: list[str]):
    base = cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, value in payload.items():
        if (section, key) in _BANNED:
            errors.append(f"{section}.{key}: {_BANNED[(section, key)]}")
            continue
        if key not in fields:
            errors.append(f"{section}.{key}: unknown key")
            continue
        updates[key] = _coerce(section, key, value, getattr(base, key), errors)
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as exc:
        errors.append(f"{section}: {exc}")
        return base


def parse_run_config(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(["config root must be a JSON object"])
    errors: list[str] = []
    cfg = RunConfig()
    for key, value in payload.items():
        if key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append("seed: expected int")
            else:
                cfg.seed = value
        elif key == "out_dir":
            if not isinstance(value, str):
                errors.append("out_dir: expected string")
            else:
                cfg.out_dir = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                errors.append(f"{key}: expected object")
            else:
                setattr(cfg, key, _parse_section(_SECTIONS[key], value, key, errors))
        else:
            errors.append(f"{key}: unknown key")
    for section in ("model", "lora", "objective", "train"):
        try:
            getattr(cfg, section).validate()
        except ValueError as exc:
            errors.append(f"{section}: {exc}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_run_config(args) -> RunConfig:
    payload = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"])
    cfg = parse_run_config(payload)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg


def _resolve_count_overrides(base: dict, overrides, errors: list[str]) -> dict:
    counts = dict(base)
    for item in overrides or ():
        if "=" not in item:
            errors.append(f"--count {item}: expected KEY=N")
            continue
        key, _, raw = item.partition("=")
        try:
            value = int(raw)
        except ValueError:
            errors.append(f"--count {item}: N must be an integer")
            continue
        if value < 0:
            errors.append(f"--count {item}: N must be >= 0")
        elif key == "retrieval":
            for g in RETRIEVAL_GROUPS:
                counts[g] = value
        elif key == "qa":
            counts["video_qa"] = value
        elif key in GROUPS:
            counts[key] = value
        else:
            errors.append(f"--count {item}: unknown group "
                          f"(valid: {sorted(GROUPS)} plus 'retrieval' and 'qa')")
    if errors:
        raise ConfigError(errors)
    return counts


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out: Path, cfg: RunConfig, command: str, extras: dict) -> None:
    write_json(out / "resolved_config.json",
               {"command": command, "config": cfg.resolved(),
                "config_digest": cfg.digest(), **extras})


def _build_model(cfg: RunConfig, spec: LatentSpec) -> Model:
    needed = spec.required_vocab()
    if cfg.model.vocab_size < needed:
        raise ConfigError([f"model.vocab_size: {cfg.model.vocab_size} is too small for "
                           f"{spec.classes} classes and {spec.instances} instances "
                           f"(need >= {needed})"])
    return Model(cfg.model, cfg.lora, seed=cfg.seed)


def _load_model(cfg: RunConfig, spec: LatentSpec, checkpoint_path: str) -> Model:
    model = _build_model(cfg, spec)
    model.load_state_arrays(load_checkpoint(checkpoint_path))
    return model


# -- commands ----------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig) -> int:
    errors: list[str] = []
    counts = _resolve_count_overrides(cfg.data.counts, args.count, errors)
    eval_counts = _resolve_count_overrides(cfg.data.eval_counts, args.eval_count, errors)
    out = _out_dir(cfg)
    spec = cfg.data.build_spec()
    # eval records come from an offset seed so noise and identity layout are
    # disjoint from training; the latent spec (class semantics) is shared.
    train_header = generate_dataset(spec, counts, cfg.seed, out / "train.jsonl",
                                    cfg.data.duplicate_fraction)
    eval_header = generate_dataset(spec, eval_counts, cfg.seed + 1, out / "eval.jsonl")
    _write_snapshot(out, cfg, "generate",
                    {"counts": train_header["counts"], "eval_counts": eval_header["counts"]})
    for name, header in (("train", train_header), ("eval", eval_header)):
        present = {g: c for g, c in header["counts"].items() if c > 0}
        print(f"{name}: {header['records']} records -> "
              + (", ".join(f"{g}={c}" for g, c in present.items()) or "empty"))
    print(f"wrote {out / 'train.jsonl'} and {out / 'eval.jsonl'}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    spec, records, _ = load_dataset(Path(args.data) / "train.jsonl")
    model = _build_model(cfg, spec)
    out = _out_dir(cfg)

    def on_checkpoint(step: int) -> None:
        save_checkpoint(out / f"checkpoint_step{step}.wavekit", model.state_arrays())

    result = train(model, records, cfg.objective, cfg.train, on_checkpoint=on_checkpoint)
    save_checkpoint(out / "checkpoint.wavekit", model.state_arrays())
    write_csv(out / "trace.csv", result.trace,
              ("step", "task", "source", "loss", "lr", "grad_norm"))
    write_json(out / "trace.json", result.trace)
    if result.trace:
        save_loss_curve(result.trace, out / "loss_curve.png")
    _write_snapshot(out, cfg, "train", {"data": str(args.data),
                                        "steps": cfg.train.steps})
    final = result.trace[-1]["loss"] if result.trace else float("nan")
    print(f"trained {cfg.train.steps} steps; final loss {final:.4f}; "
          f"artifacts in {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    spec, records, _ = load_dataset(Path(args.data) / "eval.jsonl")
    model = _load_model(cfg, spec, args.checkpoint)
    embedder = ModelEmbedder(model)
    directions = args.direction or list(DEFAULT_DIRECTIONS)
    unknown = [d for d in directions if d not in DIRECTIONS]
    if unknown:
        raise ConfigError([f"--direction {d}: unknown (valid: {sorted(DIRECTIONS)})"
                           for d in unknown])
    metrics: dict[str, float] = {}
    pools: dict[str, int] = {}
    for direction in directions:
        res = evaluate_retrieval(embedder, records, direction)
        pools[direction] = res["pool"]
        for name, value in res["recalls"].items():
            metrics[f"{direction}/{name}"] = value
    if any(r.task_tag == "qa" for r in records):
        for mode in ("per_question", "common_prompt"):
            res = evaluate_qa(embedder, records, mode, seed=cfg.seed)
            metrics[f"qa_{mode}/accuracy"] = res["accuracy"]
            pools[f"qa_{mode}"] = res["records"]
    report = EvalReport(metrics=metrics, pools=pools, seed=cfg.seed,
                        config_digest=cfg.digest(),
                        notes={"checkpoint": str(args.checkpoint),
                               "pool_policy": "full eval split, no subsampling"})
    out = _out_dir(cfg)
    write_json(out / "report.json", dataclasses.asdict(report))
    write_csv(out / "report.csv", report.rows(), ("metric", "value", "pool"))
    save_metric_bars(metrics, out / "metrics.png")
    _write_snapshot(out, cfg, "eval", {"data": str(args.data),
                                       "checkpoint": str(args.checkpoint)})
    for name in sorted(metrics):
        print(f"{name}: {metrics[name]:.4f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    spec, train_records, _ = load_dataset(Path(args.data) / "train.jsonl")
    _, eval_records, _ = load_dataset(Path(args.data) / "eval.jsonl")
    needed = spec.required_vocab()
    if cfg.model.vocab_size < needed:
        raise ConfigError([f"model.vocab_size: need >= {needed}"])
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    rows = run_fusion_ablation(cfg.model, cfg.lora, cfg.objective, train_cfg,
                               train_records, eval_records, seed=cfg.seed)
    out = _out_dir(cfg)
    write_csv(out / "ablation.csv", rows,
              ("strategy", "modality", "r_at_1", "pool", "chance", "beats_chance_99"),
              footer_comments=ABLATION_REFERENCE_FOOTER)
    save_ablation_chart(rows, out / "ablation.png")
    _write_snapshot(out, cfg, "ablate", {"data": str(args.data),
                                         "steps": train_cfg.steps})
    for row in rows:
        print(f"{row['strategy']:>14} {row['modality']:>12} R@1={row['r_at_1']:.4f} "
              f"(pool {row['pool']})")
    return 0


def cmd_demo(args, cfg: RunConfig) -> int:
    spec, records, _ = load_dataset(Path(args.data) / "eval.jsonl")
    model = _load_model(cfg, spec, args.checkpoint)
    embedder = ModelEmbedder(model)
    qa = [r for r in records if r.task_tag == "qa"]
    if not qa:
        raise ConfigError(["demo needs QA records in the eval split "
                           "(generate with video_qa > 0)"])
    if not 0 <= args.index < len(qa):
        raise ConfigError([f"--index {args.index}: out of range (have {len(qa)} QA records)"])
    record = qa[args.index]
    matrix = prompt_similarity_matrix(embedder, spec, record)
    prompt_labels = ["general"] + [f"which_{s}" for s in ("object", "sound", "speaker")]
    text_labels = ["caption", "object", "sound", "speaker"]
    accuracy = prompt_argmax_accuracy(embedder, spec, qa)
    out = _out_dir(cfg)
    rows = [{"prompt": prompt_labels[i],
             **{text_labels[j]: f"{matrix[i, j]:.6f}" for j in range(matrix.shape[1])}}
            for i in range(matrix.shape[0])]
    reference = ("full-scale reference: general-prompt vs general-text similarity "
                 "0.4473 (not reproducible at this scale)")
    write_csv(out / "similarity.csv", rows, ["prompt"] + text_labels,
              footer_comments=[reference])
    save_heatmap(matrix, prompt_labels, text_labels, out / "heatmap.png")
    write_json(out / "demo.json", {"argmax_accuracy": accuracy,
                                   "class_id": record.class_id,
                                   "instance": record.instance,
                                   "prompts": prompt_labels, "texts": text_labels,
                                   "matrix": matrix.tolist(),
                                   "full_scale_reference": reference})
    _write_snapshot(out, cfg, "demo", {"data": str(args.data),
                                       "checkpoint": str(args.checkpoint),
                                       "index": args.index})
    print(f"prompt-conditioned argmax accuracy over {len(qa)} QA records: {accuracy:.4f}")
    print(np.array_str(matrix, precision=4))
    return 0


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError([message])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wavekit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"wavekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config (strict schema)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides config out_dir)")

    p = sub.add_parser("generate", help="write train.jsonl and eval.jsonl")
    common(p)
    p.add_argument("--count", action="append", metavar="GROUP=N",
                   help="override a train count; GROUP may be a group name, "
                        "'retrieval', or 'qa'")
    p.add_argument("--eval-count", action="append", metavar="GROUP=N",
                   help="override an eval count")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="directory holding train.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and QA evaluation of a checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="directory holding eval.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", action="append",
                   help=f"retrieval direction, may repeat (default: "
                        f"{', '.join(DEFAULT_DIRECTIONS)})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score all five extraction strategies")
    common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl and eval.jsonl")
    p.add_argument("--steps", type=int, help="override training steps per strategy")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("demo", help="prompt-conditioned similarity matrix and heatmap")
    common(p)
    p.add_argument("--data", required=True, help="directory holding eval.jsonl")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="QA record to visualize")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
