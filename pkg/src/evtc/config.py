"""Experiment configuration: strict JSON schema for the CLI runner.

Every section is validated before any compute; unknown keys are rejected.
Precedence for seed/output settings: command-line flag > environment
variable (EVTC_SEED, EVTC_OUT, EVTC_CONFIG, EVTC_CHECKPOINT) > config file.
"""
from __future__ import annotations

import dataclasses
import json
import os

from .distill import DistillSpec, FeatureTap
from .errors import ConfigError
from .models import ModelConfig, student_config, teacher_config
from .data import SceneSpec
from .prune import IterativeSchedule, PruneSpec
from .quant import QuantSpec
from .train import TrainConfig

ENV_PREFIX = "EVTC_"


def _check_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _build_dataclass(cls, section: dict, where: str, **extra):
    fields = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, fields, where)
    return cls(**{**section, **extra})


@dataclasses.dataclass
class DataSection:
    scene: SceneSpec
    train_samples: int = 64
    eval_samples: int = 24


@dataclasses.dataclass
class PruneSection:
    spec: PruneSpec
    finetune_iterations: int = 0
    materialize: bool = False
    iterative: IterativeSchedule | None = None


@dataclasses.dataclass
class BenchSection:
    warmup: int = 1
    runs: int = 1


@dataclasses.dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    student: ModelConfig
    teacher: ModelConfig | None
    data: DataSection
    train: TrainConfig
    distill: DistillSpec | None
    teacher_iterations: int
    prune: PruneSection | None
    quant: QuantSpec | None
    bench: BenchSection


_TOP_KEYS = ("seed", "output_dir", "model", "data", "train", "distill", "prune",
             "quant", "bench")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config root")

    seed = int(doc.get("seed", 0))
    output_dir = doc.get("output_dir", "runs/out")

    model_sec = dict(doc.get("model", {}))
    _check_keys(model_sec, ("student", "teacher"), "model")
    student_over = dict(model_sec.get("student", {}))
    teacher_over = model_sec.get("teacher")
    mc_fields = {f.name for f in dataclasses.fields(ModelConfig)} - {"role"}
    _check_keys(student_over, mc_fields, "model.student")
    student = student_config(**student_over)

    data_sec = dict(doc.get("data", {}))
    _check_keys(data_sec, {f.name for f in dataclasses.fields(SceneSpec)}
                | {"train_samples", "eval_samples"}, "data")
    train_samples = int(data_sec.pop("train_samples", 64))
    eval_samples = int(data_sec.pop("eval_samples", 24))
    scene = SceneSpec(**{**data_sec, "seed": int(data_sec.get("seed", seed))}).validate()
    if tuple(scene.resolution) != tuple(student.input_resolution):
        raise ConfigError(
            f"data resolution {scene.resolution} != model resolution {student.input_resolution}")
    if scene.num_classes != student.num_classes:
        raise ConfigError("data num_classes differs from model num_classes")
    data = DataSection(scene=scene, train_samples=train_samples, eval_samples=eval_samples)

    train_sec = dict(doc.get("train", {}))
    train_cfg = _build_dataclass(
        TrainConfig, {**train_sec, "seed": int(train_sec.get("seed", seed))},
        "train").validate()

    distill_spec = None
    teacher = None
    teacher_iterations = train_cfg.iterations
    if "distill" in doc:
        dsec = dict(doc["distill"])
        allowed = {f.name for f in dataclasses.fields(DistillSpec)} | {"teacher_iterations"}
        _check_keys(dsec, allowed, "distill")
        teacher_iterations = int(dsec.pop("teacher_iterations", train_cfg.iterations))
        taps = dsec.pop("feature_taps", None)
        if taps is not None:
            taps = tuple(FeatureTap(int(t[0]), int(t[1]), str(t[2])) for t in taps)
            dsec["feature_taps"] = taps
        distill_spec = DistillSpec(**dsec)
        t_over = dict(teacher_over or {})
        _check_keys(t_over, mc_fields, "model.teacher")
        t_over.setdefault("input_resolution", student.input_resolution)
        t_over.setdefault("num_classes", student.num_classes)
        teacher = teacher_config(**t_over)
        if distill_spec.feature_taps == () and distill_spec.alpha_feat > 0:
            from .distill import default_feature_taps
            distill_spec.feature_taps = default_feature_taps(
                teacher.num_blocks, student.num_blocks)
        distill_spec.validate(teacher.num_blocks, student.num_blocks)

    prune_section = None
    if "prune" in doc:
        psec = dict(doc["prune"])
        allowed = {f.name for f in dataclasses.fields(PruneSpec)} | {
            "finetune_iterations", "materialize", "iterative"}
        _check_keys(psec, allowed, "prune")
        finetune = int(psec.pop("finetune_iterations", 0))
        materialize = bool(psec.pop("materialize", False))
        itsec = psec.pop("iterative", None)
        schedule = None
        if itsec is not None:
            schedule = _build_dataclass(IterativeSchedule, dict(itsec),
                                        "prune.iterative").validate()
        if "scope" in psec and psec["scope"] is not None:
            psec["scope"] = tuple(psec["scope"])
        spec = PruneSpec(**psec).validate()
        prune_section = PruneSection(spec=spec, finetune_iterations=finetune,
                                     materialize=materialize, iterative=schedule)

    quant_spec = None
    if "quant" in doc:
        qsec = dict(doc["quant"])
        _check_keys(qsec, {f.name for f in dataclasses.fields(QuantSpec)}, "quant")
        quant_spec = QuantSpec(**qsec).validate()

    bench = _build_dataclass(BenchSection, dict(doc.get("bench", {})), "bench")
    if bench.runs < 1 or bench.warmup < 0:
        raise ConfigError("bench needs runs >= 1 and warmup >= 0")

    return ExperimentConfig(seed=seed, output_dir=output_dir, student=student,
                            teacher=teacher, data=data, train=train_cfg,
                            distill=distill_spec, teacher_iterations=teacher_iterations,
                            prune=prune_section, quant=quant_spec, bench=bench)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return parse_config(doc)


def resolve_option(flag_value, env_name: str, config_value, default=None):
    """flag > environment > config file > default."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(ENV_PREFIX + env_name)
    if env is not None:
        return env
    if config_value is not None:
        return config_value
    return default
