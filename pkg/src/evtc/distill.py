"""Knowledge-distillation losses and the teacher->student procedure.

Logit transfer is either plain MSE on the segmentation logits or a
temperature-scaled KL divergence KL(teacher || student) multiplied by T^2.
Feature transfer taps backbone blocks: "mimic" matches teacher features
through a learned linear projection, "generation" through a small two-layer
transform whose final linear reads [gelu(W1 x); x] (so a zero final layer
forces zero output while the linear map stays expressible). Alignment
parameters are trained jointly with the student; the teacher is frozen.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import models as M
from . import tensor as T
from .errors import ContractError, DimensionError
from .models import SegModel
from .tensor import Tensor
from .train import TrainConfig, TrainReport, cross_entropy, train

ALIGN_INIT_STD = 0.02


@dataclasses.dataclass
class FeatureTap:
    teacher_block: int
    student_block: int
    mode: str  # mimic | generation


@dataclasses.dataclass
class DistillSpec:
    mode: str = "logit_mse"            # logit_mse | logit_kl
    temperature: float = 2.0
    feature_taps: tuple = ()           # FeatureTap entries; see default_feature_taps
    alpha_task: float = 1.0
    alpha_logit: float = 1.0
    alpha_feat: float = 0.1

    def validate(self, teacher_blocks=None, student_blocks=None):
        if self.mode not in ("logit_mse", "logit_kl"):
            raise ContractError(f"unknown distillation mode {self.mode!r}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        for a in (self.alpha_task, self.alpha_logit, self.alpha_feat):
            if not np.isfinite(a) or a < 0:
                raise ContractError("loss weights must be finite and non-negative")
        for tap in self.feature_taps:
            if tap.mode not in ("mimic", "generation"):
                raise ContractError(f"unknown feature mode {tap.mode!r}")
            if teacher_blocks is not None and not (0 <= tap.teacher_block < teacher_blocks):
                raise IndexError(f"teacher tap {tap.teacher_block} out of range")
            if student_blocks is not None and not (0 <= tap.student_block < student_blocks):
                raise IndexError(f"student tap {tap.student_block} out of range")
        return self


def default_feature_taps(teacher_blocks: int, student_blocks: int) -> tuple:
    """Mimic on the first block pair, generation on the last."""
    taps = [FeatureTap(0, 0, "mimic")]
    if teacher_blocks > 1 or student_blocks > 1:
        taps.append(FeatureTap(teacher_blocks - 1, student_blocks - 1, "generation"))
    return tuple(taps)


def logit_mse_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    d = T.sub(student_logits, teacher_logits)
    return T.mean(T.mul(d, d))


def logit_kl_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float) -> Tensor:
    """T^2 * mean over pixels of KL(softmax(teacher/T) || softmax(student/T))."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    n, k, h, w = student_logits.shape
    inv_t = 1.0 / temperature
    t_scaled = T.scale(teacher_logits, inv_t)
    p_t = T.softmax(t_scaled, axis=1).detach()
    logp_t = T.log_softmax(t_scaled, axis=1).detach()
    logp_s = T.log_softmax(T.scale(student_logits, inv_t), axis=1)
    kl = T.sum_(T.mul(p_t, T.sub(logp_t, logp_s)))
    return T.scale(kl, temperature ** 2 / (n * h * w))


class AlignProjection:
    """Learned linear map from student feature width to teacher width."""

    def __init__(self, student_width: int, teacher_width: int, seed: int = 0,
                 identity: bool = False):
        rng = np.random.default_rng(seed)
        if identity:
            if student_width != teacher_width:
                raise ContractError("identity init needs equal widths")
            w = np.eye(student_width, dtype=np.float32)
        else:
            w = (rng.standard_normal((student_width, teacher_width)) * ALIGN_INIT_STD
                 ).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(teacher_width, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class FeatureGenerator:
    """Two-layer transform: final linear over [gelu(W1 x); x]."""

    def __init__(self, student_width: int, teacher_width: int, seed: int = 0,
                 hidden: int | None = None, identity: bool = False):
        rng = np.random.default_rng(seed)
        hidden = hidden or teacher_width
        self.w1 = Tensor((rng.standard_normal((student_width, hidden)) * ALIGN_INIT_STD
                          ).astype(np.float32), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        if identity:
            if student_width != teacher_width:
                raise ContractError("identity init needs equal widths")
            w2 = np.zeros((hidden + student_width, teacher_width), dtype=np.float32)
            w2[hidden:] = np.eye(student_width, dtype=np.float32)
        else:
            w2 = (rng.standard_normal((hidden + student_width, teacher_width))
                  * ALIGN_INIT_STD).astype(np.float32)
        self.w2 = Tensor(w2, requires_grad=True)
        self.b2 = Tensor(np.zeros(teacher_width, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.gelu(T.linear(x, self.w1, self.b1))
        return T.linear(T.concat([hidden, x], axis=-1), self.w2, self.b2)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _check_token_grids(student_feat: Tensor, teacher_feat: Tensor):
    if student_feat.shape[0] != teacher_feat.shape[0]:
        raise DimensionError("batch sizes differ between student and teacher features")
    if student_feat.shape[1] != teacher_feat.shape[1]:
        raise DimensionError(
            f"token counts differ: {student_feat.shape[1]} vs {teacher_feat.shape[1]}")


def feature_mimic_loss(student_feat: Tensor, teacher_feat: Tensor,
                       align: AlignProjection) -> Tensor:
    _check_token_grids(student_feat, teacher_feat)
    d = T.sub(align(student_feat), teacher_feat)
    return T.mean(T.mul(d, d))


def feature_generation_loss(student_feat: Tensor, teacher_feat: Tensor,
                            generator: FeatureGenerator) -> Tensor:
    _check_token_grids(student_feat, teacher_feat)
    d = T.sub(generator(student_feat), teacher_feat)
    return T.mean(T.mul(d, d))


def distill_train(student: SegModel, teacher: SegModel, dataset, spec: DistillSpec,
                  config: TrainConfig, mask=None) -> TrainReport:
    """Optimize alpha_task*CE + alpha_logit*logit + alpha_feat*sum(feature).

    The teacher is frozen and receives no gradients. Terms with zero weight
    are skipped entirely, so alpha_logit = alpha_feat = 0 reduces to plain
    train() bit-for-bit under the same seed.
    """
    spec.validate(teacher_blocks=teacher.config.num_blocks,
                  student_blocks=student.config.num_blocks)
    if teacher.config.input_resolution != student.config.input_resolution:
        raise ContractError("teacher and student resolutions differ")
    teacher.freeze()

    if spec.alpha_logit == 0 and (spec.alpha_feat == 0 or not spec.feature_taps):
        scaled = spec.alpha_task != 1.0

        def task_only(images, gts):
            logits = M.forward_segment(student, Tensor(images))
            ce = cross_entropy(logits, gts)
            return T.scale(ce, spec.alpha_task) if scaled else ce

        return train(student, dataset, config, mask=mask,
                     loss_fn=None if not scaled else task_only)

    use_feat = spec.alpha_feat > 0 and spec.feature_taps
    aligners = []
    extra = {}
    if use_feat:
        for i, tap in enumerate(spec.feature_taps):
            sw = student.config.embed_dim
            tw = teacher.config.embed_dim
            if tap.mode == "mimic":
                a = AlignProjection(sw, tw, seed=np.random.default_rng(
                    [config.seed, 1000 + i]).integers(2 ** 31))
            else:
                a = FeatureGenerator(sw, tw, seed=np.random.default_rng(
                    [config.seed, 1000 + i]).integers(2 ** 31))
            aligners.append(a)
            for pname, p in a.parameters().items():
                extra[f"distill.tap{i}.{pname}"] = p

    s_taps = [tap.student_block for tap in spec.feature_taps] if use_feat else []
    t_taps = [tap.teacher_block for tap in spec.feature_taps] if use_feat else []

    def composite(images, gts):
        imgs = Tensor(images)
        s_logits, s_feats = M._forward(student, imgs, taps=s_taps)
        with T.no_grad():
            t_logits, t_feats = M._forward(teacher, imgs, taps=t_taps)
        t_logits = Tensor(t_logits.data)
        terms = []
        if spec.alpha_task > 0:
            terms.append(T.scale(cross_entropy(s_logits, gts), spec.alpha_task))
        if spec.alpha_logit > 0:
            if spec.mode == "logit_mse":
                l = logit_mse_loss(s_logits, t_logits)
            else:
                l = logit_kl_loss(s_logits, t_logits, spec.temperature)
            terms.append(T.scale(l, spec.alpha_logit))
        if use_feat:
            for tap, aligner in zip(spec.feature_taps, aligners):
                tf = Tensor(t_feats[tap.teacher_block].data)
                sf = s_feats[tap.student_block]
                if tap.mode == "mimic":
                    l = feature_mimic_loss(sf, tf, aligner)
                else:
                    l = feature_generation_loss(sf, tf, aligner)
                terms.append(T.scale(l, spec.alpha_feat))
        total = terms[0]
        for t_ in terms[1:]:
            total = T.add(total, t_)
        return total

    return train(student, dataset, config, mask=mask, loss_fn=composite, extra_params=extra)
