"""Supervised training and finetuning loops.

Fixed optimizer defaults: adam with beta1=0.9, beta2=0.999, eps=1e-8,
lr 1e-3, no weight decay, constant schedule; plain unweighted pixel-wise
cross-entropy. Runs are bit-reproducible given (model bits, dataset,
config.seed): batch order comes from a dedicated Generator and parameters
are updated in stable name order. When a prune mask is supplied, masked
gradients are zeroed before the step and the mask is re-applied after it,
so masked weights remain exactly zero.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import models as M
from . import tensor as T
from .errors import ContractError, NumericalError
from .metrics import EvalReport, evaluate_masks
from .tensor import Tensor


@dataclasses.dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"       # adam | sgd_momentum
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "cross_entropy"

    def validate(self):
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclasses.dataclass
class TrainReport:
    losses: list
    model: object
    wall_seconds: float
    seed: int


class Optimizer:
    """Adam / SGD-momentum over a stable-ordered name->Tensor map."""

    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.cfg = config
        self.t = 0
        self.state = {name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                      for name, p in params.items()}

    def step(self):
        cfg = self.cfg
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            st = self.state[name]
            if cfg.optimizer == "adam":
                st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * g
                st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * g * g
                mhat = st["m"] / (1 - cfg.beta1 ** self.t)
                vhat = st["v"] / (1 - cfg.beta2 ** self.t)
                p.data -= (cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
            else:
                st["m"] = cfg.momentum * st["m"] + g
                p.data -= (cfg.learning_rate * st["m"]).astype(p.dtype)


def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) int -> (N, K, H, W) one-hot."""
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(eye[mask].transpose(0, 3, 1, 2))


def cross_entropy(logits: Tensor, gt_masks: np.ndarray) -> Tensor:
    """Pixel-wise cross-entropy, mean over all pixels."""
    n, k, h, w = logits.shape
    logp = T.log_softmax(logits, axis=1)
    oh = Tensor(one_hot(gt_masks, k, dtype=logits.dtype.type))
    return T.scale(T.sum_(T.mul(logp, oh)), -1.0 / (n * h * w))


def _check_finite(loss_val: float, model: M.SegModel, iteration: int):
    if np.isfinite(loss_val):
        return
    offender = "loss"
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            offender = name
            break
    raise NumericalError(
        f"non-finite loss at iteration {iteration} (offending parameter: {offender})")


def apply_mask_to_model(model: M.SegModel, masks: dict):
    for name, m in masks.items():
        model.params[name].data *= m


def train(model: M.SegModel, dataset, config: TrainConfig, mask=None,
          loss_fn=None, extra_params: dict | None = None) -> TrainReport:
    """Train in place; returns the loss trace and the (same) model.

    ``loss_fn(images, gt_masks) -> scalar Tensor`` overrides the default
    cross-entropy (used by distillation); ``extra_params`` are optimized
    jointly (e.g. feature-alignment projections).
    """
    config.validate()
    if not dataset:
        raise ContractError("training dataset is empty")
    if dataset[0].image.shape[1:] != model.config.input_resolution:
        raise ContractError(
            f"dataset resolution {dataset[0].image.shape[1:]} does not match "
            f"model {model.config.input_resolution}")
    masks = mask.masks if mask is not None and not isinstance(mask, dict) else mask

    opt_params = dict(model.params)
    if extra_params:
        opt_params.update(extra_params)
    opt = Optimizer(opt_params, config)
    rng = np.random.default_rng(config.seed)

    if loss_fn is None:
        def loss_fn(images, gt_masks):
            logits = M.forward_segment(model, Tensor(images))
            return cross_entropy(logits, gt_masks)

    t0 = time.perf_counter()
    losses = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        images = np.stack([dataset[i].image for i in idx])
        gts = np.stack([dataset[i].mask for i in idx])
        loss = loss_fn(images, gts)
        loss_val = loss.item()
        _check_finite(loss_val, model, it)
        losses.append(loss_val)
        T.backward(loss)
        if masks:
            for name, m in masks.items():
                p = model.params[name]
                if p.grad is not None:
                    p.grad *= m
        opt.step()
        if masks:
            apply_mask_to_model(model, masks)
        for p in opt_params.values():
            p.zero_grad()
    return TrainReport(losses=losses, model=model, wall_seconds=time.perf_counter() - t0,
                       seed=config.seed)


def evaluate(model: M.SegModel, dataset) -> EvalReport:
    """Frozen-model evaluation; images are forwarded one at a time so the
    result is independent of any batching choice."""
    if not dataset:
        raise ContractError("evaluate on an empty dataset")
    pairs = []
    with T.no_grad():
        for sample in dataset:
            pred = M.predict_mask(model, Tensor(sample.image[None]))[0]
            pairs.append((pred, sample.mask))
    return evaluate_masks(pairs, model.config.num_classes)
