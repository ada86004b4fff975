"""Magnitude pruning: unstructured, conv filter/channel, attention heads.

Units are scored per layer by L2 (or L1) norm of their weights and the
lowest-norm fraction is zeroed in place (per-layer uniform sparsity, ties
broken by lowest index). Masked semantics keep tensor dimensions; the
``materialize`` pass actually shrinks dimensions and rewires consumers so
the forward result is preserved. Filter units are output-channel slices of
stem convs; channel units are input-channel slices of stem convs past the
first; head units concatenate a head's q/k/v/o slices within a block.
"""
from __future__ import annotations

import dataclasses
import fnmatch

import numpy as np

from . import models as M
from .errors import ContractError
from .models import SegModel
from .tensor import Tensor

GRANULARITIES = ("unstructured", "filter", "channel", "head")


@dataclasses.dataclass
class PruneSpec:
    granularity: str
    sparsity: float = 0.0
    heads_to_keep: int | None = None
    criterion: str = "l2"          # l2 | l1
    scope: tuple | None = None     # parameter-name glob patterns; default per granularity

    def validate(self, model: SegModel | None = None):
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"unknown granularity {self.granularity!r}")
        if self.criterion not in ("l2", "l1"):
            raise ContractError(f"unknown criterion {self.criterion!r}")
        if self.granularity == "head":
            if self.heads_to_keep is None:
                raise ContractError("head granularity requires heads_to_keep")
            if model is not None:
                for b in range(model.config.num_blocks):
                    if not (1 <= self.heads_to_keep <= model.block_heads(b)):
                        raise ContractError(
                            f"heads_to_keep {self.heads_to_keep} outside "
                            f"[1, {model.block_heads(b)}] for block {b}")
        elif not (0.0 <= self.sparsity <= 1.0):
            raise ContractError(f"sparsity {self.sparsity} outside [0, 1]")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scope"] = list(self.scope) if self.scope else None
        return d


@dataclasses.dataclass
class UnitRecord:
    layer: str      # conv param name or "block.{b}.attn"
    kind: str       # filter | channel | head | weight-block
    index: int
    norm: float
    pruned: bool = False


@dataclasses.dataclass
class IterativeSchedule:
    step_fraction: float
    rounds: int
    finetune_iterations: int = 200

    def validate(self):
        if not (0.0 < self.step_fraction < 1.0):
            raise ContractError("step_fraction must lie strictly in (0, 1)")
        if self.rounds < 1:
            raise ContractError("rounds must be >= 1")
        if self.finetune_iterations < 0:
            raise ContractError("finetune_iterations must be >= 0")
        return self

    def cumulative_sparsity(self) -> float:
        return 1.0 - (1.0 - self.step_fraction) ** self.rounds


class PruneMask:
    """Per-parameter binary tensors plus a structured-unit ledger."""

    def __init__(self, masks: dict, ledger: list, spec: PruneSpec):
        self.masks = masks          # name -> float32 array of 0/1
        self.ledger = ledger        # list[UnitRecord]
        self.spec = spec

    def masked_counts(self):
        masked = sum(int((m == 0).sum()) for m in self.masks.values())
        total = sum(m.size for m in self.masks.values())
        return masked, total

    def pruned_units(self):
        return [(r.layer, r.index) for r in self.ledger if r.pruned]

    def ledger_dicts(self):
        return [dataclasses.asdict(r) for r in self.ledger]

    def spec_dict(self):
        return self.spec.to_dict()


def _stem_conv_names(model: SegModel):
    return [f"stem.{i}.w" for i in range(len(model.config.stem_channels))]


def default_scope(model: SegModel, granularity: str) -> tuple:
    if granularity == "filter":
        return tuple(_stem_conv_names(model))
    if granularity == "channel":
        names = _stem_conv_names(model)[1:]
        if not names:
            raise ContractError("channel granularity needs at least two stem convs")
        return tuple(names)
    if granularity == "head":
        return ("block.*.attn.*.w",)
    return ("*.w",)  # unstructured: every weight matrix / kernel


def _scope_params(model: SegModel, patterns) -> list:
    names = [n for n in model.params
             if any(fnmatch.fnmatch(n, pat) for pat in patterns)]
    if not names:
        raise ContractError(f"scope {patterns} matches no parameters")
    return names


def _norm(x: np.ndarray, criterion: str) -> float:
    flat = x.reshape(-1).astype(np.float64)
    return float(np.abs(flat).sum() if criterion == "l1" else np.sqrt((flat * flat).sum()))


def score_units(model: SegModel, spec: PruneSpec) -> dict:
    """Per-layer ledgers of (unit index, norm), sorted ascending by norm
    with lowest-index-first tie-breaking."""
    spec.validate(model)
    patterns = spec.scope or default_scope(model, spec.granularity)
    ledgers = {}
    if spec.granularity == "head":
        dh = model.head_dim
        blocks = sorted({n.split(".")[1] for n in _scope_params(model, patterns)
                         if n.startswith("block.")}, key=int)
        if not blocks:
            raise ContractError("head scope matched no attention parameters")
        for b in blocks:
            b = int(b)
            heads = model.block_heads(b)
            recs = []
            for j in range(heads):
                sl = slice(j * dh, (j + 1) * dh)
                parts = [model.params[f"block.{b}.attn.{x}.w"].data[:, sl] for x in "qkv"]
                parts.append(model.params[f"block.{b}.attn.o.w"].data[sl, :])
                norm = _norm(np.concatenate([p.reshape(-1) for p in parts]), spec.criterion)
                recs.append(UnitRecord(f"block.{b}.attn", "head", j, norm))
            ledgers[f"block.{b}.attn"] = sorted(recs, key=lambda r: (r.norm, r.index))
        return ledgers

    for name in _scope_params(model, patterns):
        w = model.params[name].data
        if spec.granularity in ("filter", "channel"):
            if w.ndim != 4:
                raise ContractError(
                    f"{spec.granularity} granularity needs conv kernels, got {name} {w.shape}")
            axis_count = w.shape[0] if spec.granularity == "filter" else w.shape[1]
            recs = []
            for j in range(axis_count):
                sl = w[j] if spec.granularity == "filter" else w[:, j]
                recs.append(UnitRecord(name, spec.granularity, j, _norm(sl, spec.criterion)))
        else:  # unstructured: each weight is its own unit; ledger kept per-layer summary
            order = np.abs(w.reshape(-1))
            recs = [UnitRecord(name, "weight-block", 0, _norm(w, spec.criterion))]
            recs[0].index = int(order.size)  # stash element count for reporting
        ledgers[name] = sorted(recs, key=lambda r: (r.norm, r.index)) \
            if spec.granularity != "unstructured" else recs
    return ledgers


def select_and_mask(model: SegModel, spec: PruneSpec, existing: PruneMask | None = None) -> PruneMask:
    """Zero the lowest-norm floor(sparsity * units) units per layer (or all
    but heads_to_keep heads per block) and return the cumulative mask.

    With ``existing`` given, only surviving units are scored and the
    fraction applies to them (iterative no-resurrection semantics).
    """
    spec.validate(model)
    patterns = spec.scope or default_scope(model, spec.granularity)
    masks = {} if existing is None else {k: v.copy() for k, v in existing.masks.items()}
    ledger = [] if existing is None else [dataclasses.replace(r) for r in existing.ledger
                                          if r.pruned]

    def get_mask(name):
        if name not in masks:
            masks[name] = np.ones_like(model.params[name].data, dtype=np.float32)
        return masks[name]

    if spec.granularity == "head":
        dh = model.head_dim
        scores = score_units(model, spec)
        for layer, recs in scores.items():
            b = int(layer.split(".")[1])
            live = [r for r in recs
                    if get_mask(f"block.{b}.attn.q.w")[:, r.index * dh].any()]
            n_prune = len(live) - spec.heads_to_keep
            if n_prune < 0:
                raise ContractError(
                    f"heads_to_keep {spec.heads_to_keep} exceeds live heads {len(live)}")
            chosen = live[:n_prune]
            for r in chosen:
                sl = slice(r.index * dh, (r.index + 1) * dh)
                for x in "qkv":
                    get_mask(f"block.{b}.attn.{x}.w")[:, sl] = 0.0
                get_mask(f"block.{b}.attn.o.w")[sl, :] = 0.0
                ledger.append(dataclasses.replace(r, pruned=True))
        _apply(model, masks)
        return PruneMask(masks, _full_ledger(ledger, scores), spec)

    if spec.granularity == "unstructured":
        for name in _scope_params(model, patterns):
            w = model.params[name].data
            m = get_mask(name)
            flat_w = np.abs(w.reshape(-1))
            flat_m = m.reshape(-1)
            live = np.flatnonzero(flat_m)
            k = int(np.floor(spec.sparsity * live.size))
            if k > 0:
                order = np.lexsort((live, flat_w[live]))  # norm asc, index asc on ties
                flat_m[live[order[:k]]] = 0.0
            ledger.append(UnitRecord(name, "weight-block", k, 0.0, pruned=k > 0))
        _apply(model, masks)
        return PruneMask(masks, ledger, spec)

    # filter / channel
    scores = score_units(model, spec)
    for name, recs in scores.items():
        m = get_mask(name)
        w = model.params[name].data
        if spec.granularity == "filter":
            live = [r for r in recs if m[r.index].any()]
        else:
            live = [r for r in recs if m[:, r.index].any()]
        k = int(np.floor(spec.sparsity * len(live)))
        if len(live) - k < 1:
            raise ContractError(
                f"sparsity {spec.sparsity} would leave no {spec.granularity} units in {name}")
        for r in live[:k]:
            if spec.granularity == "filter":
                m[r.index] = 0.0
                bias_name = name[:-2] + ".b"
                if bias_name in model.params:
                    get_mask(bias_name)[r.index] = 0.0
            else:
                m[:, r.index] = 0.0
            ledger.append(dataclasses.replace(r, pruned=True))
    _apply(model, masks)
    return PruneMask(masks, _full_ledger(ledger, scores), spec)


def _apply(model: SegModel, masks: dict):
    for name, m in masks.items():
        model.params[name].data *= m


def _full_ledger(pruned: list, scores: dict) -> list:
    pruned_keys = {(r.layer, r.index) for r in pruned}
    out = list(pruned)
    for recs in scores.values():
        for r in recs:
            if (r.layer, r.index) not in pruned_keys:
                out.append(dataclasses.replace(r, pruned=False))
    return out


def apply_mask(model: SegModel, mask: PruneMask):
    _apply(model, mask.masks)
    return model


def sparsity_report(model: SegModel, mask: PruneMask) -> dict:
    """Mask-entry accounting over the in-scope tensors, plus the effective
    parameter reduction a materialization would realize (which equals the
    count_params include_masked=True/False difference by construction)."""
    per_layer = {}
    masked_total = 0
    size_total = 0
    for name, m in mask.masks.items():
        masked = int((m == 0).sum())
        per_layer[name] = masked / m.size
        masked_total += masked
        size_total += m.size
    effective = M.count_params(model, True) - M.count_params(model, False)
    return {
        "global_sparsity": masked_total / size_total if size_total else 0.0,
        "per_layer_sparsity": per_layer,
        "params_masked": masked_total,
        "params_kept": size_total - masked_total,
        "params_removed_effective": effective,
    }


# ----------------------------------------------------------------------
# materialization


def _materialized_stem(model: SegModel, params: dict, removals):
    cfg = model.config
    keep_prev = None
    for i in range(len(cfg.stem_channels)):
        w = model.params[f"stem.{i}.w"].data
        b = model.params[f"stem.{i}.b"].data
        keep_out = [c for c in range(w.shape[0]) if c not in removals[i]]
        if not keep_out:
            raise ContractError(f"materialize would empty stem.{i}")
        new_w = w[keep_out]
        if keep_prev is not None:
            new_w = new_w[:, keep_prev]
        params[f"stem.{i}.w"] = Tensor(np.ascontiguousarray(new_w), requires_grad=True)
        params[f"stem.{i}.b"] = Tensor(b[keep_out].copy(), requires_grad=True)
        keep_prev = keep_out
    return keep_prev


def materialize(model: SegModel, mask: PruneMask) -> SegModel:
    """Shrink masked structures into a smaller model with rewired consumers.

    Forward outputs match the masked model within float32 tolerance;
    count_params(masked model, include_masked=False) equals the
    materialized model's raw count. Unstructured masks cannot be shrunk.
    """
    if mask.spec.granularity == "unstructured":
        raise ContractError("cannot materialize an unstructured mask")
    cfg = model.config
    params = dict(model.params)

    if mask.spec.granularity in ("filter", "channel"):
        removals = M.stem_boundary_removals(model)
        keep_last = _materialized_stem(model, params, removals)
        pw = model.params["patch.w"].data
        params["patch.w"] = Tensor(np.ascontiguousarray(pw[:, keep_last]), requires_grad=True)
        ls = model.params["decoder.lat_stem.w"].data
        params["decoder.lat_stem.w"] = Tensor(np.ascontiguousarray(ls[:, keep_last]),
                                              requires_grad=True)
        for name in list(params):
            if name not in ("patch.w", "decoder.lat_stem.w") and not name.startswith("stem."):
                params[name] = Tensor(model.params[name].data.copy(), requires_grad=True)
        new_cfg = dataclasses.replace(
            cfg, stem_channels=tuple(params[f"stem.{i}.w"].shape[0]
                                     for i in range(len(cfg.stem_channels))))
        return SegModel(new_cfg, params, head_mask=None)

    # heads
    dh = model.head_dim
    pruned = {}
    for r in mask.ledger:
        if r.pruned:
            pruned.setdefault(int(r.layer.split(".")[1]), set()).add(r.index)
    for name in list(params):
        params[name] = Tensor(model.params[name].data.copy(), requires_grad=True)
    for b in range(cfg.num_blocks):
        dead = pruned.get(b, set())
        if model.head_mask is not None:
            dead |= {j for j in range(model.block_heads(b)) if not model.head_mask[b][j]}
        if not dead:
            continue
        keep = [j for j in range(model.block_heads(b)) if j not in dead]
        if not keep:
            raise ContractError(f"materialize would remove every head in block {b}")
        col_idx = np.concatenate([np.arange(j * dh, (j + 1) * dh) for j in keep])
        for x in "qkv":
            w = params[f"block.{b}.attn.{x}.w"].data
            params[f"block.{b}.attn.{x}.w"] = Tensor(
                np.ascontiguousarray(w[:, col_idx]), requires_grad=True)
        o = params[f"block.{b}.attn.o.w"].data
        params[f"block.{b}.attn.o.w"] = Tensor(np.ascontiguousarray(o[col_idx, :]),
                                               requires_grad=True)
    return SegModel(dataclasses.replace(cfg), params, head_mask=None)


# ----------------------------------------------------------------------
# iterative schedule


def iterative_prune(model: SegModel, dataset, spec: PruneSpec, schedule: IterativeSchedule,
                    config, eval_dataset=None):
    """Alternate pruning a fraction of surviving units with finetuning.

    Returns (model, mask, trace); the trace records per round the realized
    cumulative sparsity over the masked tensors and the eval mean IoU
    (on ``eval_dataset`` if given, else the training set).
    """
    from .train import evaluate, train

    schedule.validate()
    spec.validate(model)
    if spec.granularity == "head":
        raise ContractError("iterative schedule applies to fractional granularities only")
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    mask = None
    trace = []
    for r in range(1, schedule.rounds + 1):
        step_spec = dataclasses.replace(spec, sparsity=schedule.step_fraction)
        mask = select_and_mask(model, step_spec, existing=mask)
        if schedule.finetune_iterations > 0:
            ft_cfg = dataclasses.replace(config, iterations=schedule.finetune_iterations,
                                         seed=config.seed + r)
            train(model, dataset, ft_cfg, mask=mask)
        masked, total = mask.masked_counts()
        report = evaluate(model, eval_ds)
        trace.append({
            "round": r,
            "cumulative_sparsity": masked / total,
            "miou": report.mean_iou,
            "finetune_iterations": schedule.finetune_iterations,
        })
    return model, mask, trace
