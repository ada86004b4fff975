"""Configurable hybrid conv+attention segmentation networks.

One parametric family covers both roles: ``student`` (narrow, shallow) and
``teacher`` (wide, deep). The layout is a strided conv stem, a patch
embedding, pre-LN transformer blocks with multi-head self-attention, and a
two-scale pyramid-fusion decoder with a conv classification head.

Parameter naming scheme (stable; biases use the ``.b`` suffix):
    stem.{i}.w / stem.{i}.b        4x4 stride-2 pad-1 convs (exact halving)
    patch.w / patch.b              patch embedding conv (k = stride = patch_size)
    block.{b}.ln1.g / .ln1.b       pre-attention layer norm
    block.{b}.attn.{q|k|v|o}.w     attention projections, bias-free
    block.{b}.ln2.g / .ln2.b       pre-MLP layer norm
    block.{b}.mlp.0.w / .0.b       MLP expand
    block.{b}.mlp.1.w / .1.b       MLP contract
    norm.g / norm.b                final token norm
    decoder.lat_tok.w / .b         1x1 lateral on the token map
    decoder.lat_stem.w / .b        1x1 lateral on the last stem map
    decoder.fuse.w / .b            3x3 fusion conv
    head.w / head.b                1x1 classifier conv

Attention head j owns columns [j*dh, (j+1)*dh) of q/k/v and rows of o,
where dh = embed_dim // num_heads. A head_mask zeroes masked heads'
attention-output contributions at forward time; materialized pruning (see
the prune module) shrinks the projections instead, so a block's live head
count is always derived from the stored q-projection width.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INIT_STD = 0.02  # truncated-normal std for attention/MLP weights


@dataclasses.dataclass
class ModelConfig:
    input_resolution: tuple = (64, 64)
    num_classes: int = 14
    stem_channels: tuple = (16, 32)
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    mlp_ratio: int = 2
    decoder_channels: int = 32
    patch_size: int = 2
    role: str = "student"

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.stem_channels = tuple(int(v) for v in self.stem_channels)

    @property
    def stem_stride(self):
        return 2 ** len(self.stem_channels)

    @property
    def token_grid(self):
        h, w = self.input_resolution
        s = self.stem_stride * self.patch_size
        return (h // s, w // s)

    def validate(self):
        h, w = self.input_resolution
        if h < 16 or w < 16:
            raise ConfigError(f"input resolution {self.input_resolution} below minimum 16x16")
        if not (2 <= self.num_classes <= 255):
            raise ConfigError(f"num_classes {self.num_classes} outside [2, 255]")
        if not self.stem_channels or any(c < 1 for c in self.stem_channels):
            raise ConfigError("stem_channels must be a non-empty list of positive ints")
        for name in ("embed_dim", "num_heads", "num_blocks", "mlp_ratio",
                     "decoder_channels", "patch_size"):
            if getattr(self, name) < 1 and not (name == "num_blocks" and self.num_blocks == 0):
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        s = self.stem_stride
        if h % s or w % s:
            raise ConfigError(f"resolution {self.input_resolution} not divisible by stem stride {s}")
        if (h // s) % self.patch_size or (w // s) % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide post-stem side {(h // s, w // s)}")
        if self.role not in ("student", "teacher"):
            raise ConfigError(f"role must be 'student' or 'teacher', got {self.role!r}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def student_config(**overrides) -> ModelConfig:
    return ModelConfig(role="student", **overrides).validate()


def teacher_config(**overrides) -> ModelConfig:
    defaults = dict(stem_channels=(24, 48), embed_dim=128, num_blocks=4,
                    decoder_channels=48, role="teacher")
    defaults.update(overrides)
    return ModelConfig(**defaults).validate()


class SegModel:
    """A config plus a named map of parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict, head_mask=None):
        self.config = config
        self.params = params
        self.head_mask = head_mask  # bool array (num_blocks, num_heads) or None

    @property
    def head_dim(self):
        return self.config.embed_dim // self.config.num_heads

    def block_heads(self, b: int) -> int:
        """Live head count of block b, derived from the stored q width."""
        return self.params[f"block.{b}.attn.q.w"].shape[1] // self.head_dim

    def named_parameters(self):
        return self.params.items()

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    def copy(self) -> "SegModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        hm = None if self.head_mask is None else self.head_mask.copy()
        return SegModel(dataclasses.replace(self.config), params, hm)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _trunc_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        nbad = int(bad.sum())
        if nbad == 0:
            break
        x[bad] = rng.standard_normal(nbad)
    return (x * std).astype(np.float32)


def _fan_in_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(config: ModelConfig, seed: int) -> SegModel:
    """Instantiate a model with seeded init; identical (config, seed) pairs
    produce bit-identical parameter buffers."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    hidden = d * config.mlp_ratio
    dc = config.decoder_channels
    params = {}

    def add(name, data):
        params[name] = Tensor(data, requires_grad=True)

    cin = 3
    for i, cout in enumerate(config.stem_channels):
        add(f"stem.{i}.w", _fan_in_uniform(rng, (cout, cin, 4, 4)))
        add(f"stem.{i}.b", np.zeros(cout, dtype=np.float32))
        cin = cout
    ps = config.patch_size
    add("patch.w", _fan_in_uniform(rng, (d, cin, ps, ps)))
    add("patch.b", np.zeros(d, dtype=np.float32))
    for b in range(config.num_blocks):
        add(f"block.{b}.ln1.g", np.ones(d, dtype=np.float32))
        add(f"block.{b}.ln1.b", np.zeros(d, dtype=np.float32))
        for proj in "qkvo":
            add(f"block.{b}.attn.{proj}.w", _trunc_normal(rng, (d, d), INIT_STD))
        add(f"block.{b}.ln2.g", np.ones(d, dtype=np.float32))
        add(f"block.{b}.ln2.b", np.zeros(d, dtype=np.float32))
        add(f"block.{b}.mlp.0.w", _trunc_normal(rng, (d, hidden), INIT_STD))
        add(f"block.{b}.mlp.0.b", np.zeros(hidden, dtype=np.float32))
        add(f"block.{b}.mlp.1.w", _trunc_normal(rng, (hidden, d), INIT_STD))
        add(f"block.{b}.mlp.1.b", np.zeros(d, dtype=np.float32))
    add("norm.g", np.ones(d, dtype=np.float32))
    add("norm.b", np.zeros(d, dtype=np.float32))
    add("decoder.lat_tok.w", _fan_in_uniform(rng, (dc, d, 1, 1)))
    add("decoder.lat_tok.b", np.zeros(dc, dtype=np.float32))
    add("decoder.lat_stem.w", _fan_in_uniform(rng, (dc, config.stem_channels[-1], 1, 1)))
    add("decoder.lat_stem.b", np.zeros(dc, dtype=np.float32))
    add("decoder.fuse.w", _fan_in_uniform(rng, (dc, dc, 3, 3)))
    add("decoder.fuse.b", np.zeros(dc, dtype=np.float32))
    add("head.w", _fan_in_uniform(rng, (config.num_classes, dc, 1, 1)))
    add("head.b", np.zeros(config.num_classes, dtype=np.float32))
    return SegModel(config, params)


def _forward(model: SegModel, image: Tensor, taps=()):
    """Single forward pass; returns (logits, {tap: token features})."""
    cfg = model.config
    n = image.shape[0]
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != cfg.input_resolution:
        raise DimensionError(
            f"expected image of shape (N, 3, {cfg.input_resolution[0]}, "
            f"{cfg.input_resolution[1]}), got {tuple(image.shape)}")
    for t in taps:
        if not (0 <= t < cfg.num_blocks):
            raise IndexError(f"tap {t} out of range for {cfg.num_blocks} blocks")
    p = model.params

    x = image
    for i in range(len(cfg.stem_channels)):
        x = T.relu(T.conv2d(x, p[f"stem.{i}.w"], p[f"stem.{i}.b"], stride=2, padding=1))
    stem_map = x

    ps = cfg.patch_size
    tok_map = T.conv2d(stem_map, p["patch.w"], p["patch.b"], stride=ps)
    _, d, ht, wt = tok_map.shape
    ntok = ht * wt
    tok = T.transpose(T.reshape(tok_map, (n, d, ntok)), (0, 2, 1))  # (N, T, d)

    dh = model.head_dim
    feats = {}
    for b in range(cfg.num_blocks):
        heads = model.block_heads(b)
        h_in = T.layer_norm(tok, p[f"block.{b}.ln1.g"], p[f"block.{b}.ln1.b"])
        q = T.linear(h_in, p[f"block.{b}.attn.q.w"])
        k = T.linear(h_in, p[f"block.{b}.attn.k.w"])
        v = T.linear(h_in, p[f"block.{b}.attn.v.w"])
        q = T.transpose(T.reshape(q, (n, ntok, heads, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (n, ntok, heads, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (n, ntok, heads, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)                                # (N, heads, T, dh)
        if model.head_mask is not None:
            keep = model.head_mask[b].astype(np.float32)
            if keep.shape != (heads,):
                raise DimensionError(
                    f"head_mask for block {b} has length {keep.shape[0]}, expected {heads}")
            mask = np.ascontiguousarray(
                np.broadcast_to(keep[None, :, None, None], ctx.shape)).astype(ctx.dtype.type)
            ctx = T.mul(ctx, Tensor(mask))
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, ntok, heads * dh))
        tok = T.add(tok, T.linear(merged, p[f"block.{b}.attn.o.w"]))

        m_in = T.layer_norm(tok, p[f"block.{b}.ln2.g"], p[f"block.{b}.ln2.b"])
        m = T.linear(m_in, p[f"block.{b}.mlp.0.w"], p[f"block.{b}.mlp.0.b"])
        m = T.gelu(m)
        m = T.linear(m, p[f"block.{b}.mlp.1.w"], p[f"block.{b}.mlp.1.b"])
        tok = T.add(tok, m)
        if b in taps:
            feats[b] = tok

    tok = T.layer_norm(tok, p["norm.g"], p["norm.b"])
    tok_map = T.reshape(T.transpose(tok, (0, 2, 1)), (n, d, ht, wt))

    lat_tok = T.conv2d(tok_map, p["decoder.lat_tok.w"], p["decoder.lat_tok.b"])
    lat_tok = T.nearest_upsample(lat_tok, ps)
    lat_stem = T.conv2d(stem_map, p["decoder.lat_stem.w"], p["decoder.lat_stem.b"])
    fused = T.relu(T.conv2d(T.add(lat_tok, lat_stem), p["decoder.fuse.w"],
                            p["decoder.fuse.b"], padding=1))
    logits = T.conv2d(fused, p["head.w"], p["head.b"])
    logits = T.nearest_upsample(logits, cfg.stem_stride)
    return logits, feats


def forward_segment(model: SegModel, image: Tensor) -> Tensor:
    """Per-pixel class logits (N, K, H, W) at input resolution."""
    return _forward(model, image)[0]


def extract_features(model: SegModel, image: Tensor, taps) -> dict:
    """Post-block token feature maps (N, T, d) for the requested blocks."""
    taps = list(taps)
    return _forward(model, image, taps=taps)[1]


def predict_mask(model: SegModel, image: Tensor) -> np.ndarray:
    with T.no_grad():
        logits = forward_segment(model, image)
    return logits.data.argmax(axis=1)


# ----------------------------------------------------------------------
# accounting


def param_count(params) -> int:
    """Raw element count over a name->Tensor map (or iterable of tensors)."""
    values = params.values() if hasattr(params, "values") else params
    return int(sum(p.size for p in values))


def _zero_filters(w, b):
    """Output channels whose kernel slice and bias are identically zero."""
    dead = [c for c in range(w.shape[0])
            if not w.data[c].any() and (b is None or b.data[c] == 0.0)]
    return set(dead)


def _zero_in_channels(w):
    return {c for c in range(w.shape[1]) if not w.data[:, c].any()}


def _dead_heads(model: SegModel, b: int) -> set:
    """Heads removed by head_mask or with all-zero q/k/v/o slices."""
    dh = model.head_dim
    heads = model.block_heads(b)
    dead = set()
    for j in range(heads):
        if model.head_mask is not None and not model.head_mask[b][j]:
            dead.add(j)
            continue
        sl = slice(j * dh, (j + 1) * dh)
        q = model.params[f"block.{b}.attn.q.w"].data[:, sl]
        k = model.params[f"block.{b}.attn.k.w"].data[:, sl]
        v = model.params[f"block.{b}.attn.v.w"].data[:, sl]
        o = model.params[f"block.{b}.attn.o.w"].data[sl, :]
        if not (q.any() or k.any() or v.any() or o.any()):
            dead.add(j)
    return dead


def stem_boundary_removals(model: SegModel):
    """Per stem-stage sets of channels that a materialization would drop.

    A channel at the boundary after stem conv i disappears when either the
    producing filter is fully masked or every consumer's input slice is.
    """
    cfg = model.config
    n_stem = len(cfg.stem_channels)
    removals = []
    for i in range(n_stem):
        w = model.params[f"stem.{i}.w"]
        b = model.params[f"stem.{i}.b"]
        dead = _zero_filters(w, b)
        if i + 1 < n_stem:
            dead |= _zero_in_channels(model.params[f"stem.{i + 1}.w"])
        else:
            dead |= (_zero_in_channels(model.params["patch.w"])
                     & _zero_in_channels(model.params["decoder.lat_stem.w"]))
        removals.append(dead)
    return removals


def count_params(model: SegModel, include_masked: bool = True) -> int:
    """Parameter count; with include_masked=False, fully-masked structured
    units (heads, filters, channels) and the slices a materialization would
    rewire away are excluded, so the result equals the materialized count."""
    if include_masked:
        return param_count(model.params)

    cfg = model.config
    removals = stem_boundary_removals(model)
    total = 0
    cin = 3
    for i in range(len(cfg.stem_channels)):
        w = model.params[f"stem.{i}.w"]
        kept_out = w.shape[0] - len(removals[i])
        total += kept_out * cin * w.shape[2] * w.shape[3] + kept_out
        cin = kept_out
    pw = model.params["patch.w"]
    total += pw.shape[0] * cin * pw.shape[2] * pw.shape[3] + pw.shape[0]

    d = cfg.embed_dim
    dh = model.head_dim
    for b in range(cfg.num_blocks):
        kept_heads = model.block_heads(b) - len(_dead_heads(model, b))
        total += 4 * d * dh * kept_heads
        for name in (f"block.{b}.ln1.g", f"block.{b}.ln1.b", f"block.{b}.ln2.g",
                     f"block.{b}.ln2.b", f"block.{b}.mlp.0.w", f"block.{b}.mlp.0.b",
                     f"block.{b}.mlp.1.w", f"block.{b}.mlp.1.b"):
            total += model.params[name].size
    total += model.params["norm.g"].size + model.params["norm.b"].size
    lt = model.params["decoder.lat_tok.w"]
    total += lt.size + model.params["decoder.lat_tok.b"].size
    ls = model.params["decoder.lat_stem.w"]
    total += ls.shape[0] * cin * ls.shape[2] * ls.shape[3] + ls.shape[0]
    total += model.params["decoder.fuse.w"].size + model.params["decoder.fuse.b"].size
    total += model.params["head.w"].size + model.params["head.b"].size
    return int(total)


def count_flops(model: SegModel, resolution=None) -> int:
    """Multiply-accumulate estimate for one image.

    conv: Cout*Cin*kh*kw*H'*W'; token linear: T*din*dout; attention scores
    and weighted sum: 2*T^2*(live heads * head_dim) per block; MLP counted
    as two token linears. Normalizations and softmax are excluded.
    """
    cfg = model.config
    if resolution is None:
        resolution = cfg.input_resolution
    if tuple(resolution) != cfg.input_resolution:
        raise DimensionError(
            f"resolution {tuple(resolution)} does not match config {cfg.input_resolution}")
    h, w = resolution
    total = 0
    for i in range(len(cfg.stem_channels)):
        wt = model.params[f"stem.{i}.w"]
        cout, cin, kh, kw = wt.shape
        h, w = h // 2, w // 2
        total += cout * cin * kh * kw * h * w
    pw = model.params["patch.w"]
    ht, wt_ = h // cfg.patch_size, w // cfg.patch_size
    total += pw.shape[0] * pw.shape[1] * pw.shape[2] * pw.shape[3] * ht * wt_
    ntok = ht * wt_
    d = cfg.embed_dim
    for b in range(cfg.num_blocks):
        width = model.params[f"block.{b}.attn.q.w"].shape[1]
        total += ntok * d * width * 3                # q, k, v projections
        total += 2 * ntok * ntok * width             # QK^T and AV
        total += ntok * width * d                    # output projection
        m0 = model.params[f"block.{b}.mlp.0.w"]
        m1 = model.params[f"block.{b}.mlp.1.w"]
        total += ntok * m0.shape[0] * m0.shape[1] + ntok * m1.shape[0] * m1.shape[1]
    lt = model.params["decoder.lat_tok.w"]
    total += lt.shape[0] * lt.shape[1] * ntok
    ls = model.params["decoder.lat_stem.w"]
    total += ls.shape[0] * ls.shape[1] * h * w
    fw = model.params["decoder.fuse.w"]
    total += fw.shape[0] * fw.shape[1] * fw.shape[2] * fw.shape[3] * h * w
    hw = model.params["head.w"]
    total += hw.shape[0] * hw.shape[1] * h * w
    return int(total)
