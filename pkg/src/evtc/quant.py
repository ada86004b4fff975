"""Post-training quantization: binary16 emulation and 8-bit affine.

fp16 mode maps every value to its IEEE-754 binary16 round-to-nearest-even
image (subnormals included) and saturates magnitudes above 65504 instead of
producing infinities; results are stored widened so inference runs in wide
precision over quantized values (simulated quantization). int8 mode uses
per-tensor symmetric min-max scales s = max|x|/127 with round-half-even and
clamping to [-127, 127].
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import models as M
from .errors import ContractError
from .models import SegModel
from .tensor import Tensor

FP16_MAX = 65504.0
INT8_LEVELS = 127


@dataclasses.dataclass
class QuantSpec:
    mode: str = "fp16"  # fp16 | int8

    def validate(self):
        if self.mode not in ("fp16", "int8"):
            raise ContractError(f"unknown quantization mode {self.mode!r}")
        return self


def quantize_fp16(x):
    """Round to the binary16 grid (RNE, subnormals kept, overflow saturated);
    returns an array/Tensor of the input's original float dtype."""
    if isinstance(x, Tensor):
        return Tensor(quantize_fp16(x.data), requires_grad=x.requires_grad)
    arr = np.asarray(x)
    with np.errstate(over="ignore"):
        half = arr.astype(np.float16)
    wide = half.astype(arr.dtype)
    return np.where(np.isinf(wide), np.sign(arr) * arr.dtype.type(FP16_MAX), wide)


def calibrate_int8(stream) -> float:
    """Symmetric min-max scale over a tensor or an iterable of tensors."""
    if isinstance(stream, (np.ndarray, Tensor)):
        stream = [stream]
    peak = 0.0
    count = 0
    for chunk in stream:
        arr = chunk.data if isinstance(chunk, Tensor) else np.asarray(chunk)
        if arr.size:
            peak = max(peak, float(np.abs(arr).max()))
        count += arr.size
    if count == 0:
        raise ContractError("calibration stream is empty")
    # scales are floored at the smallest positive normal float32; this is the
    # documented all-zero fallback and keeps float32 dequantization exact
    return max(peak / INT8_LEVELS, float(np.finfo(np.float32).tiny))


def quantize_int8(x, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ContractError(f"scale must be positive, got {scale}")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.clip(np.rint(arr / scale), -INT8_LEVELS, INT8_LEVELS).astype(np.int8)


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float32) * np.float32(scale)


@dataclasses.dataclass
class LayerQuantError:
    max_abs: float
    mean_abs: float
    scale: float | None = None


@dataclasses.dataclass
class QuantReport:
    mode: str
    layers: dict                 # name -> LayerQuantError
    calibration_images: int = 0
    max_logit_err: float | None = None
    mean_logit_err: float | None = None
    scales: dict | None = None   # int8 only: name -> scale


def quantize_model(model: SegModel, spec: QuantSpec, calibration_set=None):
    """Quantize all weights per spec; returns (quantized model, report).

    int8 requires a calibration set; for either mode, when a calibration set
    is given the report also records the logit deviation of the quantized
    model against the original on those images.
    """
    spec.validate()
    if spec.mode == "int8" and not calibration_set:
        raise ContractError("int8 quantization requires a calibration set")

    qmodel = model.copy()
    layers = {}
    scales = {}
    for name, p in model.named_parameters():
        if spec.mode == "fp16":
            qdata = quantize_fp16(p.data)
            entry = LayerQuantError(
                max_abs=float(np.abs(qdata - p.data).max()) if p.size else 0.0,
                mean_abs=float(np.abs(qdata - p.data).mean()) if p.size else 0.0)
        else:
            s = calibrate_int8(p.data)
            qdata = dequantize(quantize_int8(p.data, s), s).astype(p.dtype)
            scales[name] = s
            entry = LayerQuantError(
                max_abs=float(np.abs(qdata - p.data).max()) if p.size else 0.0,
                mean_abs=float(np.abs(qdata - p.data).mean()) if p.size else 0.0,
                scale=s)
        qmodel.params[name].data = qdata.astype(p.dtype)
        layers[name] = entry

    report = QuantReport(mode=spec.mode, layers=layers)
    if calibration_set:
        from . import tensor as T
        diffs = []
        with T.no_grad():
            for sample in calibration_set:
                img = Tensor(sample.image[None])
                ref = M.forward_segment(model, img).data
                got = M.forward_segment(qmodel, img).data
                diffs.append(np.abs(got - ref))
        report.calibration_images = len(calibration_set)
        report.max_logit_err = float(max(d.max() for d in diffs))
        report.mean_logit_err = float(np.mean([d.mean() for d in diffs]))
    report.scales = scales if spec.mode == "int8" else None
    return qmodel, report
