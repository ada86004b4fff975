"""Binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic "EVTC"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length in bytes
    header        UTF-8 JSON: {"config": {...}, "head_mask": ..., "tensors":
                  [{"name", "dtype", "shape", "offset", "nbytes", "scale"?}],
                  "mask"?: {"tensors": [...], "ledger": [...]}}
    payload       raw little-endian tensor buffers at the listed offsets

Offsets are relative to the start of the payload. int8 entries carry a
dequantization scale and are widened to float32 on load. Roundtrips are
bit-exact for float payloads.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import FormatError
from .models import ModelConfig, SegModel
from .tensor import Tensor

MAGIC = b"EVTC"
VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "float16": np.dtype("<f2"),
    "int8": np.dtype("i1"),
    "uint8": np.dtype("u1"),
}


def _encode_tensors(arrays):
    """arrays: list of (name, np.ndarray, scale or None) -> (entries, payload)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr, scale in arrays:
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise FormatError(f"cannot serialize dtype {dtype_name}")
        buf = np.ascontiguousarray(arr.astype(_DTYPES[dtype_name], copy=False)).tobytes()
        entry = {"name": name, "dtype": dtype_name, "shape": list(arr.shape),
                 "offset": offset, "nbytes": len(buf)}
        if scale is not None:
            entry["scale"] = float(scale)
        entries.append(entry)
        chunks.append(buf)
        offset += len(buf)
    return entries, b"".join(chunks)


def save_checkpoint(model: SegModel, path, mask=None, scales=None):
    """Write model (and optionally a prune-mask section) to ``path``.

    ``scales``: optional {param name -> int8 scale}; matching parameters are
    stored as int8 payloads with their scale (simulated-quantization form).
    """
    arrays = []
    for name, p in model.named_parameters():
        if scales and name in scales:
            s = scales[name]
            q = np.clip(np.rint(p.data / s), -127, 127).astype(np.int8)
            arrays.append((name, q, s))
        else:
            arrays.append((name, p.data, None))
    entries, payload = _encode_tensors(arrays)
    header = {
        "config": model.config.to_dict(),
        "head_mask": None if model.head_mask is None else model.head_mask.astype(int).tolist(),
        "tensors": entries,
    }
    if mask is not None:
        mask_arrays = [(name, m.astype(np.uint8), None) for name, m in mask.masks.items()]
        mask_entries, mask_payload = _encode_tensors(mask_arrays)
        for e in mask_entries:
            e["offset"] += len(payload)
        payload += mask_payload
        header["mask"] = {"tensors": mask_entries, "ledger": mask.ledger_dicts(),
                          "spec": mask.spec_dict()}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(len(hjson)).tobytes())
        f.write(hjson)
        f.write(payload)


def _read_header(blob):
    if len(blob) < 16:
        raise FormatError("truncated checkpoint", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (supported: {VERSION})",
                          offset=4)
    hlen = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    if len(blob) < 16 + hlen:
        raise FormatError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", offset=16) from e
    return header, blob[16 + hlen:], 16 + hlen


def _decode_entry(entry, payload, payload_base):
    dt = _DTYPES.get(entry["dtype"])
    if dt is None:
        raise FormatError(f"unknown dtype {entry['dtype']!r} for tensor {entry['name']}")
    lo, nbytes = entry["offset"], entry["nbytes"]
    if lo + nbytes > len(payload):
        raise FormatError(f"tensor {entry['name']} extends past end of file",
                          offset=payload_base + lo)
    arr = np.frombuffer(payload[lo:lo + nbytes], dtype=dt).reshape(entry["shape"])
    return arr


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as f:
        blob = f.read()
    header, payload, payload_base = _read_header(blob)
    config = ModelConfig.from_dict(header["config"]).validate()
    params = {}
    for entry in header["tensors"]:
        arr = _decode_entry(entry, payload, payload_base)
        if entry["dtype"] == "int8":
            arr = arr.astype(np.float32) * np.float32(entry["scale"])
        elif entry["dtype"] == "float16":
            arr = arr.astype(np.float32)
        else:
            arr = arr.copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    head_mask = header.get("head_mask")
    if head_mask is not None:
        head_mask = np.asarray(head_mask, dtype=bool)
    return SegModel(config, params, head_mask)


def load_mask_section(path):
    """Return the raw MASK section (masks dict, ledger list, spec dict) or None."""
    with open(path, "rb") as f:
        blob = f.read()
    header, payload, payload_base = _read_header(blob)
    section = header.get("mask")
    if section is None:
        return None
    masks = {e["name"]: _decode_entry(e, payload, payload_base).astype(np.float32)
             for e in section["tensors"]}
    return masks, section["ledger"], section["spec"]
