"""Checkpoints: a JSON header plus a little-endian binary tensor container.

Container layout (all integers little-endian)::

    magic      4 bytes  b"FLTC"
    version    u32      1
    count      u32      number of tensors
    then per tensor, in sorted-name order:
      name_len u16, name utf-8 bytes
      dtype    u8       1 = float32, 2 = float64, 3 = int64
      width    u8       element width in bytes (4 or 8)
      rank     u8
      dims     u32 * rank
      data     width * prod(dims) bytes, C order

The JSON header records the model config and, for FIRE models, each PE
slot in the FireParams format.  The binary file is authoritative for
tensor values; the FIRE copy in the header is for inspection.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidInput
from ..schema import validate
from .model import ModelConfig, ModelParams, init_params
from .positional import FirePE, make_pe

MAGIC = b"FLTC"
CONTAINER_VERSION = 1
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


def encode_tensors(tensors: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise InvalidInput(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        le = _DTYPES[code]
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BBB", code, le.itemsize, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(out)


def decode_tensors(blob: bytes) -> dict:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise InvalidInput("not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != CONTAINER_VERSION:
        raise InvalidInput(f"unsupported container version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            code, width, rank = struct.unpack_from("<BBB", view, pos)
            pos += 3
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            dt = _DTYPES.get(code)
            if dt is None or dt.itemsize != width:
                raise InvalidInput(f"tensor {name!r}: bad dtype code {code} / width {width}")
            nbytes = width * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(view):
                raise InvalidInput(f"tensor {name!r}: truncated data")
            arr = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims)
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
            pos += nbytes
    except struct.error as e:
        raise InvalidInput(f"truncated tensor container: {e}") from None
    if pos != len(view):
        raise InvalidInput(f"{len(view) - pos} trailing bytes after {count} tensors")
    return tensors


def checkpoint_header(params: ModelParams, step: int = 0) -> dict:
    cfg = params.config
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "step": int(step),
        "dtype": "f32" if params.dtype == np.float32 else "f64",
        "model_config": cfg.to_json(),
        "fire_state": None,
    }
    pe = make_pe(cfg.pe, cfg.num_heads, cfg.d_head)
    if isinstance(pe, FirePE):
        header["fire_state"] = [
            pe.fire_params({k: np.asarray(v, dtype=np.float64) for k, v in params.pe_tensors(s).items()}).to_json()
            for s in range(cfg.pe_slots)
        ]
    return header


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(params: ModelParams, path, step: int = 0):
    """Write ``<path>.json`` and ``<path>.bin``; returns the two paths."""
    path = Path(path)
    jpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
    header = checkpoint_header(params, step)
    header["tensor_file"] = bpath.name
    jpath.write_text(_dumps(header))
    bpath.write_bytes(encode_tensors(params.tensors))
    return jpath, bpath


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    jpath = path.with_suffix(".json")
    header = json.loads(jpath.read_text())
    validate(header, "checkpoint")
    cfg = ModelConfig.from_json(header["model_config"])
    tensors = decode_tensors((jpath.parent / header["tensor_file"]).read_bytes())
    want = np.float32 if header["dtype"] == "f32" else np.float64
    for name, arr in tensors.items():
        if arr.dtype != want:
            raise InvalidInput(f"tensor {name!r} has dtype {arr.dtype}, header says {header['dtype']}")
    expected = init_params(cfg, seed=0, dtype=want).tensors
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise InvalidInput(f"checkpoint tensors do not match the config (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise InvalidInput(f"tensor {name!r} has shape {arr.shape}, expected {expected[name].shape}")
    return ModelParams(cfg, tensors), header
