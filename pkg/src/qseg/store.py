"""QSMF model serialization.

Layout (little-endian, version 1):

    magic   4s = b"QSMF"
    version u16
    config  u32 length + canonical JSON (sorted keys; holds the model
            config and the export mode)
    count   u32
    per tensor entry (sorted by name):
        name   u16 length + utf-8
        kind   u8          0 = float32, 1 = int8 + float32 scale
        scale  f32         (kind 1 only)
        ndim   u8
        dims   ndim x u32
        offset u64         into the payload
    payload_len u64
    payload bytes
    crc32   u32            of everything before it (header through payload)

Quantized weight entries store the int8 grid plus one float32 scale;
dequantized = int8 * scale, already inside the clip range. Export is a
pure function of model state, so identical state gives identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from . import quant
from .errors import ContractError, FormatError
from .model import ModelConfig, PromptSegModel

MAGIC = b"QSMF"
VERSION = 1


def _collect_entries(model: PromptSegModel, mode: str):
    entries = {}
    for name, t in model.params.items():
        if mode == "quantized" and name in model.quantizers:
            # a parameter whose name matches a weight-quantizer node
            state = model.quantizers[name]
            qt = quant.quantize_int(state, t)
            entries[name] = ("int8", qt.q, float(np.asarray(qt.scale).item()))
        else:
            entries[name] = ("float32", t.data, None)
    for node, state in model.quantizers.items():
        if state.calibrated:
            entries[f"qz.{node}"] = ("float32",
                                     np.asarray(state.scale.data, dtype=np.float32),
                                     None)
    return entries


def export(model: PromptSegModel, path, mode: str = "quantized") -> str:
    """Write the model; ``quantized`` freezes matmul weights to the int8
    lattice, ``float`` stores everything as float32."""
    if mode not in ("float", "quantized"):
        raise ContractError(f"unknown export mode {mode!r}")
    if mode == "quantized":
        missing = [n for n, s in model.quantizers.items() if not s.calibrated]
        if missing:
            raise ContractError(
                f"quantized export requires calibration; missing: {missing[:3]}...")
    entries = _collect_entries(model, mode)
    config_blob = json.dumps(
        {"model": model.config.to_dict(), "mode": mode},
        sort_keys=True, separators=(",", ":")).encode()

    payload = bytearray()
    table = bytearray()
    for name in sorted(entries):
        kind, arr, scale = entries[name]
        data = np.ascontiguousarray(arr)
        offset = len(payload)
        payload += data.tobytes()
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        if kind == "int8":
            table += struct.pack("<Bf", 1, scale)
        else:
            table += struct.pack("<B", 0)
        table += struct.pack("<B", data.ndim)
        table += struct.pack(f"<{data.ndim}I", *data.shape)
        table += struct.pack("<Q", offset)

    body = struct.pack("<4sH", MAGIC, VERSION)
    body += struct.pack("<I", len(config_blob)) + config_blob
    body += struct.pack("<I", len(entries))
    body += bytes(table)
    body += struct.pack("<Q", len(payload))
    body += bytes(payload)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))
    return str(path)


def _read_entries(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a QSMF model file")
    version = struct.unpack("<H", blob[4:6])[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError(f"{path}: CRC mismatch")
    f = io.BytesIO(blob[6:-4])
    try:
        (clen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(clen))
        (count,) = struct.unpack("<I", f.read(4))
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (kind,) = struct.unpack("<B", f.read(1))
            scale = struct.unpack("<f", f.read(4))[0] if kind == 1 else None
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            (offset,) = struct.unpack("<Q", f.read(8))
            table.append((name, kind, scale, dims, offset))
        (plen,) = struct.unpack("<Q", f.read(8))
        payload = f.read(plen)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or malformed table: {exc}") from exc
    tensors = {}
    for name, kind, scale, dims, offset in table:
        n = int(np.prod(dims)) if dims else 1
        if kind == 1:
            q = np.frombuffer(payload, dtype=np.int8, count=n, offset=offset)
            tensors[name] = ("int8", q.reshape(dims), scale)
        else:
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
            tensors[name] = ("float32", arr.reshape(dims), None)
    return config, tensors


def load(path) -> PromptSegModel:
    """Rebuild a model from a QSMF file; integer-path outputs match the
    exporter's bit for bit."""
    config, tensors = _read_entries(path)
    model = PromptSegModel(ModelConfig.from_dict(config["model"]), seed=0)
    seen = set()
    for name, (kind, arr, scale) in tensors.items():
        if name.startswith("qz."):
            node = name[3:]
            if node not in model.quantizers:
                raise FormatError(f"{path}: unknown quantizer node {node!r}")
            model.quantizers[node].scale.data = np.float32(arr)
            model.quantizers[node].calibrated = True
            continue
        if name not in model.params:
            raise FormatError(f"{path}: unknown tensor {name!r}")
        if kind == "int8":
            state = model.quantizers[name]
            state.scale.data = np.float32(scale)
            state.calibrated = True
            model.params[name].data = arr.astype(np.float32) * np.float32(scale)
        else:
            model.params[name].data = arr.astype(np.float32).copy()
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    model._dense_pe = None
    return model


def inspect(path) -> dict:
    """Tensor listing plus per-submodule parameter totals."""
    config, tensors = _read_entries(path)
    listing = []
    totals = {"enc": 0, "prompt": 0, "dec": 0}
    for name in sorted(tensors):
        kind, arr, scale = tensors[name]
        listing.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "scale": scale})
        if not name.startswith("qz."):
            totals[name.split(".")[0]] += int(arr.size)
    return {
        "config": config,
        "tensors": listing,
        "params_by_submodule": {
            "image_encoder": totals["enc"],
            "prompt_encoder": totals["prompt"],
            "mask_decoder": totals["dec"],
        },
        "total_params": sum(totals.values()),
    }


def format_inspect(info: dict) -> str:
    lines = [f"mode: {info['config']['mode']}", "tensors:"]
    for t in info["tensors"]:
        scale = "" if t["scale"] is None else f" scale={t['scale']:.8g}"
        lines.append(f"  {t['name']:<28} {t['kind']:<8} {t['shape']}{scale}")
    lines.append("parameters by submodule:")
    for k, v in info["params_by_submodule"].items():
        lines.append(f"  {k:<16} {v}")
    lines.append(f"total: {info['total_params']}")
    return "\n".join(lines)
