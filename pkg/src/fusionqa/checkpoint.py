"""Binary model checkpoints: named float32 tensors plus a config snapshot.

Layout: magic 'FQCK' | u32 format version | u64 header length | header JSON
(sorted keys; config snapshot and a name -> {shape, offset} table; offsets in
bytes into the payload) | payload of little-endian IEEE-754 float32 values.

Round trips are bit-exact and save(load(save(m))) is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from fusionqa.config import config_from_dict, config_to_dict
from fusionqa.model import MultimodalTransformer, parameter_shapes
from fusionqa.tensor import Tensor

MAGIC = b"FQCK"
FORMAT_VERSION = 1


def save_checkpoint(model: MultimodalTransformer, path):
    if model.dtype != np.float32:
        raise ValueError(f"checkpoints are float32, model is {model.dtype}")
    names = sorted(model.params)
    table = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        table[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(model.config),
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> MultimodalTransformer:
    """Rebuild the model from its config snapshot; every tensor must match
    the shapes that config implies, and no unknown names are accepted."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint {path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + header_len
    header = json.loads(raw[16:header_end].decode("utf-8"))
    config = config_from_dict(header["config"])
    expected = parameter_shapes(config)
    table = header["tensors"]

    unknown = sorted(set(table) - set(expected))
    if unknown:
        raise ValueError(f"checkpoint {path}: unknown tensor names {unknown}")
    missing = sorted(set(expected) - set(table))
    if missing:
        raise ValueError(f"checkpoint {path}: missing tensors {missing}")

    payload = raw[header_end:]
    params = {}
    for name, spec in table.items():
        shape = tuple(spec["shape"])
        if shape != expected[name]:
            raise ValueError(
                f"checkpoint {path}: tensor {name} has shape {shape}, "
                f"config implies {expected[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise ValueError(f"checkpoint {path}: tensor {name} overruns the payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True, dtype=np.float32)
    return MultimodalTransformer(config, params)
