"""Binary model files.

Layout::

    b"AEYE"
    u32 LE   format version
    u32 LE   header length in bytes
    header   UTF-8 JSON: input_size, in_channels, seed, layers, blobs
    blobs    little-endian float32 arrays in layer order

Conv kernels are stored (out, in, ky, kx); dense weights row-major
(out, in) followed by the bias.  Blob offsets in the header are relative to
the first byte after the header.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import FormatError, VersionError
from .layers import layer_from_dict, layer_to_dict
from .model import FORMAT_VERSION, CnnModel, output_shapes

MAGIC = b"AEYE"
_PREFIX = struct.Struct("<4sII")


def model_bytes(model: CnnModel) -> bytes:
    blobs: list[bytes] = []
    offset = 0
    layer_entries = []
    for layer, params in zip(model.layers, model.weights):
        entry = layer_to_dict(layer)
        arrays = []
        for arr in params:
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            arrays.append({"offset": offset, "nbytes": len(raw), "shape": list(arr.shape)})
            blobs.append(raw)
            offset += len(raw)
        entry["arrays"] = arrays
        layer_entries.append(entry)
    header = {
        "input_size": model.input_size,
        "in_channels": model.in_channels,
        "seed": model.rng_seed,
        "layers": layer_entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def save_model(model: CnnModel, path: str | os.PathLike[str]) -> None:
    data = model_bytes(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def model_from_bytes(data: bytes) -> CnnModel:
    if len(data) < _PREFIX.size:
        raise FormatError("model file is truncated")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"model file version {version} is not supported (this build reads version "
            f"{FORMAT_VERSION})"
        )
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise FormatError("model header is truncated")
    try:
        header = json.loads(data[start : start + head_len].decode("utf-8"))
        layers = [layer_from_dict({k: v for k, v in d.items() if k != "arrays"})
                  for d in header["layers"]]
        blob_base = start + head_len
        weights = []
        for d in header["layers"]:
            arrays = []
            for a in d["arrays"]:
                lo = blob_base + a["offset"]
                if lo + a["nbytes"] > len(data):
                    raise FormatError("weight blob runs past end of file")
                arr = np.frombuffer(data, dtype="<f4", count=a["nbytes"] // 4, offset=lo)
                arrays.append(arr.astype(np.float32).reshape(a["shape"]))
            weights.append(tuple(arrays))
        model = CnnModel(
            input_size=int(header["input_size"]),
            layers=layers,
            weights=weights,
            rng_seed=int(header["seed"]),
            in_channels=int(header["in_channels"]),
            version=version,
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed model header: {exc}") from exc
    output_shapes(model.layers, model.in_channels, model.input_size)
    return model


def load_model(path: str | os.PathLike[str]) -> CnnModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
