"""Flat named-array checkpoint container.

Layout: magic b"KCRX" + one version byte + uint32 little-endian header
length + UTF-8 JSON header + raw array payload. The header records byte
order (always little on disk), free-form metadata, and for every array its
name, dtype, shape, offset and byte count. Model parameters are stored as
real planes under their state-dict names (complex layers keep real and
imaginary planes as separate arrays by construction), so any reader that
can parse JSON and memcpy can load a checkpoint.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"KCRX"
VERSION = 1


def save_arrays(path, arrays, meta=None):
    """Write named numpy arrays plus a metadata dict."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        shape = list(arr.shape)  # before ascontiguousarray, which promotes 0-d
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": shape,
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)
    header = json.dumps(
        {"byte_order": "little", "meta": meta or {}, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
    return path


def load_arrays(path):
    """Read a container back into ({name: array}, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a kcross checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise DataError(f"{path}: unsupported container version {blob[4]}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9 : 9 + header_len].decode("utf-8"))
    base = 9 + header_len
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})


def module_to_arrays(module, prefix=""):
    """Flatten a torch module's state dict into named numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy()
    return out


def arrays_to_module(module, arrays, prefix=""):
    """Load arrays produced by :func:`module_to_arrays` back into a module."""
    state = {}
    wanted = module.state_dict()
    for name, ref in wanted.items():
        key = prefix + name
        if key not in arrays:
            raise DataError(f"checkpoint missing array {key!r}")
        state[name] = torch.as_tensor(arrays[key]).to(ref.dtype)
    module.load_state_dict(state)
    return module


def optimizer_to_arrays(optimizer, param_names, prefix="optim."):
    """Flatten Adam-style optimizer state keyed by parameter name."""
    out = {}
    state = optimizer.state_dict()["state"]
    for idx, name in enumerate(param_names):
        if idx not in state:
            continue
        for slot, value in state[idx].items():
            if isinstance(value, torch.Tensor):
                out[f"{prefix}{name}.{slot}"] = value.detach().cpu().numpy()
            else:
                out[f"{prefix}{name}.{slot}"] = np.asarray(value)
    return out


def arrays_to_optimizer(optimizer, arrays, param_names, prefix="optim."):
    """Restore optimizer state saved by :func:`optimizer_to_arrays`."""
    sd = optimizer.state_dict()
    state = {}
    for idx, name in enumerate(param_names):
        slots = {}
        for key, value in arrays.items():
            lead = f"{prefix}{name}."
            if key.startswith(lead) and "." not in key[len(lead):]:
                slot = key[len(lead):]
                tensor = torch.as_tensor(value)
                if slot == "step":
                    tensor = tensor.to(torch.float32)
                slots[slot] = tensor
        if slots:
            state[idx] = slots
    sd["state"] = state
    optimizer.load_state_dict(sd)
    return optimizer
