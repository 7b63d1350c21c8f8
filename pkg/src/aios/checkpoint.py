"""Checkpoint container: JSON header plus named float64 tensors.

Layout: magic "AIOSCK01" | u32 version | u64 header_len | header JSON |
concatenated raw little-endian float64 payloads in header manifest order.
The header carries the config echo, the iteration counter, and the tensor
manifest [(name, shape), ...]. Optimizer state is stored under "opt.*".
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

_CK_MAGIC = b"AIOSCK01"
_VERSION = 1


def _named_tensors(model, optimizer=None):
    tensors = {name: p.detach().cpu().numpy().astype(np.float64) for name, p in model.named_parameters()}
    if optimizer is not None:
        params = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = params[id(p)]
                tensors[f"opt.{name}.step"] = np.asarray(
                    [float(state["step"])], dtype=np.float64
                )
                tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].numpy().astype(np.float64)
                tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().astype(np.float64)
    return tensors


def save_checkpoint(path, model, config_echo, iteration=0, optimizer=None):
    tensors = _named_tensors(model, optimizer)
    manifest = [(name, list(tensors[name].shape)) for name in sorted(tensors)]
    header = json.dumps(
        {"config": config_echo, "iteration": int(iteration), "tensors": manifest},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_CK_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(header)))
        f.write(header)
        for name, _ in manifest:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (tensors dict name -> float64 array, iteration, config echo)."""
    data = Path(path).read_bytes()
    if data[:8] != _CK_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, header_len = struct.unpack("<IQ", data[8:20])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + header_len].decode())
    offset = 20 + header_len
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        offset += count * 8
    if offset != len(data):
        raise CheckpointError("checkpoint has trailing bytes")
    return tensors, header["iteration"], header["config"]


def restore_model(model, tensors):
    """Load model parameters; shape mismatches raise CheckpointError."""
    own = dict(model.named_parameters())
    for name, param in own.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"checkpoint-incompatible: {name} has shape {arr.shape}, model expects {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(torch.as_tensor(arr, dtype=param.dtype))
    return model


def restore_optimizer(optimizer, model, tensors):
    """Rebuild Adam moments from "opt.*" tensors (missing entries stay fresh)."""
    for name, param in model.named_parameters():
        key = f"opt.{name}.step"
        if key not in tensors:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(tensors[key][0]), dtype=torch.float64),
            "exp_avg": torch.as_tensor(tensors[f"opt.{name}.exp_avg"], dtype=param.dtype),
            "exp_avg_sq": torch.as_tensor(tensors[f"opt.{name}.exp_avg_sq"], dtype=param.dtype),
        }
    return optimizer
