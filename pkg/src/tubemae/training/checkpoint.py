"""Single-file checkpoint container.

Layout::

    b"TUBECKPT" | uint64 LE header length | UTF-8 JSON header | array bytes

The header lists every array (name, dtype, shape, byte offset, nbytes; all
little-endian, C order) next to the config block, the RNG block and run
metadata. Serialization is canonical (sorted keys, fixed array order), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from tubemae.errors import ConfigError, ValidationError

MAGIC = b"TUBECKPT"

_TORCH_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_NP_TO_TORCH = {v: k for k, v in _TORCH_TO_NP.items()}


@dataclass
class CheckpointRecord:
    model_state: dict
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    global_step: int = 0
    rng: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    normalization: dict = field(default_factory=dict)


def _flatten_optimizer(state: dict):
    arrays, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for pid in sorted(state["state"], key=int):
        entry = {}
        for key in sorted(state["state"][pid]):
            val = state["state"][pid][key]
            if torch.is_tensor(val):
                arrays[f"optim/{pid}/{key}"] = val
                entry[key] = "tensor"
            else:
                entry[key] = val
        meta["state"][str(pid)] = entry
    return arrays, meta


def _unflatten_optimizer(meta: dict, arrays: dict) -> dict:
    state = {}
    for pid, entry in meta["state"].items():
        state[int(pid)] = {
            key: (arrays[f"optim/{pid}/{key}"] if kind == "tensor" else kind) for key, kind in entry.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, record: CheckpointRecord) -> Path:
    arrays = {f"model/{k}": v for k, v in record.model_state.items()}
    optim_meta = None
    if record.optimizer_state is not None:
        opt_arrays, optim_meta = _flatten_optimizer(record.optimizer_state)
        arrays.update(opt_arrays)
    rng_meta = {}
    for key, val in sorted(record.rng.items()):
        if torch.is_tensor(val):
            arrays[f"rng/{key}"] = val
            rng_meta[key] = "tensor"
        else:
            rng_meta[key] = val

    entries, blobs, offset = [], [], 0
    for name, t in arrays.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NP:
            raise ValidationError(f"unsupported dtype {t.dtype} for {name}")
        np_dtype = _TORCH_TO_NP[t.dtype]
        raw = t.numpy().astype(np_dtype, copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": np_dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "arrays": entries,
        "config": record.config,
        "fingerprint": record.fingerprint,
        "normalization": record.normalization,
        "epoch": record.epoch,
        "global_step": record.global_step,
        "optimizer": optim_meta,
        "rng": rng_meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValidationError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> CheckpointRecord:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + n].decode("utf-8"))
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise ConfigError(
            f"checkpoint fingerprint {header['fingerprint']} does not match model config {expected_fingerprint}"
        )
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        arrays[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    model_state = {k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")}
    optim = _unflatten_optimizer(header["optimizer"], arrays) if header["optimizer"] is not None else None
    rng = {k: (arrays[f"rng/{k}"] if v == "tensor" else v) for k, v in header["rng"].items()}
    return CheckpointRecord(
        model_state=model_state,
        optimizer_state=optim,
        epoch=header["epoch"],
        global_step=header["global_step"],
        rng=rng,
        config=header["config"],
        fingerprint=header["fingerprint"],
        normalization=header["normalization"],
    )
