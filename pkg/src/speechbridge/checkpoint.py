"""Single-file checkpoint container.

Byte layout (documented in docs/formats.md, version 1):

    offset 0   8 bytes   magic ``b"SBCKPT01"``
    offset 8   8 bytes   uint64 little-endian header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted:
                         {"arrays": [{"name", "shape", "offset"}...],
                          "config": {flat config echo},
                          "format_version": 1,
                          "step": int}
    offset 16+H          payload: concatenated raw little-endian float32

Array offsets are relative to the payload start.  Model arrays keep their
state-dict names; optimizer moments are stored as ``optim.<param>.exp_avg``,
``optim.<param>.exp_avg_sq`` and ``optim.<param>.step`` so a resumed run
continues the exact Adam trajectory.  Everything is float32, so a
save/load round trip of a float32 training state is lossless and two runs
that reach the same state produce byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import BridgeModel, ModelConfig, init_model

MAGIC = b"SBCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed container or a state/model mismatch."""


@dataclass
class CheckpointData:
    arrays: dict[str, np.ndarray]
    config: dict
    step: int

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("optim.")}


def save_checkpoint(path: str | Path, model: BridgeModel, flat_config: dict,
                    step: int, optimizer: torch.optim.Optimizer | None = None) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().to(torch.float32).numpy()
    if optimizer is not None:
        param_names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = param_names[id(p)]
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    value = state[key]
                    if not torch.is_tensor(value):
                        value = torch.tensor(float(value))
                    arrays[f"optim.{name}.{key}"] = (
                        value.detach().cpu().to(torch.float32).numpy())

    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(
        {"arrays": index, "config": flat_config,
         "format_version": FORMAT_VERSION, "step": int(step)},
        sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint container")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    payload = raw[16 + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = np.array(data).reshape(shape)
    return CheckpointData(arrays=arrays, config=header["config"], step=header["step"])


def restore_model(model: BridgeModel, ckpt: CheckpointData) -> None:
    """Load model arrays strictly; missing or extra arrays are an error."""
    state = {}
    for name, arr in ckpt.model_arrays().items():
        state[name] = torch.from_numpy(arr).to(next(model.parameters()).dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model: {exc}") from exc


def restore_optimizer(optimizer: torch.optim.Optimizer, model: BridgeModel,
                      ckpt: CheckpointData) -> None:
    """Rebuild Adam moments for every optimizer parameter from the arrays."""
    param_names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = param_names[id(p)]
            key = f"optim.{name}."
            if key + "exp_avg" not in ckpt.arrays:
                raise CheckpointError(f"no optimizer state for {name!r} in checkpoint")
            optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.arrays[key + "step"])),
                "exp_avg": torch.from_numpy(ckpt.arrays[key + "exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(ckpt.arrays[key + "exp_avg_sq"]).clone(),
            }


def load_model(path: str | Path) -> tuple[BridgeModel, dict, int]:
    """Rebuild a model from a checkpoint's config echo and restore its arrays."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    model_cfg = ModelConfig.from_flat(cfg)
    model = init_model(model_cfg, seed=cfg.get("model.seed", 0))
    restore_model(model, ckpt)
    return model, cfg, ckpt.step


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_hash(model: BridgeModel, subnetworks: tuple[str, ...] | None = None) -> str:
    """SHA-256 over the named float32 parameter bytes, sorted by name.

    ``subnetworks`` restricts the hash to the listed sub-network prefixes
    (plus ``log_tau`` for the pseudo-network "temperature").
    """
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if subnetworks is not None:
            prefix = name.split(".", 1)[0]
            owner = "temperature" if name == "log_tau" else prefix
            if owner not in subnetworks:
                continue
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().to(torch.float32).numpy().tobytes())
    return digest.hexdigest()


def describe(path: str | Path) -> str:
    """Human-readable summary used by the inspect-checkpoint subcommand."""
    ckpt = load_checkpoint(path)
    model_arrays = ckpt.model_arrays()
    per_net: dict[str, int] = {}
    for name, arr in model_arrays.items():
        owner = "temperature" if name == "log_tau" else name.split(".", 1)[0]
        per_net[owner] = per_net.get(owner, 0) + arr.size
    lines = [f"checkpoint: {path}",
             f"format_version: {FORMAT_VERSION}",
             f"step: {ckpt.step}",
             "parameters:"]
    for owner in sorted(per_net):
        lines.append(f"  {owner}: {per_net[owner]}")
    lines.append(f"  total: {sum(per_net.values())}")
    has_optim = any(k.startswith("optim.") for k in ckpt.arrays)
    lines.append(f"optimizer_state: {'yes' if has_optim else 'no'}")
    lines.append("config:")
    for key in sorted(ckpt.config):
        lines.append(f"  {key} = {ckpt.config[key]}")
    return "\n".join(lines)
