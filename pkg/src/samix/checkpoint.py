"""Versioned checkpoint container: JSON header plus named float32 tensor records."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig

MAGIC = b"SAWCKPT1"
FORMAT_VERSION = 1


def tensor_records(model: torch.nn.Module) -> dict:
    return {name: t.detach().cpu() for name, t in model.state_dict().items()}


def save_checkpoint(
    path: str,
    model: torch.nn.Module,
    step: int,
    alpha: float,
    codebook_hash: str = "",
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    records = {f"model.{k}": v for k, v in tensor_records(model).items()}
    opt_steps = []
    if optimizer is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        for i, p in enumerate(params):
            state = optimizer.state.get(p, {})
            if "exp_avg" in state:
                records[f"opt.{i}.exp_avg"] = state["exp_avg"].detach().cpu()
                records[f"opt.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu()
                opt_steps.append(float(state["step"]))
            else:
                opt_steps.append(0.0)
    names = sorted(records)
    header = {
        "version": FORMAT_VERSION,
        "model_config": asdict(model.cfg),
        "step": step,
        "alpha": alpha,
        "codebook_hash": codebook_hash,
        "opt_steps": opt_steps,
        "extra": extra or {},
        "tensors": [
            {"name": n, "shape": list(records[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(records[n].numpy().astype("<f4").tobytes())


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(hlen).decode("utf-8"))


def _read_all(path: str):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated tensor {rec['name']}")
            tensors[rec["name"]] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            )
    return header, tensors


def load_checkpoint(
    path: str,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
    expect_config: ModelConfig | None = None,
) -> dict:
    """Restore model (and optionally optimizer) state; returns the header."""
    header, tensors = _read_all(path)
    cfg = expect_config or model.cfg
    saved_cfg = dict(header["model_config"])
    want = asdict(cfg)
    # tuples serialize as lists
    normalized = {
        k: tuple(v) if isinstance(v, list) else v for k, v in saved_cfg.items()
    }
    if normalized != want:
        raise CheckpointError(
            f"{path}: checkpoint config does not match the requested config"
        )
    state = {
        k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")
    }
    model.load_state_dict(state)
    if optimizer is not None and header["opt_steps"]:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        for i, p in enumerate(params):
            key = f"opt.{i}.exp_avg"
            if key in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(header["opt_steps"][i]),
                    "exp_avg": tensors[key].clone(),
                    "exp_avg_sq": tensors[f"opt.{i}.exp_avg_sq"].clone(),
                }
    return header


def checkpoint_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def state_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name in sorted(model.state_dict()):
        h.update(name.encode())
        h.update(model.state_dict()[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
