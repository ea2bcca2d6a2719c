"""Checkpoint directories: ``header.json`` plus one raw little-endian float32 file per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..config import canonical_json, git_blob_hash

FORMAT = "diptych-edit-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _filename(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_tensors(directory, tensors: dict[str, torch.Tensor], header: dict) -> dict:
    """Write ``tensors`` and a header; returns the header as written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4")
        data = arr.tobytes(order="C")
        (d / _filename(name)).write_bytes(data)
        entries.append({"name": name, "shape": list(arr.shape), "file": _filename(name), "hash": git_blob_hash(data)})
    header = dict(header, format=FORMAT, tensors=entries)
    header["content_hash"] = git_blob_hash(canonical_json(entries).encode())
    (d / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header


def load_tensors(directory) -> tuple[dict[str, torch.Tensor], dict]:
    d = Path(directory)
    try:
        header = json.loads((d / "header.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no header.json in {d}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header in {d}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    out = {}
    for e in header["tensors"]:
        data = (d / e["file"]).read_bytes()
        if git_blob_hash(data) != e["hash"]:
            raise CheckpointError(f"hash mismatch for {e['name']}")
        arr = np.frombuffer(data, dtype="<f4").reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out, header


def save_model(directory, model, header: dict) -> dict:
    tensors = {n: p for n, p in model.named_parameters() if ".adapter." not in n}
    return save_tensors(directory, tensors, header)


def load_model(directory):
    from ..config import ModelConfig
    from .dit import DiT

    tensors, header = load_tensors(directory)
    cfg = header["config"]["model"] if "model" in header["config"] else header["config"]
    model = DiT(ModelConfig(**cfg))
    missing = set(model.base_parameters()) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}...")
    with torch.no_grad():
        for n, p in model.base_parameters().items():
            p.copy_(tensors[n])
    model.eval()
    return model, header


def save_adapters(directory, model, header: dict) -> dict:
    from ..adapters import adapter_parameters

    return save_tensors(directory, adapter_parameters(model), header)


def load_adapters(directory, model):
    """Attach adapters described by the header's adapter config and load their weights."""
    from ..adapters import adapter_parameters, attach
    from ..config import AdapterConfig

    tensors, header = load_tensors(directory)
    attach(model, AdapterConfig(**header["adapter_config"]))
    params = adapter_parameters(model)
    if set(params) != set(tensors):
        raise CheckpointError("adapter checkpoint does not match the adapter layout")
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(tensors[n])
    return model, header
