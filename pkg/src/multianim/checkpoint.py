"""Checkpoint archive.

A checkpoint is a zip file with two members:

``header.json``
    ``{"format": "multianim-checkpoint", "version": 1, "meta": {...},
    "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}`` where ``meta``
    carries the phase tag, step counter, config echo and RNG seed.
``tensors.bin``
    The tensors in header order as raw little-endian float32 buffers.

Names are dotted parameter paths (``dit.blocks.0.attn.q.weight``); optimizer
moments live under ``optim.<param name>.<slot>``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataIOError, FormatError

FORMAT = "multianim-checkpoint"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        buf = t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {"format": FORMAT, "version": VERSION, "meta": meta, "tensors": entries}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1))
        zf.writestr("tensors.bin", b"".join(chunks))
    tmp.replace(path)
    return path


def _read(path: Path, with_blob: bool) -> tuple[dict, bytes]:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            blob = zf.read("tensors.bin") if with_blob else b""
    except FileNotFoundError as exc:
        raise DataIOError(f"missing checkpoint: {path}") from exc
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataIOError(f"corrupt checkpoint: {path}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT or header.get("version") != VERSION:
        got = header.get("format") if isinstance(header, dict) else None
        ver = header.get("version") if isinstance(header, dict) else None
        raise FormatError(f"{path}: unsupported checkpoint format {got!r} v{ver}")
    return header, blob


def load_meta(path: str | Path) -> dict:
    """The checkpoint's meta block without reading the tensors."""
    return _read(Path(path), False)[0]["meta"]


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    header, blob = _read(path, True)
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"{path}: tensor {e['name']} is truncated")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["meta"]


def load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy tensors into ``module``'s parameters and buffers; any missing name or
    shape mismatch raises FormatError naming the tensor."""
    own = dict(module.named_parameters())
    own.update(dict(module.named_buffers()))
    for name, p in own.items():
        key = prefix + name
        if key not in tensors:
            raise FormatError(f"checkpoint has no tensor {key}")
        src = tensors[key]
        if tuple(src.shape) != tuple(p.shape):
            raise FormatError(f"tensor {key}: checkpoint shape {tuple(src.shape)} != model shape {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(src.to(p.dtype))
