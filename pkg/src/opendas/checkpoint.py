"""Weight checkpoints: one little-endian float32 blob plus a text manifest.

The manifest starts with ``# config`` and ``# vocab`` JSON header lines,
then one line per tensor: ``name<TAB>shape<TAB>trainable<TAB>offset``,
where shape is comma separated and offset is in bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .model import DualEncoder, ModelConfig, Tokenizer

MANIFEST_SUFFIX = ".manifest"


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def save_checkpoint(model: DualEncoder, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config {json.dumps(model.cfg.to_dict(), sort_keys=True)}",
             f"# vocab {json.dumps(model.tokenizer.itos)}"]
    offset = 0
    with open(path, "wb") as fh:
        for name, tensor in model.state_dict().items():
            data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes()
            shape = ",".join(str(s) for s in tensor.shape)
            trainable = int(name.startswith("prompts."))
            lines.append(f"{name}\t{shape}\t{trainable}\t{offset}")
            fh.write(data)
            offset += len(data)
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_manifest(path):
    header, entries = {}, []
    for lineno, line in enumerate(manifest_path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            header[key] = json.loads(value)
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"{manifest_path(path)}:{lineno}: expected 4 tab-separated fields")
        name, shape, trainable, offset = parts
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        entries.append((name, dims, trainable == "1", int(offset)))
    if "config" not in header or "vocab" not in header:
        raise ValidationError(f"{manifest_path(path)}: missing config or vocab header")
    return header, entries


def load_checkpoint(path) -> DualEncoder:
    """Rebuild the model described by the manifest and load its weights."""
    header, entries = _parse_manifest(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = DualEncoder(cfg, Tokenizer(header["vocab"]))
    blob = Path(path).read_bytes()
    expected = model.state_dict()
    if {e[0] for e in entries} != set(expected):
        missing = sorted(set(expected) ^ {e[0] for e in entries})
        raise ValidationError(f"{path}: tensor names do not match the model: {missing}")
    state = {}
    for name, dims, _, offset in entries:
        if tuple(expected[name].shape) != dims:
            raise ValidationError(f"{path}: {name} has shape {dims}, model expects "
                                  f"{tuple(expected[name].shape)}")
        count = int(np.prod(dims)) if dims else 1
        if offset + 4 * count > len(blob):
            raise ValidationError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.set_trainable(False, False)
    return model


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
