"""Directory checkpoints: a text ``manifest`` plus one float32 blob per tensor.

Layout::

    ckpt/
      manifest            # format version, model kind, spec fields, tensor table
      tensors/<name>.f32  # little-endian float32, row-major

Every tensor of the state dict (parameters and buffers) is stored so inference
round-trips bit-exactly. Integer buffers are stored as float32 and cast back.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .nets import (
    ClassifierSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    build_classifier,
    build_discriminator,
    build_generator,
)

FORMAT_VERSION = 1
MANIFEST = "manifest"

_KINDS = {
    "generator": (GeneratorSpec, build_generator),
    "discriminator": (DiscriminatorSpec, build_discriminator),
    "classifier": (ClassifierSpec, build_classifier),
}


class CheckpointError(IOError):
    pass


def _kind_of(model):
    for kind, (spec_cls, _) in _KINDS.items():
        if isinstance(getattr(model, "spec", None), spec_cls):
            return kind
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}: no known spec attached")


# integers above this are not exactly representable in float32
MAX_EXACT_INT = 2**24


def save_checkpoint(model, path, extra=None):
    """Write ``model`` to directory ``path``; the manifest is written last."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    kind = _kind_of(model)
    rows = []
    for name, tensor in model.state_dict().items():
        t = tensor.detach().cpu()
        if not t.dtype.is_floating_point and t.numel() and int(t.abs().max()) > MAX_EXACT_INT:
            raise CheckpointError(f"integer tensor {name} too large for float32 storage")
        arr = t.to(torch.float32).numpy().astype("<f4", copy=False)
        fname = f"{name}.f32"
        arr.tofile(path / "tensors" / fname)
        rows.append((name, str(t.dtype).replace("torch.", ""), list(t.shape), fname))
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "spec": model.spec.to_dict(),
        "extra": extra or {},
    }
    lines = [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in header.items()]
    lines.append("[tensors]")
    lines += [f"{name}\t{dtype}\t{json.dumps(shape)}\t{fname}" for name, dtype, shape, fname in rows]
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


def read_manifest(path):
    path = Path(path)
    mf = path / MANIFEST
    if not mf.exists():
        raise CheckpointError(f"{path} is not a complete checkpoint (no manifest)")
    header, tensors, in_table = {}, [], False
    for line in mf.read_text().splitlines():
        if not line.strip():
            continue
        if line == "[tensors]":
            in_table = True
        elif in_table:
            name, dtype, shape, fname = line.split("\t")
            tensors.append((name, dtype, tuple(json.loads(shape)), fname))
        else:
            key, _, value = line.partition(" = ")
            header[key] = json.loads(value)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')!r}")
    header["tensors"] = tensors
    return header


def load_state(path):
    path = Path(path)
    header = read_manifest(path)
    state = {}
    for name, dtype, shape, fname in header["tensors"]:
        blob = np.fromfile(path / "tensors" / fname, dtype="<f4")
        if blob.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name}: expected {shape}, blob has {blob.size} values")
        t = torch.from_numpy(blob.astype(np.float32).reshape(shape))
        state[name] = t.to(getattr(torch, dtype))
    return header, state


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, extra)``."""
    header, state = load_state(path)
    spec_cls, builder = _KINDS[header["kind"]]
    model = builder(spec_cls(**header["spec"]))
    model.load_state_dict(state)
    model.eval()
    return model, header["extra"]


def import_weights(named_arrays, spec, path, kind="generator", extra=None):
    """Convert externally exported ``name -> array`` pairs into a checkpoint.

    Names must match the state-dict keys of the model ``spec`` builds; missing
    or unexpected names raise :class:`CheckpointError`.
    """
    spec_cls, builder = _KINDS[kind]
    if not isinstance(spec, spec_cls):
        raise CheckpointError(f"{kind} checkpoints need a {spec_cls.__name__}")
    model = builder(spec)
    expected = model.state_dict()
    missing = set(expected) - set(named_arrays)
    unexpected = set(named_arrays) - set(expected)
    if missing or unexpected:
        raise CheckpointError(f"weight names do not match: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    state = {}
    for name, ref in expected.items():
        arr = torch.as_tensor(np.asarray(named_arrays[name]))
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{name}: shape {tuple(arr.shape)} != expected {tuple(ref.shape)}")
        state[name] = arr.to(ref.dtype)
    model.load_state_dict(state)
    return save_checkpoint(model, path, extra=extra)
