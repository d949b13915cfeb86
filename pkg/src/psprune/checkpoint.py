"""Checkpoint container.

Layout::

    PSPRUNE-CKPT\\n
    <header byte length, decimal>\\n
    <header: canonical JSON>
    <raw little-endian float64 blocks>

The header holds the format version, model topology, config echo, the
compacted flag, kept-index tables and one entry per block (name, shape,
byte offset from the start of the block area). JSON is written with sorted
keys and no whitespace, and blocks are written in a fixed order, so
load-then-save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import LayerSpec, Model
from .psp import StructureSet

MAGIC = b"PSPRUNE-CKPT\n"
FORMAT_VERSION = 1
_LE = "<f8"


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class Checkpoint:
    model: Model
    config: dict = field(default_factory=dict)
    data_mean: np.ndarray | None = None
    kept: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.model
    blocks: list[tuple[str, np.ndarray]] = []
    blocks += [(f"param/{k}", v) for k, v in m.params.items()]
    blocks += [(f"buffer/{k}", v) for k, v in m.buffers.items()]
    structures = {}
    for name, s in m.structures.items():
        blocks.append((f"alpha/{name}", s.alpha))
        if s.mask is not None:
            blocks.append((f"mask/{name}", np.asarray(s.mask, dtype=np.float64)))
        structures[name] = {"granularity": s.granularity, "epsilon": float(s.epsilon),
                            "regularizer": s.regularizer, "grad_rule": s.grad_rule,
                            "trainable": bool(s.trainable), "has_mask": s.mask is not None}
    if ckpt.data_mean is not None:
        blocks.append(("data/mean", ckpt.data_mean))
    table, offset = [], 0
    payload = []
    for name, arr in blocks:
        raw = np.ascontiguousarray(arr, dtype=_LE).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "compacted": bool(m.compacted),
        "model": {"layers": [l.to_dict() for l in m.layers], "input_shape": list(m.input_shape),
                  "num_classes": m.num_classes, "arch": m.arch},
        "structures": structures,
        "config": ckpt.config,
        "kept": ckpt.kept,
        "extra": ckpt.extra,
        "blocks": table,
    }
    hbytes = json.dumps(_jsonable(header), sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + str(len(hbytes)).encode() + b"\n" + hbytes + b"".join(payload)


def from_bytes(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a psprune checkpoint (bad magic)")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1: nl + 1 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {header.get('format_version')}")
    data = rest[nl + 1 + hlen:]
    arrays = {}
    for b in header["blocks"]:
        n = int(np.prod(b["shape"], dtype=np.int64))
        start, stop = b["offset"], b["offset"] + 8 * n
        if stop > len(data):
            raise CheckpointError(f"block {b['name']!r} runs past end of file")
        arrays[b["name"]] = np.frombuffer(data[start:stop], dtype=_LE).astype(np.float64).reshape(b["shape"])
    mh = header["model"]
    layers = [LayerSpec.from_dict(d) for d in mh["layers"]]
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
    structures = {}
    for name, meta in header["structures"].items():
        conv = next(l for l in layers if l.name == name)
        mask = arrays[f"mask/{name}"].astype(bool) if meta["has_mask"] else None
        structures[name] = StructureSet(meta["granularity"], arrays[f"alpha/{name}"], meta["epsilon"],
                                        meta["regularizer"], meta["grad_rule"], mask, meta["trainable"],
                                        weight_shape=conv.geometry().weight_shape)
    model = Model(layers, params, buffers, tuple(mh["input_shape"]), mh["num_classes"], structures,
                  mh["arch"], header["compacted"])
    return Checkpoint(model, header["config"], arrays.get("data/mean"), header["kept"], header["extra"])


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return from_bytes(raw)


def parameter_blocks(path) -> bytes:
    """Raw block area of a checkpoint file (for byte-level determinism checks)."""
    raw = Path(path).read_bytes()[len(MAGIC):]
    nl = raw.find(b"\n")
    return raw[nl + 1 + int(raw[:nl]):]
