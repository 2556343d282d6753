"""
Binary checkpoints: architecture plus every parameter and BN running
statistic, bit-exact. Layout is documented in docs/checkpoint_format.md.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from sknet.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from sknet.core.errors import CheckpointError
from sknet.models.arch import ArchSpec, Network, build

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<8sIQ")


def save_checkpoint(net: Network) -> bytes:
    entries = []
    blobs = []
    offset = 0
    tensors = [("param", name, p.data) for name, p in net.parameters().items()]
    tensors += [("buffer", name, arr) for name, arr in net.buffers().items()]
    for kind, name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"kind": kind, "name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"arch": net.spec.model_dump(mode="json"), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest))
    return header + manifest + b"".join(blobs)


def load_checkpoint(payload: bytes) -> Network:
    if len(payload) < _HEADER.size:
        raise CheckpointError(f"checkpoint truncated: {len(payload)} bytes, header needs {_HEADER.size}")
    magic, version, manifest_len = _HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = _HEADER.size
    if len(payload) < start + manifest_len:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(payload[start : start + manifest_len].decode("utf-8"))
        spec = ArchSpec.model_validate(manifest["arch"])
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValidationError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc

    net = build(spec)
    params, buffers = net.parameters(), net.buffers()
    data = memoryview(payload)[start + manifest_len :]
    seen = set()
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        target = params[name].data if entry["kind"] == "param" and name in params else buffers.get(name)
        if target is None:
            raise CheckpointError(f"checkpoint tensor {name!r} does not exist in {spec.name}")
        if target.shape != shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {shape} vs {target.shape}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + nbytes
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
        target[...] = np.frombuffer(data[entry["offset"] : end], dtype="<f8").reshape(shape)
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]!r}")
    return net


def write_checkpoint(net: Network, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(save_checkpoint(net))
    logger.info("wrote checkpoint %s (%d parameters)", path, net.num_parameters())
    return path


def read_checkpoint(path: str | Path) -> Network:
    return load_checkpoint(Path(path).read_bytes())
