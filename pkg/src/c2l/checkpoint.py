"""Checkpoint files: a tiny self-describing container for parameters.

Layout: 4-byte magic ``C2L1``, a little-endian uint32 manifest length, a
JSON manifest, then the raw payload. The manifest lists every tensor
(name, role, shape) in payload order plus the encoder config, training
progress, and the RNG seed. The payload is the tensors' bytes as
little-endian float32 in C order, nothing else, so the expected byte
count is known before any value is read.

All randomness in training is derived statelessly from (seed, purpose,
iteration), so seed + progress fully captures the RNG state; no
generator internals are stored.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .contrast import MemoryQueue
from .encoder import EncoderConfig, NetworkParams
from .numerics import Tensor

MAGIC = b"C2L1"
FORMAT_VERSION = 1

_F4 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint."""


def _tensor_entries(params, role):
    entries = []
    arrays = []
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoint payload is float32; {role} tensor {name!r} "
                f"has dtype {arr.dtype}")
        entries.append({"name": name, "role": role, "shape": list(arr.shape)})
        arrays.append(np.ascontiguousarray(arr, dtype=_F4))
    return entries, arrays


def _write(path, manifest, arrays):
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(len(blob), dtype="<u4").tobytes())
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def save_student(path, params, progress=None):
    """Write a student-only export: parameters + encoder config."""
    if params.role != "student":
        raise CheckpointError(f"student export from role {params.role!r}")
    entries, arrays = _tensor_entries(params, "student")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "student",
        "encoder_config": params.config.to_dict(),
        "tensors": entries,
        "progress": progress or {},
        "queue": None,
    }
    _write(path, manifest, arrays)


def save_full(path, student, teacher, queue, iteration, epoch, seed):
    """Write a resumable checkpoint: both networks, queue, progress."""
    s_entries, s_arrays = _tensor_entries(student, "student")
    t_entries, t_arrays = _tensor_entries(teacher, "teacher")
    if queue.buffer.dtype != np.float32:
        raise CheckpointError("queue buffer must be float32 for checkpointing")
    q_entry = {"name": "queue.buffer", "role": "queue",
               "shape": list(queue.buffer.shape)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "full",
        "encoder_config": student.config.to_dict(),
        "tensors": s_entries + t_entries + [q_entry],
        "progress": {"iteration": iteration, "epoch": epoch},
        "seed": seed,
        "queue": {"n": queue.n, "d": queue.d, "head": queue.head,
                  "inserted": queue.inserted},
    }
    arrays = s_arrays + t_arrays + [np.ascontiguousarray(queue.buffer, dtype=_F4)]
    _write(path, manifest, arrays)


def read_manifest(path):
    """Parse and validate the header; returns (manifest, payload_offset)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (blob_len,) = np.frombuffer(head[4:8], dtype="<u4")
        blob = fh.read(int(blob_len))
    if len(blob) != blob_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest, 8 + int(blob_len)


def load(path):
    """Read a checkpoint into (manifest, {name: float32 array}).

    The payload byte count is checked against the manifest before any
    tensor is materialized; a single missing or extra byte is an error.
    """
    manifest, offset = read_manifest(path)
    expected = 0
    for entry in manifest["tensors"]:
        n = 1
        for dim in entry["shape"]:
            n *= int(dim)
        expected += 4 * n
    actual = os.path.getsize(path) - offset
    if actual != expected:
        raise CheckpointError(
            f"{path}: payload is {actual} bytes, manifest requires {expected}")
    arrays = {}
    with open(path, "rb") as fh:
        fh.seek(offset)
        for entry in manifest["tensors"]:
            shape = tuple(int(d) for d in entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            # student and teacher reuse parameter names; key by role too
            arrays[entry["role"], entry["name"]] = np.frombuffer(
                buf, dtype=_F4).astype(np.float32).reshape(shape)
    return manifest, arrays


def _params_from(manifest, arrays, role):
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    names = [e["name"] for e in manifest["tensors"] if e["role"] == role]
    if not names:
        raise CheckpointError(f"checkpoint has no {role!r} tensors")
    params = {}
    for name in names:
        t = Tensor(arrays[role, name])
        t.requires_grad = role == "student"
        params[name] = t
    return NetworkParams(params, role, config)


def load_student(path, expected_config=None):
    """Load student parameters; errors if the stored encoder shape differs."""
    manifest, arrays = load(path)
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: encoder config mismatch: checkpoint has {config}, "
            f"expected {expected_config}")
    return _params_from(manifest, arrays, "student")


def load_full(path, expected_config=None):
    """Load a resumable checkpoint into its raw pieces (a dict)."""
    manifest, arrays = load(path)
    if manifest["kind"] != "full":
        raise CheckpointError(f"{path}: kind {manifest['kind']!r} is not resumable")
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: encoder config mismatch: checkpoint has {config}, "
            f"expected {expected_config}")
    qinfo = manifest["queue"]
    queue = MemoryQueue(arrays["queue", "queue.buffer"].copy(),
                        head=int(qinfo["head"]))
    queue.inserted = int(qinfo["inserted"])
    return {
        "student": _params_from(manifest, arrays, "student"),
        "teacher": _params_from(manifest, arrays, "teacher"),
        "queue": queue,
        "iteration": int(manifest["progress"]["iteration"]),
        "epoch": int(manifest["progress"]["epoch"]),
        "seed": int(manifest["seed"]),
    }


def tensor_roles(path):
    """Role of every tensor listed in the manifest (no payload read)."""
    manifest, _ = read_manifest(path)
    return sorted({e["role"] for e in manifest["tensors"]})
