"""Named-array checkpoints: a JSON manifest plus one little-endian buffer.

Layout of a checkpoint directory::

    manifest.json   {"format", "version", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}
    tensors.bin     raw little-endian bytes, tensors back to back in manifest order
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ArtifactMismatch, InputError

CHECKPOINT_FORMAT = "shapeformer-tensors"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
BUFFER = "tensors.bin"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Atomically write ``arrays`` to directory ``path``; returns the digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "buffer_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
        "tensors": entries,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)

    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        (tmp / BUFFER).write_bytes(blob)
        (tmp / MANIFEST).write_text(text, encoding="utf-8")
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    return checkpoint_digest(path)


def checkpoint_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / BUFFER).read_bytes())
    return h.hexdigest()


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory; raises before returning anything on error."""
    path = Path(path)
    mpath, bpath = path / MANIFEST, path / BUFFER
    if not mpath.is_file() or not bpath.is_file():
        raise InputError(f"{path}: not a checkpoint directory (missing {MANIFEST} or {BUFFER})")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputError(f"{mpath}: corrupted manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{mpath}: not a tensor manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ArtifactMismatch(
            f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {manifest.get('version')}")
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("buffer_sha256"):
        raise ArtifactMismatch(f"{bpath}: buffer digest does not match manifest")
    arrays = {}
    try:
        for e in manifest["tensors"]:
            dtype = np.dtype(e["dtype"])
            start, n = int(e["offset"]), int(e["nbytes"])
            shape = tuple(int(s) for s in e["shape"])
            if start < 0 or start + n > len(blob) or n != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
                raise InputError(f"{mpath}: entry {e['name']!r} is inconsistent with the buffer")
            arr = np.frombuffer(blob, dtype=dtype, count=n // dtype.itemsize, offset=start).reshape(shape)
            arrays[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{mpath}: corrupted manifest ({exc})") from exc
    return arrays, manifest.get("meta", {})
