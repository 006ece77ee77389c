"""Binary containers for volumes and checkpoints, plus hashing helpers.

Both containers share one layout::

    magic line        b"UDAVOL1\\n" (volumes) or b"UDACKPT1\\n" (checkpoints)
    header length     uint32, little-endian
    header            UTF-8 JSON object, keys written in a fixed order
    payload           raw little-endian arrays, back to back, in header order

Volume header keys, in order: ``shape``, ``spacing``, ``domain_tag``,
``dtype``, ``label_dtype``, ``blobs``, ``meta``.  ``blobs`` names the arrays
in the payload; it always starts with ``intensities`` then ``labels`` and may
carry extra per-voxel arrays (pseudo-label ``confidence``).

Checkpoint header keys, in order: ``kind``, ``config``, ``iteration``,
``seed``, ``params``, ``meta``.  Each ``params`` entry is
``{"name", "dtype", "shape", "offset", "nbytes"}`` with ``offset`` relative to
the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"UDAVOL1\n"
CHECKPOINT_MAGIC = b"UDACKPT1\n"


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def hash_obj(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _write_container(path, magic: bytes, header: dict, arrays) -> None:
    path = Path(path)
    raw = json.dumps(header, default=_json_default).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype=_le(arr.dtype)).tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _read_container(path, magic: bytes):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed reading {path}: {exc}") from exc
    if not data.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    (n,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    header = json.loads(data[pos : pos + n].decode(), object_pairs_hook=OrderedDict)
    return header, memoryview(data)[pos + n :]


def write_volume(path, intensities, labels, spacing, domain_tag, meta=None, extra=None) -> None:
    intensities = np.asarray(intensities)
    labels = np.asarray(labels)
    if intensities.shape != labels.shape:
        raise FormatError(f"intensity shape {intensities.shape} != label shape {labels.shape}")
    extra = extra or {}
    header = OrderedDict(
        shape=list(intensities.shape),
        spacing=[float(s) for s in spacing],
        domain_tag=domain_tag,
        dtype=intensities.dtype.str.lstrip("<>=|"),
        label_dtype=labels.dtype.str.lstrip("<>=|"),
        blobs=["intensities", "labels"]
        + [f"{k}:{np.asarray(v).dtype.str.lstrip('<>=|')}" for k, v in extra.items()],
        meta=meta or {},
    )
    _write_container(path, VOLUME_MAGIC, header, [intensities, labels, *map(np.asarray, extra.values())])


def read_volume(path) -> dict:
    header, payload = _read_container(path, VOLUME_MAGIC)
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    out = {"spacing": tuple(header["spacing"]), "domain_tag": header["domain_tag"], "meta": dict(header["meta"])}
    offset = 0
    for blob in header["blobs"]:
        if blob == "intensities":
            name, dt = blob, header["dtype"]
        elif blob == "labels":
            name, dt = blob, header["label_dtype"]
        else:
            name, dt = blob.split(":")
        dtype = _le(dt)
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload for blob {name!r}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes
    return out


def write_checkpoint(path, state_dict, kind: str, config: dict, iteration: int, seed: int, meta=None) -> None:
    params, arrays, offset = [], [], 0
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy() if hasattr(tensor, "detach") else np.asarray(tensor)
        params.append(
            OrderedDict(name=name, dtype=arr.dtype.str.lstrip("<>=|"), shape=list(arr.shape), offset=offset, nbytes=arr.nbytes)
        )
        arrays.append(arr)
        offset += arr.nbytes
    header = OrderedDict(kind=kind, config=config, iteration=int(iteration), seed=int(seed), params=params, meta=meta or {})
    _write_container(path, CHECKPOINT_MAGIC, header, arrays)


def read_checkpoint(path):
    """Return ``(header, state_dict)`` with parameters as torch tensors."""
    import torch

    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    state = OrderedDict()
    for p in header["params"]:
        dtype = _le(p["dtype"])
        arr = np.frombuffer(payload[p["offset"] : p["offset"] + p["nbytes"]], dtype=dtype)
        state[p["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("=")).reshape(p["shape"]))
    return header, state


def _magic_of(path):
    with open(path, "rb") as fh:
        head = fh.read(len(CHECKPOINT_MAGIC))
    for magic in (VOLUME_MAGIC, CHECKPOINT_MAGIC):
        if head.startswith(magic):
            return magic
    raise FormatError(f"{path}: not a volume or checkpoint container")


def read_meta(path) -> dict:
    """Header ``meta`` of a volume or checkpoint without decoding its arrays."""
    header, _ = _read_container(path, _magic_of(path))
    return dict(header["meta"])


def update_meta(path, updates: dict) -> None:
    """Merge ``updates`` into a container's header ``meta``; the payload is copied verbatim."""
    path = Path(path)
    magic = _magic_of(path)
    header, payload = _read_container(path, magic)
    header["meta"] = {**header["meta"], **updates}
    raw = json.dumps(header, default=_json_default).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)
    os.replace(tmp, path)
