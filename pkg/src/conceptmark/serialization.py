"""Checkpoint container: a directory with a manifest and one binary blob
per parameter group.

Blob layout (all little-endian): magic "CMK1", uint32 record count, then
per tensor sorted by name: uint32 name length, utf-8 name, uint32 ndim,
int64 dims, float32 data. Manifests carry no wall-clock fields so reruns
with identical state produce byte-identical directories.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, IoError

MAGIC = b"CMK1"
CONTAINER_VERSION = 1


def tensors_to_blob(named: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(named))]
    for name in sorted(named):
        tensor = named[name].detach().to(torch.float32).contiguous()
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", tensor.dim()))
        chunks.append(struct.pack(f"<{tensor.dim()}q", *tensor.shape))
        chunks.append(tensor.numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def blob_to_tensors(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise IntegrityError("blob does not start with the CMK1 magic")
    offset = 4
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}q", blob, offset)
        offset += 8 * ndim
        numel = 1
        for s in shape:
            numel *= s
        data = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).copy()
        offset += 4 * numel
        out[name] = torch.from_numpy(data).reshape(shape)
    if offset != len(blob):
        raise IntegrityError(f"trailing bytes in blob: {len(blob) - offset}")
    return out


def blob_sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def module_tensors(module) -> dict:
    return {name: t for name, t in module.state_dict().items()}


def hash_tensors(named: dict) -> str:
    return blob_sha256(tensors_to_blob(named))


def hash_module(module) -> str:
    return hash_tensors(module_tensors(module))


def save_checkpoint(dirpath, groups: dict, manifest_extra: dict = None) -> None:
    """groups maps group name -> {tensor name -> tensor}."""
    path = Path(dirpath)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create checkpoint dir {dirpath}: {exc}")
    manifest = {"container_version": CONTAINER_VERSION, "groups": []}
    if manifest_extra:
        manifest.update(manifest_extra)
    for name in sorted(groups):
        blob = tensors_to_blob(groups[name])
        fname = f"{name}.bin"
        try:
            (path / fname).write_bytes(blob)
        except OSError as exc:
            raise IoError(f"cannot write blob {fname}: {exc}")
        manifest["groups"].append({
            "name": name,
            "file": fname,
            "sha256": blob_sha256(blob),
            "tensors": [
                {"name": t, "shape": list(groups[name][t].shape)}
                for t in sorted(groups[name])
            ],
        })
    try:
        with open(path / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}")


def load_checkpoint(dirpath):
    path = Path(dirpath)
    try:
        with open(path / "manifest.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest from {dirpath}: {exc}")
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"manifest is not valid JSON: {exc}")
    if manifest.get("container_version") != CONTAINER_VERSION:
        raise IntegrityError(
            f"container version {manifest.get('container_version')}, "
            f"expected {CONTAINER_VERSION}"
        )
    groups = {}
    for entry in manifest["groups"]:
        try:
            blob = (path / entry["file"]).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read blob {entry['file']}: {exc}")
        if blob_sha256(blob) != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for group {entry['name']}")
        groups[entry["name"]] = blob_to_tensors(blob)
    return manifest, groups


def checkpoint_hash(dirpath) -> str:
    """Order-stable digest over the manifest and every blob."""
    path = Path(dirpath)
    digest = hashlib.sha256()
    digest.update((path / "manifest.json").read_bytes())
    manifest, _ = load_checkpoint(dirpath)
    for entry in sorted(manifest["groups"], key=lambda e: e["name"]):
        digest.update((path / entry["file"]).read_bytes())
    return digest.hexdigest()
