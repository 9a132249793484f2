"""Flat, versioned key -> array container used for model checkpoints and adapter files.

Layout::

    b"CINELORA" | uint64-le header length | header JSON (sorted keys) | raw array bytes

The header lists every array (name, dtype, shape, offset, nbytes) and the
SHA-256 of the payload.  Nothing time-dependent is written, so identical
arrays and metadata always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CINELORA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptFileError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str, what: str = "config"):
        super().__init__(f"{what} digest mismatch: model has {expected}, file has {found}")
        self.expected, self.found = expected, found


def encode(arrays: dict[str, np.ndarray], kind: str, meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": entries,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def decode(blob: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CorruptFileError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CorruptFileError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptFileError("payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, header["meta"]


def write(path, arrays: dict[str, np.ndarray], kind: str, meta: dict) -> str:
    """Write atomically; return the SHA-256 of the file."""
    blob = encode(arrays, kind, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), kind)


# -- model checkpoints ---------------------------------------------------------
def save_model(model, path) -> str:
    meta = {"model_config": model.cfg.to_dict(), "config_digest": model.cfg.digest()}
    return write(path, model.state_dict(), "model", meta)


def load_model(path):
    from .model import ModelConfig, VideoDiT

    arrays, meta = read(path, "model")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg.digest() != meta["config_digest"]:
        raise CorruptFileError("model config does not match its recorded digest")
    model = VideoDiT(cfg)
    model.load_state_dict(arrays)
    return model


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
