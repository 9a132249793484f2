"""Named, replayable random streams on top of numpy's counter-based Philox generator.

A stream is identified by ``(seed, name, *indices)``; the Philox key is a
digest of that identity, so streams never overlap and never depend on the
order in which they are first requested.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def stream_key(seed: int, name: str, *indices: int) -> int:
    ident = json.dumps([int(seed), name, *[int(i) for i in indices]]).encode()
    return int.from_bytes(hashlib.sha256(ident).digest()[:16], "little")


def make_stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, *indices)))


class RngStreams:
    """Cache of named streams whose cursors can be snapshotted and restored."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __call__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = make_stream(self.seed, name)
        return gen

    def state(self) -> dict:
        return {"seed": self.seed,
                "streams": {k: _jsonable(g.bit_generator.state) for k, g in sorted(self._streams.items())}}

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        out = cls(state["seed"])
        for name, st in state["streams"].items():
            gen = out(name)
            gen.bit_generator.state = _from_jsonable(st)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
