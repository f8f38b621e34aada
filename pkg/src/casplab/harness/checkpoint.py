"""CASP checkpoint files: a flat table of named float32 tensors plus RNG state.

Layout (little-endian)::

    b"CASP"  u32 version=1  u32 tensor_count
    tensor_count x ( u16 name_len, name utf-8, u8 ndim, ndim x u32 dims, prod(dims) x f32 )
    u64 seed  u64 stream  u64 counter

Non-float state rides along as tensors too: the prototype class/session table
is stored as small integers in f32 (exact below 2**24) and the resolved
config as its JSON bytes, one byte per element.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..prompts import PromptSet
from ..prototypes import PrototypeMatrix
from ..vit import BackboneParams, VitConfig
from .errors import BadMagicError, FormatError, TruncatedError, VersionError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "checkpoint_bytes", "parse_checkpoint"]

CASP_MAGIC = b"CASP"
CASP_VERSION = 1
_HEAD = struct.Struct("<4sII")
_RNG = struct.Struct("<QQQ")
CONFIG_KEY = "meta.config"
INDEX_KEY = "prototypes.index"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: tuple[int, int, int] = (0, 0, 0)

    @property
    def config(self) -> dict | None:
        raw = self.tensors.get(CONFIG_KEY)
        if raw is None:
            return None
        return json.loads(raw.astype(np.uint8).tobytes().decode("utf-8"))

    def set_config(self, config: dict) -> None:
        raw = json.dumps(config, sort_keys=True).encode("utf-8")
        self.tensors[CONFIG_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)

    @classmethod
    def from_run(
        cls,
        backbone: BackboneParams,
        prompts: PromptSet | None = None,
        W: PrototypeMatrix | None = None,
        config: dict | None = None,
        rng_state=(0, 0, 0),
    ) -> Checkpoint:
        ck = cls(rng_state=tuple(int(x) for x in rng_state))
        for name, t in backbone.named_tensors():
            ck.tensors[name] = t.data
        if prompts is not None:
            for name, t in prompts.named_tensors():
                ck.tensors[name] = t.data
        if W is not None and len(W):
            ck.tensors["prototypes"] = W.rows
            ck.tensors[INDEX_KEY] = W.index_table().astype(np.float32)
        if config is not None:
            ck.set_config(config)
        return ck

    def backbone(self, cfg: VitConfig) -> BackboneParams:
        return BackboneParams.from_named(self.tensors, cfg)

    def prompts(self, prompts: PromptSet) -> PromptSet:
        """Load the stored prompt tensors into ``prompts`` (in place)."""
        prompts.load_named({k: v for k, v in self.tensors.items() if k.startswith(("cagp.", "cdap."))})
        return prompts

    def prototypes(self) -> PrototypeMatrix:
        if "prototypes" not in self.tensors:
            return PrototypeMatrix()
        table = self.tensors[INDEX_KEY].astype(np.int64)
        return PrototypeMatrix(
            rows=self.tensors["prototypes"].copy(),
            class_ids=table[:, 0].tolist(),
            session_of=table[:, 1].tolist(),
        )


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    parts = [_HEAD.pack(CASP_MAGIC, CASP_VERSION, len(ck.tensors))]
    for name, arr in ck.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(_RNG.pack(*ck.rng_state))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CASP_MAGIC:
        raise BadMagicError(f"bad magic {magic!r} (expected {CASP_MAGIC!r})")
    (version,) = r.unpack("<I", "version")
    if version != CASP_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(n, f"tensor {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"{name} data")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", kind="duplicate")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    state = r.unpack("<QQQ", "RNG state")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after RNG state", kind="trailing")
    return Checkpoint(tensors, tuple(state))


def save_checkpoint(path, ck: Checkpoint) -> bytes:
    data = checkpoint_bytes(ck)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
