"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LGRCKPT1"            magic
    u32                    format version
    u64                    optimizer step
    u64 + bytes            canonical config text (UTF-8)
    u64                    tensor count
    per tensor:
        u64 + bytes        name (UTF-8)
        u64                rank
        u64 × rank         extents
        f32 × prod(extents) payload, row-major

Tensor names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, dump_config, load_config
from .errors import ConfigError, DataError, ValidationError

MAGIC = b"LGRCKPT1"
VERSION = 1
_KINDS = ("param", "adam_m", "adam_v")


def quantize(a: np.ndarray) -> np.ndarray:
    """Round-trip through float32, the precision stored on disk."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model: ModelConfig
    train: TrainConfig | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def config_text(self) -> str:
        return dump_config(model=self.model, train=self.train)

    @classmethod
    def snapshot(cls, params, model, train=None, step=0, m=None, v=None) -> "Checkpoint":
        """Copy at stored precision so an in-memory checkpoint equals its reloaded form."""
        q = lambda d: {k: quantize(a) for k, a in (d or {}).items()}  # noqa: E731
        return cls(q(params), model, train, step, q(m), q(v))


def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def _bytes(b: bytes) -> bytes:
    return _u64(len(b)) + b


def to_bytes(ck: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _u64(ck.step), _bytes(ck.config_text().encode())]
    records = [(f"param/{k}", a) for k, a in ck.params.items()]
    records += [(f"adam_m/{k}", a) for k, a in ck.m.items()]
    records += [(f"adam_v/{k}", a) for k, a in ck.v.items()]
    parts.append(_u64(len(records)))
    for name, a in records:
        a = np.asarray(a, dtype="<f4")
        parts.append(_bytes(name.encode()))
        parts.append(_u64(a.ndim))
        parts += [_u64(n) for n in a.shape]
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        try:
            return self.take(self.u64()).decode()
        except UnicodeDecodeError as exc:
            raise ValidationError(f"{self.source}: bad string at byte {self.pos}") from exc


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise ValidationError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", r.take(4))
    if version != VERSION:
        raise ValidationError(f"{source}: unsupported checkpoint version {version}")
    step = r.u64()
    try:
        cfg = load_config(text=r.text())
    except ConfigError as exc:
        raise ValidationError(f"{source}: bad embedded config: {exc}") from exc
    groups: dict[str, dict[str, np.ndarray]] = {k: {} for k in _KINDS}
    for _ in range(r.u64()):
        full = r.text()
        kind, _, name = full.partition("/")
        if kind not in groups or not name:
            raise ValidationError(f"{source}: unexpected tensor name {full!r}")
        shape = tuple(r.u64() for _ in range(r.u64()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        groups[kind][name] = data.astype(np.float64)
    if r.pos != len(buf):
        raise ValidationError(f"{source}: {len(buf) - r.pos} trailing bytes")
    for kind in ("adam_m", "adam_v"):
        for name, a in groups[kind].items():
            if name not in groups["param"] or groups["param"][name].shape != a.shape:
                raise ValidationError(f"{source}: {kind}/{name} has no matching parameter")
    return Checkpoint(groups["param"], cfg["model"], cfg["train"], step, groups["adam_m"], groups["adam_v"])


def save_checkpoint(ck: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(ck))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf, str(path))
