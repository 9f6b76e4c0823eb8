"""Binary weight files.

Layout (all integers little-endian)::

    b"SHRL"  u16 version  u32 count
    count x ( u16 name_len, name utf-8, u8 rank, rank x u32 extent,
              prod(extents) x f32 row-major )

A JSON sidecar ``<file>.json`` records the backbone spec so a file can be
rebuilt into a backbone without other context.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError

MAGIC = b"SHRL"
VERSION = 1


def dumps_weights(state: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads_weights(blob: bytes) -> dict[str, np.ndarray]:
    """Inverse of :func:`dumps_weights`; arrays come back as float64."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ConfigError("not a SHRL weights file")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != VERSION:
            raise ConfigError(f"unsupported weights version {version}")
        pos, out = 10, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            name = bytes(view[pos + 2:pos + 2 + n]).decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", view, pos)
            shape = struct.unpack_from(f"<{rank}I", view, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape)
            out[name] = arr.astype(np.float64)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"truncated weights file: {exc}") from None
    if pos != len(view):
        raise ConfigError(f"{len(view) - pos} trailing bytes after the last entry")
    return out


def save_weights(path: str | Path, state: Mapping[str, np.ndarray], spec: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps_weights(state))
    if spec is not None:
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    try:
        return loads_weights(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read weights: {exc.strerror}", field=str(path)) from None


def load_sidecar(path: str | Path) -> dict | None:
    sidecar = Path(path).with_name(Path(path).name + ".json")
    return json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else None
