"""File formats: the LSPT tensor container, binary PGM frames and CSV tables.

LSPT byte layout (all integers little-endian)::

    b"LSPT"  u32 version  u32 entry_count
    per entry:
        u32 name_len  name (UTF-8)  u32 dtype (0 = f32, 1 = f64)  u32 rank
        u64 dims[rank]  raw little-endian data
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"LSPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    """Write named float arrays; other numeric dtypes are stored as f64."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            if not (np.issubdtype(arr.dtype, np.number) or arr.dtype == bool):
                raise ContainerError(f"entry {name!r} has unsupported dtype {arr.dtype}")
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<II", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError("not an LSPT container")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError("truncated container")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<II", take(8))
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise ContainerError("trailing bytes after last entry")
    return out


def text_to_array(text: str) -> np.ndarray:
    """Pack UTF-8 text as an f64 array of byte values (for JSON metadata entries)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def json_entry(obj) -> np.ndarray:
    return text_to_array(json.dumps(obj, sort_keys=True))


def entry_json(arr: np.ndarray):
    return json.loads(array_to_text(arr))


# --- PGM ----------------------------------------------------------------------


def render_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) scaled so the grid maximum maps to 255."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("grid must be 2D")
    peak = g.max()
    pix = np.zeros(g.shape, dtype=np.uint8) if peak <= 0 else np.rint(np.clip(g, 0, None) / peak * 255).astype(np.uint8)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pix = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    return pix.reshape(h, w)


# --- CSV ----------------------------------------------------------------------


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
