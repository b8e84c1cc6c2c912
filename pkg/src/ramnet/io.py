"""Binary and text containers: TEN1 tensors, CKP1 checkpoints, EVT1 events.

All integers and floats are little-endian.

TEN1: ``b"TEN1"``, u32 rank, rank x u32 dims, float32 payload.
CKP1: ``b"CKP1"``, u32 count, then per entry u16 name length, UTF-8 name
and an embedded TEN1 record.
EVT1: ``b"EVT1"``, u16 width, u16 height, u64 count, then 14-byte records
(u64 t_us, u16 x, u16 y, i8 p, u8 pad).
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TEN_MAGIC = b"TEN1"
CKP_MAGIC = b"CKP1"
EVT_MAGIC = b"EVT1"

EVT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")])


class FormatError(ValueError):
    """A file does not follow the expected container layout."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor_record(f: BinaryIO, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype="<f4")
    f.write(TEN_MAGIC)
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def read_tensor_record(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "TEN1 magic")
    if magic != TEN_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "TEN1 rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "TEN1 dims"))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(f, 4 * count, "TEN1 payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_record(f, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        out = read_tensor_record(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor record")
    return out


def save_depth(path: str | Path, normalized: np.ndarray, mask: np.ndarray) -> None:
    """Write a depth map and its validity mask as a ``.mask`` sibling."""
    path = Path(path)
    save_tensor(path, normalized)
    save_tensor(path.with_name(path.name + ".mask"), mask.astype(np.float32))


def load_depth(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return load_tensor(path), load_tensor(path.with_name(path.name + ".mask")) > 0.5


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKP_MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor_record(buf, params[name])
    return buf.getvalue()


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "CKP1 magic")
        if magic != CKP_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "CKP1 count"))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2, "CKP1 name length"))
            name = _read_exact(f, n, "CKP1 name").decode("utf-8")
            out[name] = read_tensor_record(f)
    return out


def save_events(path: str | Path, events) -> None:
    rec = np.zeros(len(events), dtype=EVT_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = events.t, events.x, events.y, events.p
    with open(path, "wb") as f:
        f.write(EVT_MAGIC)
        f.write(struct.pack("<HHQ", events.width, events.height, len(events)))
        f.write(rec.tobytes())


def load_events(path: str | Path):
    from .events import EventStream

    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "EVT1 magic")
        if magic != EVT_MAGIC:
            raise FormatError(f"{path}: bad event magic {magic!r}")
        width, height, count = struct.unpack("<HHQ", _read_exact(f, 12, "EVT1 header"))
        rec = np.frombuffer(_read_exact(f, count * EVT_DTYPE.itemsize, "EVT1 records"), dtype=EVT_DTYPE)
    return EventStream(t=rec["t"].astype(np.int64), x=rec["x"].astype(np.int32),
                       y=rec["y"].astype(np.int32), p=rec["p"].astype(np.int8),
                       width=width, height=height)


def save_events_csv(path: str | Path, events) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("t_us,x,y,p\n")
        for t, x, y, p in zip(events.t, events.x, events.y, events.p):
            f.write(f"{t},{x},{y},{p}\n")


def load_events_csv(path: str | Path, width: int, height: int):
    from .events import EventStream

    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        data = np.zeros((0, 4), dtype=np.int64)
    return EventStream(t=data[:, 0], x=data[:, 1].astype(np.int32), y=data[:, 2].astype(np.int32),
                       p=data[:, 3].astype(np.int8), width=width, height=height)


def write_meta(path: str | Path, meta: dict) -> None:
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
