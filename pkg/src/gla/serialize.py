"""GLAT1 tensor files and checkpoint directories.

A GLAT1 file is the ASCII magic ``GLAT1``, a little-endian u32 rank, one
little-endian u32 per extent, then the float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLAT1"


class FormatError(ValueError):
    pass


def dumps_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads_tensor(buf: bytes) -> np.ndarray:
    if buf[:5] != MAGIC:
        raise FormatError("not a GLAT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 5)
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    start = 9 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - start != 4 * count:
        raise FormatError(f"payload has {len(buf) - start} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())


def save_checkpoint(directory, entries) -> None:
    """Write ``(name, array, role)`` triples plus a ``manifest.txt`` index."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr, role in entries:
        fname = name.replace("/", "_") + ".glat"
        save_tensor(d / fname, arr)
        shape = "x".join(str(s) for s in np.shape(arr)) or "scalar"
        lines.append(f"{name} {fname} {shape} {role}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict:
    """Return ``{name: (array, role)}`` from a checkpoint directory."""
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in checkpoint {d}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape, role = line.split()
        arr = load_tensor(d / fname)
        want = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        if arr.shape != want:
            raise FormatError(f"{fname}: shape {arr.shape} disagrees with manifest {want}")
        out[name] = (arr, role)
    return out
