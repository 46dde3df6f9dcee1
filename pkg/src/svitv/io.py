"""Binary snapshots and PGM images.

SVIF snapshot layout (all integers little-endian)::

    b"SVIF"                      magic
    u32   version                currently 1
    u32   n                      length of the descriptor in bytes
    n     descriptor             UTF-8 JSON grid descriptor (sorted keys)
    f64   time
    u64   step
    u64   count                  number of nodes
    count f64 values             node values in C (lexicographic) order

PGM images are binary P5 with 8-bit (maxval < 256) or 16-bit big-endian
samples.  Pixel ``[row, col]`` maps to torus node ``[row, col]`` and the
value ``v / maxval`` in [0, 1]; writing clips to [0, 1] and rounds
``x * maxval`` half to even.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import TORUS, grid_from_descriptor

MAGIC = b"SVIF"
VERSION = 1


class SnapshotError(ValueError):
    pass


class PgmError(ValueError):
    pass


@dataclass(eq=False)
class Snapshot:
    values: np.ndarray
    descriptor: dict
    time: float
    step: int

    @property
    def grid(self):
        return grid_from_descriptor(self.descriptor)


def write_snapshot(path, values, grid, time=0.0, step=0):
    values = np.asarray(values, dtype=np.float64)
    if values.shape != grid.shape:
        raise SnapshotError(f"field shape {values.shape} does not match grid "
                            f"{grid.shape}")
    desc = json.dumps(grid.descriptor(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<dQQ", float(time), int(step), values.size))
        fh.write(values.astype("<f8").tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise SnapshotError("not a SVIF file")
    if len(data) < 12:
        raise SnapshotError("truncated header")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise SnapshotError(f"unsupported version {version}")
    off = 12 + n
    if len(data) < off + 24:
        raise SnapshotError("truncated header")
    try:
        desc = json.loads(data[12:off].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"bad grid descriptor: {exc}") from exc
    time, step, count = struct.unpack_from("<dQQ", data, off)
    off += 24
    if len(data) - off < 8 * count:
        raise SnapshotError(f"truncated payload: expected {count} values, "
                            f"found {(len(data) - off) // 8}")
    if len(data) - off > 8 * count:
        raise SnapshotError("trailing bytes after payload")
    grid = grid_from_descriptor(desc)
    if count != grid.size:
        raise SnapshotError(f"payload has {count} values, grid has "
                            f"{grid.size} nodes")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=off)
    return Snapshot(values.astype(np.float64).reshape(grid.shape), desc,
                    time, step)


# --------------------------------------------------------------------------
# PGM

_TOKEN = re.compile(rb"(?:\s|#[^\n]*(?:\n|$))*(\d+)")


def read_pgm(path):
    """Read a binary PGM as a float array in [0, 1] of shape (rows, cols)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise PgmError("malformed header: not a binary PGM (P5)")
    pos = 2
    nums = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmError("malformed header")
        nums.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = nums
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PgmError("malformed header")
    pos += 1
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PgmError(f"malformed header: {width}x{height}, maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise PgmError(f"truncated pixel data: need {need} bytes, have "
                       f"{len(data) - pos}")
    px = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return px.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, values, bits=8):
    if bits not in (8, 16):
        raise PgmError("bits must be 8 or 16")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise PgmError("PGM images are two-dimensional")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(values, 0.0, 1.0) * maxval)
    dtype = "u1" if bits == 8 else ">u2"
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (cols, rows, maxval))
        fh.write(q.astype(dtype).tobytes())


def image_to_field(img, grid):
    if grid.kind != TORUS or grid.dim != 2:
        raise PgmError("images map onto two-dimensional torus grids only")
    if img.shape != grid.shape:
        raise PgmError(f"image size {img.shape[1]}x{img.shape[0]} does not "
                       f"match grid {grid.shape}")
    return np.array(img, dtype=np.float64)
