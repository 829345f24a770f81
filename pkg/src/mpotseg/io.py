"""On-disk formats: checkpoints, 8-bit graymaps with scale sidecars, CSV tables.

Checkpoint layout (all integers little-endian)::

    magic   b"MPCKPT01"
    u32     version (1)
    u32     length of the UTF-8 metadata text, then the text itself
    u32     number of arrays
    per array, in sorted name order:
        u16 name length, UTF-8 name
        u8  ndim, then ndim u64 dimensions
        float64 data, row-major

The metadata text holds the experiment config echo, so a checkpoint is
self-describing.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MPCKPT01"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: str = "") -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    mb = meta.encode("utf-8")
    chunks += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    try:
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        (mlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        meta = buf[off : off + mlen].decode("utf-8")
        off += mlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after checkpoint body")
    return arrays, meta


# ------------------------------------------------------------- graymaps

def scale_to_bytes(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linearly map ``values`` onto 0..255; returns the image and (lo, hi)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        img = np.rint((v - lo) / (hi - lo) * 255.0)
    else:
        img = np.zeros_like(v)
    return img.astype(np.uint8), lo, hi


def bytes_to_values(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + np.asarray(img, dtype=np.float64) / 255.0 * (hi - lo)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError("graymap must be a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit binary graymaps are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1  # single whitespace byte before the raster
    return np.frombuffer(buf, np.uint8, w * h, pos).reshape(h, w).copy()


def write_scale_sidecar(path, entries: dict[str, tuple[float, float]]) -> None:
    """One line per image: ``name lo hi``; value = lo + pixel/255 * (hi - lo)."""
    lines = ["# image lo hi ; value = lo + pixel / 255 * (hi - lo)"]
    lines += [f"{name} {lo!r} {hi!r}" for name, (lo, hi) in sorted(entries.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scale_sidecar(path) -> dict[str, tuple[float, float]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, lo, hi = line.split()
        out[name] = (float(lo), float(hi))
    return out


# ------------------------------------------------------------------- CSV

def _cell(v) -> str:
    if isinstance(v, float):
        if not math.isfinite(v):
            raise FormatError(f"refusing to write non-finite value {v}")
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row[h]) for h in header])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
