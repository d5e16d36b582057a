"""Header + raw payload container shared by every on-disk artifact.

Layout: UTF-8 ``key=value`` lines, a blank line, then a little-endian binary
payload. The ``magic`` key names the payload flavour:

======== ==================== ==========================================
magic    payload dtype        contents
======== ==================== ==========================================
CS2VOL1  int16                HU volume, slice-major then row-major
CS2MSK1  uint8                label volume (same geometry keys)
CS2GDF1  float64              guidance map(s) in HU
CS2CKP1  float64              generator + discriminator parameters
CS2ENS1  float64              ensemble member parameters
CS2FEA1  float64              per-pixel decoder features (F, H, W)
======== ==================== ==========================================
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from .errors import MalformedHeaderError, SizeMismatchError

PAYLOAD_DTYPES = {
    "CS2VOL1": np.dtype("<i2"),
    "CS2MSK1": np.dtype("u1"),
    "CS2GDF1": np.dtype("<f8"),
    "CS2CKP1": np.dtype("<f8"),
    "CS2ENS1": np.dtype("<f8"),
    "CS2FEA1": np.dtype("<f8"),
}
GEOMETRY_KEYS = ("n_slices", "height", "width")


def write_container(path, magic: str, header: Mapping[str, object], payload: np.ndarray) -> None:
    dtype = PAYLOAD_DTYPES[magic]
    lines = [f"magic={magic}"]
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} cannot be encoded on one line")
        lines.append(f"{key}={text}")
    blob = "\n".join(lines).encode("utf-8") + b"\n\n" + np.ascontiguousarray(payload, dtype=dtype).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_container(path, expect_magic: str | None = None) -> tuple[str, dict[str, str], np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise MalformedHeaderError(f"{path}: header is not terminated by a blank line")
    try:
        text = blob[:sep].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"{path}: header is not valid UTF-8") from exc
    header: dict[str, str] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        key, eq, value = line.partition("=")
        if not eq or not key:
            raise MalformedHeaderError(f"{path}: header line {lineno} is not key=value: {line!r}")
        header[key.strip()] = value.strip()
    magic = header.pop("magic", None)
    if magic not in PAYLOAD_DTYPES:
        raise MalformedHeaderError(f"{path}: unknown or missing magic {magic!r}")
    if expect_magic is not None and magic != expect_magic:
        raise MalformedHeaderError(f"{path}: expected magic {expect_magic}, found {magic}")
    dtype = PAYLOAD_DTYPES[magic]
    raw = blob[sep + 2 :]
    if len(raw) % dtype.itemsize:
        raise SizeMismatchError(f"{path}: payload of {len(raw)} bytes is not a whole number of {dtype} items")
    return magic, header, np.frombuffer(raw, dtype=dtype).copy()


def header_int(header: Mapping[str, str], key: str, path="") -> int:
    try:
        value = int(header[key])
    except KeyError:
        raise MalformedHeaderError(f"{path}: header lacks {key!r}") from None
    except ValueError:
        raise MalformedHeaderError(f"{path}: header {key!r}={header[key]!r} is not an integer") from None
    if value < 0:
        raise MalformedHeaderError(f"{path}: header {key!r} is negative")
    return value


def header_float(header: Mapping[str, str], key: str, path="", default: float | None = None) -> float:
    if key not in header and default is not None:
        return default
    try:
        return float(header[key])
    except KeyError:
        raise MalformedHeaderError(f"{path}: header lacks {key!r}") from None
    except ValueError:
        raise MalformedHeaderError(f"{path}: header {key!r}={header[key]!r} is not a number") from None


def read_grid(path, magic: str) -> tuple[np.ndarray, dict[str, str]]:
    """Read a CS2VOL1/CS2MSK1/CS2GDF1 file into an (n_slices, height, width) array."""
    _, header, payload = read_container(path, magic)
    n, h, w = (header_int(header, k, path) for k in GEOMETRY_KEYS)
    if payload.size != n * h * w:
        raise SizeMismatchError(
            f"{path}: header declares {n}x{h}x{w}={n * h * w} voxels, payload holds {payload.size}"
        )
    return payload.reshape(n, h, w), header


def write_grid(path, magic: str, grid: np.ndarray, extra: Mapping[str, object] | None = None) -> None:
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[None]
    header = dict(zip(GEOMETRY_KEYS, grid.shape))
    header.update(extra or {})
    write_container(path, magic, header, grid)


def encode_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """16-bit binary portable graymap, linearly scaled from [lo, hi]."""
    image = np.asarray(image, dtype=np.float64)
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.clip(np.rint((image - lo) * scale), 0, 65535).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())
