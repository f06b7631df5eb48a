"""Binary PPM (P6) and the flat PWIM float32 tensor format.

PWIM layout (little endian, 16-byte header)::

    4s  magic "PWIM"
    u8  version (1)
    u8  flags          (probability mappings: bit0 unmatched state, bit1 fixed unmatched column)
    u16 h, u16 w, u16 c
    u16 reserved0      (probability mappings: target grid width)
    u16 reserved1      (probability mappings: source grid width)

followed by h*w*c float32 values in row-major (h, w, c) order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PWIM"
VERSION = 1
_HEADER = struct.Struct("<4sBBHHHHH")


class FormatError(ValueError):
    pass


def write_pwim(path, arr, flags=0, reserved=(0, 0)):
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"PWIM stores rank-2 or rank-3 arrays, got {arr.shape}")
    h, w, c = arr.shape
    header = _HEADER.pack(MAGIC, VERSION, flags, h, w, c, *reserved)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_pwim(path, with_header=False):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, flags, h, w, c, r0, r1 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = h * w * c * 4
    if len(raw) != _HEADER.size + n:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {n}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)
    if with_header:
        return arr, {"flags": flags, "reserved": (r0, r1)}
    return arr


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.dtype.kind == "f":
        img = np.clip(np.round(img * 255.0), 0, 255)
    img = img.astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img[..., :3].tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return data.reshape(h, w, 3).astype(np.float32) / 255.0
