"""Binary gradient-capture files.

Layout (all little-endian)::

    "SPGC"            4 bytes magic
    u32 version       currently 1
    u32 m, u32 n
    u8  protocol tag  0 fedsgd, 1 fedavg, 2 dpsgd
    parameter block   u32 seed, then
                        fedavg: u32 epochs, u32 mini_batch, f64 lr
                        dpsgd:  f64 clip, f64 sigma
    u8  has-truth
    [u32 b]           only when has-truth is set
    f64 arrays, row-major: dW (m, n), db (m), layer_W (m, n), layer_b (m)
    [X (n, b), Z (m, b), dZ (m, b)] when has-truth is set
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CaptureFormatError, UnsupportedVersionError
from .flsim import DPSGD, FEDAVG, FEDSGD, GradientCapture, GroundTruth, Protocol

MAGIC = b"SPGC"
VERSION = 1
_TAGS = {FEDSGD: 0, FEDAVG: 1, DPSGD: 2}
_KINDS = {v: k for k, v in _TAGS.items()}
_F64 = np.dtype("<f8")


def encode_capture(cap: GradientCapture) -> bytes:
    m, n = cap.dW.shape
    p = cap.protocol
    parts = [MAGIC, struct.pack("<III", VERSION, m, n), struct.pack("<BI", _TAGS[p.kind], cap.seed)]
    if p.kind == FEDAVG:
        parts.append(struct.pack("<IId", p.epochs, p.mini_batch, p.lr))
    elif p.kind == DPSGD:
        parts.append(struct.pack("<dd", p.clip, p.sigma))
    arrays = [cap.dW, cap.db, cap.layer_W, cap.layer_b]
    if cap.truth is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BI", 1, cap.truth.X.shape[1]))
        arrays += [cap.truth.X, cap.truth.Z, cap.truth.dZ]
    parts += [np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CaptureFormatError(f"truncated capture: need {size} bytes at offset {self.pos}")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.buf):
            raise CaptureFormatError(
                f"truncated capture: array of {count} f64 at offset {self.pos} exceeds {len(self.buf)} bytes"
            )
        a = np.frombuffer(self.buf, dtype=_F64, count=count, offset=self.pos).reshape(shape)
        self.pos += 8 * count
        return a.astype(np.float64)


def decode_capture(buf: bytes) -> GradientCapture:
    if buf[:4] != MAGIC:
        raise CaptureFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"capture version {version} is not supported (expected {VERSION})")
    m, n = r.unpack("<II")
    tag, seed = r.unpack("<BI")
    if tag not in _KINDS:
        raise CaptureFormatError(f"unknown protocol tag {tag}")
    kind = _KINDS[tag]
    if kind == FEDAVG:
        epochs, mini, lr = r.unpack("<IId")
        protocol = Protocol.fedavg(epochs, mini, lr)
    elif kind == DPSGD:
        clip, sigma = r.unpack("<dd")
        protocol = Protocol.dpsgd(clip, sigma)
    else:
        protocol = Protocol.fedsgd()
    (flag,) = r.unpack("<B")
    b = r.unpack("<I")[0] if flag else 0
    dW, db, W, bias = r.array(m, n), r.array(m), r.array(m, n), r.array(m)
    truth = None
    if flag:
        truth = GroundTruth(r.array(n, b), r.array(m, b), r.array(m, b))
    if r.pos != len(buf):
        raise CaptureFormatError(f"{len(buf) - r.pos} trailing bytes after capture payload")
    return GradientCapture(dW, db, W, bias, protocol, seed, truth)


def save_capture(cap: GradientCapture, path) -> None:
    Path(path).write_bytes(encode_capture(cap))


def load_capture(path) -> GradientCapture:
    return decode_capture(Path(path).read_bytes())
