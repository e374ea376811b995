"""Binary checkpoint container.

Layout (all little-endian): magic "SSA1", u16 format version, then the body,
then a trailing CRC-32 of everything before it. Tensors are written as a
dtype code, a rank, explicit u32 dims, and raw C-order bytes. Parameters are
32-bit floats; Adam accumulators are 64-bit. Feedback is stored as (seed,
sigma) plus per-layer init ranks — it is rebuilt, not serialized.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"SSA1"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _w_u(buf, fmt: str, value: int):
    buf.write(struct.pack("<" + fmt, value))


def _w_f64(buf, value: float):
    buf.write(struct.pack("<d", value))


def _w_str(buf, s: str):
    raw = s.encode("utf-8")
    _w_u(buf, "I", len(raw))
    buf.write(raw)


def _w_tensor(buf, a: np.ndarray):
    dt = np.dtype(a.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported tensor dtype {a.dtype}")
    _w_u(buf, "B", _DTYPE_CODES[dt])
    _w_u(buf, "B", a.ndim)
    for d in a.shape:
        _w_u(buf, "I", d)
    buf.write(np.ascontiguousarray(a).astype(dt, copy=False).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"checkpoint ends early at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def s(self) -> str:
        n = self.u("I")
        return self.take(n).decode("utf-8")

    def tensor(self) -> np.ndarray:
        code = self.u("B")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"unknown tensor dtype code {code}")
        dt = _DTYPES[code]
        ndim = self.u("B")
        shape = tuple(self.u("I") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_checkpoint(path: str, state: dict) -> None:
    """state layout:
      fingerprint: str      seed: int        epochs_done: int
      sigma_b, sigma_t: float
      layers: [{index, kind, init_rank, dims (4 ints or ()), tensors: {name: f32}}]
      adam: {lr, beta1, beta2, eps, entries: [(layer_index, name, m, v, t)]}
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    _w_u(buf, "H", VERSION)
    _w_str(buf, state["fingerprint"])
    _w_u(buf, "Q", state["seed"])
    _w_u(buf, "I", state["epochs_done"])
    _w_f64(buf, state["sigma_b"])
    _w_f64(buf, state["sigma_t"])

    layers = state["layers"]
    _w_u(buf, "I", len(layers))
    for lay in layers:
        _w_u(buf, "I", lay["index"])
        _w_str(buf, lay["kind"])
        _w_u(buf, "I", lay["init_rank"])
        dims = lay.get("dims") or ()
        _w_u(buf, "B", len(dims))
        for d in dims:
            _w_u(buf, "I", d)
        tensors = lay["tensors"]
        _w_u(buf, "B", len(tensors))
        for name in sorted(tensors):
            _w_str(buf, name)
            t = tensors[name]
            if t.dtype != np.float32:
                raise ValueError(f"parameter {name} must be float32, got {t.dtype}")
            _w_tensor(buf, t)

    adam = state["adam"]
    for field in ("lr", "beta1", "beta2", "eps"):
        _w_f64(buf, adam[field])
    entries = adam["entries"]
    _w_u(buf, "I", len(entries))
    for layer_index, name, m, v, t in entries:
        _w_u(buf, "I", layer_index)
        _w_str(buf, name)
        if m.dtype != np.float64 or v.dtype != np.float64:
            raise ValueError("Adam accumulators must be float64")
        _w_tensor(buf, m)
        _w_tensor(buf, v)
        _w_u(buf, "Q", t)

    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 2 + 4:
        raise CorruptCheckpointError(f"checkpoint too short: {len(blob)} bytes")
    payload, crc_raw = blob[:-4], blob[-4:]
    if payload[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic bytes {payload[:4]!r}")
    crc = struct.unpack("<I", crc_raw)[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise CorruptCheckpointError(
            f"checksum mismatch: stored {crc:#010x}, computed {actual:#010x}")
    r = _Reader(payload)
    r.take(4)  # magic
    version = r.u("H")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")

    state = {
        "fingerprint": r.s(),
        "seed": r.u("Q"),
        "epochs_done": r.u("I"),
        "sigma_b": r.f64(),
        "sigma_t": r.f64(),
    }
    layers = []
    for _ in range(r.u("I")):
        lay = {"index": r.u("I"), "kind": r.s(), "init_rank": r.u("I")}
        ndims = r.u("B")
        lay["dims"] = tuple(r.u("I") for _ in range(ndims))
        tensors = {}
        for _ in range(r.u("B")):
            name = r.s()
            tensors[name] = r.tensor()
        lay["tensors"] = tensors
        layers.append(lay)
    state["layers"] = layers

    adam = {field: r.f64() for field in ("lr", "beta1", "beta2", "eps")}
    entries = []
    for _ in range(r.u("I")):
        layer_index = r.u("I")
        name = r.s()
        m = r.tensor()
        v = r.tensor()
        t = r.u("Q")
        entries.append((layer_index, name, m, v, t))
    adam["entries"] = entries
    state["adam"] = adam
    if r.pos != len(payload):
        raise CorruptCheckpointError(
            f"{len(payload) - r.pos} trailing bytes after checkpoint body")
    return state
