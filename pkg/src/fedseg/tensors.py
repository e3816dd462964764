"""Flat parameter vectors, elementwise kernels, and the FPV1 checkpoint format.

All numeric state lives in contiguous float64 numpy arrays; 32-bit floats
appear only on the wire and as quantization input. Values are immutable
after construction (arrays are flagged read-only) so they can be shared
freely across threads.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidWeightsError, ShapeMismatchError

__all__ = [
    "LayerSlice",
    "ParamVector",
    "elementwise",
    "l1_norm",
    "weighted_mean",
    "fpv_bytes",
    "fpv_from_bytes",
    "write_fpv",
    "read_fpv",
    "wire_roundtrip",
]

_BINARY_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def elementwise(op: str, a, b) -> np.ndarray:
    """Componentwise add/sub/mul of equal-shape arrays, or scale by a scalar."""
    a = _as_f64(a)
    if op == "scale":
        return a * float(b)
    if op not in _BINARY_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = _as_f64(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, f"elementwise {op}")
    return _BINARY_OPS[op](a, b)


def l1_norm(a) -> float:
    """Sum of absolute values of all components."""
    return float(np.abs(_as_f64(a)).sum())


@dataclass(frozen=True)
class LayerSlice:
    """One named contiguous segment of a flat parameter vector."""

    layer_id: str
    offset: int
    length: int


@dataclass(frozen=True)
class ParamVector:
    """Flat model parameters with a per-layer segmentation table.

    Layer segments must be sorted by offset and tile ``data`` exactly.
    Two vectors are shape-compatible iff their layer tables are identical.
    """

    layers: tuple[LayerSlice, ...]
    data: np.ndarray

    def __post_init__(self):
        data = _as_f64(self.data).reshape(-1)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layers", tuple(self.layers))
        pos = 0
        for ls in self.layers:
            if ls.length < 0:
                raise ValueError(f"layer {ls.layer_id!r} has negative length")
            if ls.offset != pos:
                raise ValueError(
                    f"layer table has a gap or overlap at {ls.layer_id!r}: "
                    f"offset {ls.offset}, expected {pos}"
                )
            pos += ls.length
        if pos != data.size:
            raise ValueError(f"layer table covers {pos} values, data has {data.size}")

    @classmethod
    def from_segments(cls, segments) -> "ParamVector":
        """Build from an ordered iterable of (layer_id, array) pairs."""
        layers = []
        chunks = []
        pos = 0
        for layer_id, arr in segments:
            flat = _as_f64(arr).reshape(-1)
            layers.append(LayerSlice(str(layer_id), pos, flat.size))
            chunks.append(flat)
            pos += flat.size
        data = np.concatenate(chunks) if chunks else np.empty(0)
        return cls(tuple(layers), data)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(ls.layer_id for ls in self.layers)

    def segment(self, layer_id: str) -> np.ndarray:
        for ls in self.layers:
            if ls.layer_id == layer_id:
                return self.data[ls.offset : ls.offset + ls.length]
        raise KeyError(layer_id)

    def shape_compatible(self, other: "ParamVector") -> bool:
        return self.layers == other.layers

    def replace_data(self, data) -> "ParamVector":
        return ParamVector(self.layers, data)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layers, np.zeros(self.data.size))


def weighted_mean(vectors, weights) -> ParamVector:
    """Convex combination sum_k w_k v_k / sum_k w_k over shape-compatible vectors.

    Accumulated in anchored form (first vector plus weighted deviations) so
    that aggregating bitwise-identical inputs reproduces them exactly.
    Summation runs in list order; callers wanting a canonical order sort
    before calling.
    """
    vectors = list(vectors)
    ws = [float(w) for w in weights]
    if not vectors:
        raise InvalidWeightsError("weighted_mean of zero vectors")
    if len(vectors) != len(ws):
        raise InvalidWeightsError(f"{len(vectors)} vectors but {len(ws)} weights")
    if any(w < 0 for w in ws):
        raise InvalidWeightsError("negative weight")
    total = 0.0
    for w in ws:
        total += w
    if total <= 0.0:
        raise InvalidWeightsError("weights sum to zero")
    base = vectors[0]
    for v in vectors[1:]:
        if not base.shape_compatible(v):
            raise ShapeMismatchError(base.layer_ids, v.layer_ids, "weighted_mean")
    acc = np.zeros_like(base.data)
    for v, w in zip(vectors[1:], ws[1:]):
        acc += (w / total) * (v.data - base.data)
    return base.replace_data(base.data + acc)


# ---------------------------------------------------------------------------
# FPV1 binary checkpoint format
#
#   magic "FPV1" | format byte (0x08 f64, 0x04 f32) | layer count u32 |
#   per layer: id length u16, UTF-8 id, offset u64, length u64 |
#   raw little-endian payload
# ---------------------------------------------------------------------------

FPV_MAGIC = b"FPV1"
_FMT_F64 = 0x08
_FMT_F32 = 0x04


def fpv_bytes(pv: ParamVector, dtype: str = "f8") -> bytes:
    if dtype not in ("f8", "f4"):
        raise ValueError("dtype must be 'f8' or 'f4'")
    fmt = _FMT_F64 if dtype == "f8" else _FMT_F32
    out = io.BytesIO()
    out.write(FPV_MAGIC)
    out.write(struct.pack("<BI", fmt, len(pv.layers)))
    for ls in pv.layers:
        ident = ls.layer_id.encode("utf-8")
        out.write(struct.pack("<H", len(ident)))
        out.write(ident)
        out.write(struct.pack("<QQ", ls.offset, ls.length))
    payload = pv.data.astype("<f8" if dtype == "f8" else "<f4")
    out.write(payload.tobytes())
    return out.getvalue()


def fpv_from_bytes(blob: bytes) -> ParamVector:
    """Parse an FPV1 blob; f32 payloads are promoted to f64."""
    buf = memoryview(blob)
    if bytes(buf[:4]) != FPV_MAGIC:
        raise ValueError("not an FPV1 blob")
    fmt, count = struct.unpack_from("<BI", buf, 4)
    if fmt not in (_FMT_F64, _FMT_F32):
        raise ValueError(f"unknown FPV1 format byte 0x{fmt:02x}")
    pos = 9
    layers = []
    for _ in range(count):
        (idlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        ident = bytes(buf[pos : pos + idlen]).decode("utf-8")
        pos += idlen
        offset, length = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        layers.append(LayerSlice(ident, offset, length))
    dt = "<f8" if fmt == _FMT_F64 else "<f4"
    data = np.frombuffer(buf[pos:], dtype=dt).astype(np.float64)
    return ParamVector(tuple(layers), data)


def write_fpv(path, pv: ParamVector, dtype: str = "f8") -> None:
    with open(path, "wb") as fh:
        fh.write(fpv_bytes(pv, dtype))


def read_fpv(path) -> ParamVector:
    with open(path, "rb") as fh:
        return fpv_from_bytes(fh.read())


def wire_roundtrip(pv: ParamVector) -> ParamVector:
    """Round a vector through the 32-bit wire representation."""
    return pv.replace_data(pv.data.astype(np.float32).astype(np.float64))
