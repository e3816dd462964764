"""Post-training int8 quantization with an accuracy-aware per-layer fallback.

Weights are quantized symmetrically per layer (zero point 0, scale
max|w|/127). The accuracy-aware loop quantizes everything, then greedily
reverts individual layers to 32-bit until the calibration-set score drop
falls inside the budget. Quantized inference dequantizes and reuses the
full-precision forward pass.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError
from .metrics import evaluate_case
from .model import SegNet
from .pipeline import prepare_case
from .tensors import LayerSlice, ParamVector, wire_roundtrip

__all__ = [
    "QuantizedLayer",
    "CalibrationStep",
    "CalibrationReport",
    "QuantizedModel",
    "round_half_away",
    "quantize_layer",
    "dequantize_params",
    "quantized_forward",
    "accuracy_aware_quantize",
    "write_fpq",
    "read_fpq",
]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest, halves away from zero (numpy rounds halves to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_layer(w: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric int8 quantization of one layer slice.

    scale = max|w| / 127 (1.0 for an all-zero layer); q = clamp(round(w/scale)).
    Round-trip error is bounded by scale/2 elementwise.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise EmptyDatasetError("cannot quantize an empty layer")
    peak = float(np.abs(w).max())
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(round_half_away(w / scale), -127, 127).astype(np.int8)
    return scale, q


@dataclass(frozen=True)
class QuantizedLayer:
    layer_id: str
    mode: str  # "int8" | "f32"
    scale: float
    q_data: np.ndarray | None  # int8 payload when mode == "int8"
    f_data: np.ndarray | None  # float32 payload when mode == "f32"

    def dequantized(self) -> np.ndarray:
        if self.mode == "int8":
            return self.q_data.astype(np.float64) * self.scale
        return self.f_data.astype(np.float64)


@dataclass(frozen=True)
class CalibrationStep:
    iteration: int
    reverted_layer: str | None
    dsc: float


@dataclass(frozen=True)
class CalibrationReport:
    baseline_dsc: float
    steps: tuple[CalibrationStep, ...]
    final_dsc: float
    max_drop: float

    @property
    def drop(self) -> float:
        return self.baseline_dsc - self.final_dsc

    def as_dict(self) -> dict:
        return {
            "baseline_dsc": self.baseline_dsc,
            "final_dsc": self.final_dsc,
            "drop": self.drop,
            "max_drop": self.max_drop,
            "steps": [
                {"iteration": s.iteration, "reverted_layer": s.reverted_layer, "dsc": s.dsc}
                for s in self.steps
            ],
        }


@dataclass(frozen=True)
class QuantizedModel:
    layers: tuple[QuantizedLayer, ...]
    template: ParamVector  # layer table of the source checkpoint
    calibration_report: CalibrationReport | None = None

    def int8_layer_ids(self) -> tuple[str, ...]:
        return tuple(l.layer_id for l in self.layers if l.mode == "int8")

    def with_reverted(self, layer_id: str, f_data: np.ndarray) -> "QuantizedModel":
        new_layers = tuple(
            QuantizedLayer(l.layer_id, "f32", 1.0, None, f_data.astype(np.float32))
            if l.layer_id == layer_id
            else l
            for l in self.layers
        )
        return QuantizedModel(new_layers, self.template, self.calibration_report)


def dequantize_params(qm: QuantizedModel) -> ParamVector:
    return ParamVector.from_segments([(l.layer_id, l.dequantized()) for l in qm.layers])


def _quantize_all(params: ParamVector) -> QuantizedModel:
    layers = []
    for ls in params.layers:
        seg = params.segment(ls.layer_id)
        scale, q = quantize_layer(seg)
        layers.append(QuantizedLayer(ls.layer_id, "int8", scale, q, None))
    return QuantizedModel(tuple(layers), params)


def quantized_forward(qm: QuantizedModel, net_template: SegNet, x: np.ndarray) -> np.ndarray:
    """Dequantize-then-compute reference inference path."""
    from .model import forward

    return forward(net_template.with_params(dequantize_params(qm)), x)


def accuracy_aware_quantize(
    net: SegNet,
    calibration_cases,
    patch_size: int,
    max_drop: float = 0.01,
) -> QuantizedModel:
    """Quantize all layers, then greedily revert layers until the drop fits.

    The source checkpoint is snapped to 32-bit first (quantization consumes
    the single-precision model), so an all-f32 result reproduces the baseline
    bit for bit. Each loop iteration reverts the int8 layer whose reversion
    most improves the calibration score. Terminates after at most one
    reversion per layer.
    """
    cases = [prepare_case(vol, masks) for vol, masks in calibration_cases]
    if not cases:
        raise EmptyDatasetError("calibration set is empty")

    snapped = wire_roundtrip(net.params)
    base_net = net.with_params(snapped)

    def mean_dsc(params: ParamVector) -> float:
        scored = [
            evaluate_case(net.with_params(params), vol, masks, patch_size, preprocess=False).average
            for vol, masks in cases
        ]
        return float(np.mean(scored))

    baseline = mean_dsc(snapped)
    qm = _quantize_all(snapped)
    current = mean_dsc(dequantize_params(qm))
    steps = [CalibrationStep(iteration=0, reverted_layer=None, dsc=current)]

    iteration = 0
    while baseline - current > max_drop and qm.int8_layer_ids():
        iteration += 1
        best = None
        for layer_id in qm.int8_layer_ids():
            trial = qm.with_reverted(layer_id, snapped.segment(layer_id))
            score = mean_dsc(dequantize_params(trial))
            if best is None or score > best[1]:
                best = (layer_id, score, trial)
        layer_id, score, qm = best
        current = score
        steps.append(CalibrationStep(iteration=iteration, reverted_layer=layer_id, dsc=score))

    report = CalibrationReport(
        baseline_dsc=baseline, steps=tuple(steps), final_dsc=current, max_drop=max_drop
    )
    return QuantizedModel(qm.layers, qm.template, report)


# ---------------------------------------------------------------------------
# FPQ1 quantized checkpoint format
#
#   magic "FPQ1" | layer count u32 |
#   per layer: id length u16, UTF-8 id, mode byte (0 f32 / 1 int8),
#              scale f64, length u64, payload (int8 bytes or f32 LE)
# ---------------------------------------------------------------------------

FPQ_MAGIC = b"FPQ1"


def fpq_bytes(qm: QuantizedModel) -> bytes:
    out = io.BytesIO()
    out.write(FPQ_MAGIC)
    out.write(struct.pack("<I", len(qm.layers)))
    for layer in qm.layers:
        ident = layer.layer_id.encode("utf-8")
        mode = 1 if layer.mode == "int8" else 0
        payload = layer.q_data.tobytes() if mode else layer.f_data.astype("<f4").tobytes()
        length = layer.q_data.size if mode else layer.f_data.size
        out.write(struct.pack("<H", len(ident)))
        out.write(ident)
        out.write(struct.pack("<BdQ", mode, layer.scale, length))
        out.write(payload)
    return out.getvalue()


def fpq_from_bytes(blob: bytes) -> QuantizedModel:
    buf = memoryview(blob)
    if bytes(buf[:4]) != FPQ_MAGIC:
        raise ValueError("not an FPQ1 blob")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    layers = []
    slices = []
    offset = 0
    for _ in range(count):
        (idlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        ident = bytes(buf[pos : pos + idlen]).decode("utf-8")
        pos += idlen
        mode, scale, length = struct.unpack_from("<BdQ", buf, pos)
        pos += 17
        if mode == 1:
            q = np.frombuffer(buf[pos : pos + length], dtype=np.int8).copy()
            pos += length
            layers.append(QuantizedLayer(ident, "int8", scale, q, None))
        else:
            f = np.frombuffer(buf[pos : pos + 4 * length], dtype="<f4").copy()
            pos += 4 * length
            layers.append(QuantizedLayer(ident, "f32", scale, None, f))
        slices.append(LayerSlice(ident, offset, int(length)))
        offset += int(length)
    template = ParamVector(tuple(slices), np.zeros(offset))
    return QuantizedModel(tuple(layers), template)


def write_fpq(path, qm: QuantizedModel, report_path=None) -> None:
    with open(path, "wb") as fh:
        fh.write(fpq_bytes(qm))
    if report_path is not None and qm.calibration_report is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(qm.calibration_report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_fpq(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return fpq_from_bytes(fh.read())
