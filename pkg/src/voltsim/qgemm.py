"""INT8 GEMM engine with accumulator fault injection and anomaly clearance.

The multiply path mirrors a fixed-point accelerator: int8 operands, exact
integer accumulation in a W-bit two's-complement register (wraparound, no
saturation), bit flips XOR-ed into the produced accumulator words, and an
optional output-stage anomaly detector that clamps out-of-bound results to
zero before they propagate.

Accumulation is computed with float64 BLAS: every partial sum of int8
products is an integer below 2^53, so the result is exact, then rounded back
to integers and wrapped to the configured width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errmodel import (
    DEFAULT_WORD_WIDTH,
    RngStream,
    UniformBerModel,
    VoltageErrorTable,
    apply_mask_array,
    sample_flip_sites,
)

__all__ = [
    "QuantizedMatrix",
    "AnomalyBound",
    "GemmFaultConfig",
    "quantize",
    "dequantize",
    "required_width",
    "faulty_gemm",
    "requantize",
    "calibrate_bound",
    "requant_bound",
]


@dataclass(frozen=True)
class QuantizedMatrix:
    """INT8 matrix with a per-tensor scale; dequantized value = data * scale."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError(f"data must be int8, got {self.data.dtype}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AnomalyBound:
    """Absolute bound in dequantized units; violators clamp to zero.

    requant_bound mode fixes the threshold at 127 x output scale (the edge of
    the INT8 output range); calibrated mode uses margin x max |output| seen
    during fault-free profiling.
    """

    mode: str  # {"requant_bound", "calibrated"}
    threshold_dequant: float
    clamp_value: int = 0

    def __post_init__(self):
        if self.mode not in ("requant_bound", "calibrated"):
            raise ValueError(f"unknown bound mode {self.mode!r}")
        if not (self.threshold_dequant > 0 and math.isfinite(self.threshold_dequant)):
            raise ValueError("threshold_dequant must be finite and positive")
        if self.clamp_value != 0:
            raise ValueError("clamp value is fixed at 0")


@dataclass
class GemmFaultConfig:
    """Injection and output-stage configuration for one engine.

    error_source None means fault-free. voltage selects the table row when
    the source is a VoltageErrorTable. Counters tally across calls and are
    read out by episode traces.
    """

    error_source: UniformBerModel | VoltageErrorTable | None = None
    voltage: float | None = None
    ad_enabled: bool = False
    bound: AnomalyBound | None = None
    anomaly_counter: int = 0
    flip_counter: int = 0

    def __post_init__(self):
        if self.ad_enabled and self.bound is None:
            raise ValueError("ad_enabled requires a bound")
        if isinstance(self.error_source, VoltageErrorTable) and self.voltage is None:
            raise ValueError("table error source requires a voltage")

    def is_active(self) -> bool:
        if self.error_source is None:
            return False
        if isinstance(self.error_source, UniformBerModel):
            return self.error_source.ber > 0.0
        return True


def quantize(matrix: np.ndarray, scale: float) -> QuantizedMatrix:
    """Round-half-to-even quantization with saturation to [-128, 127]."""
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"scale must be finite and positive, got {scale}")
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite values in quantize input")
    q = np.clip(np.rint(m / scale), -128, 127).astype(np.int8)
    return QuantizedMatrix(q, float(scale))


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.data.astype(np.float64) * q.scale


def required_width(k: int) -> int:
    """Minimum accumulator width for a K-deep int8 dot product."""
    return int(math.ceil(math.log2(k))) + 16 if k > 1 else 16


def _wrap(acc: np.ndarray, width: int) -> np.ndarray:
    span = np.int64(1) << width
    half = span >> 1
    u = acc % span  # two's-complement pattern, non-negative
    return np.where(u >= half, u - span, u)


def faulty_gemm(
    A: QuantizedMatrix,
    B: QuantizedMatrix,
    cfg: GemmFaultConfig,
    rng: RngStream | None = None,
    *,
    width: int = DEFAULT_WORD_WIDTH,
    bound: AnomalyBound | None = None,
    allow_narrow: bool = False,
) -> tuple[np.ndarray, int]:
    """Exact W-bit integer GEMM, then bit flips, then anomaly clearance.

    Returns (accumulator int64 matrix, clamped_count). `bound` overrides
    cfg.bound for per-layer thresholds. Narrow widths (below the safe
    formula) wrap silently and are only for accumulator-width studies.
    """
    if A.cols != B.rows:
        raise ValueError(f"dimension mismatch: {A.data.shape} @ {B.data.shape}")
    need = required_width(A.cols)
    if width < need and not allow_narrow:
        raise ValueError(
            f"accumulator width {width} below required {need} for K={A.cols}"
        )
    acc = (A.data.astype(np.float64) @ B.data.astype(np.float64)).astype(np.int64)
    if width < need:
        acc = _wrap(acc, width)

    if cfg.is_active():
        if rng is None:
            raise ValueError("active error source requires an RngStream")
        flat = acc.reshape(-1)
        words, bits = sample_flip_sites(
            cfg.error_source, flat.shape[0], width, rng, voltage=cfg.voltage
        )
        if len(words):
            apply_mask_array(flat, words, bits, width)
            cfg.flip_counter += len(words)
        acc = flat.reshape(acc.shape)

    clamped = 0
    if cfg.ad_enabled:
        b = bound if bound is not None else cfg.bound
        limit = b.threshold_dequant / (A.scale * B.scale)  # integer-domain bound
        mask = np.abs(acc) > limit
        clamped = int(np.count_nonzero(mask))
        if clamped:
            acc = np.where(mask, np.int64(0), acc)
            cfg.anomaly_counter += clamped
    return acc, clamped


def requantize(
    acc: np.ndarray, in_scales: tuple[float, float], out_scale: float
) -> QuantizedMatrix:
    """Map accumulators back to INT8 under an offline-determined output scale."""
    if not (out_scale > 0 and math.isfinite(out_scale)):
        raise ValueError(f"out_scale must be finite and positive, got {out_scale}")
    s_a, s_b = in_scales
    vals = acc.astype(np.float64) * (s_a * s_b) / out_scale
    q = np.clip(np.rint(vals), -128, 127).astype(np.int8)
    return QuantizedMatrix(q, float(out_scale))


class CalibrationError(ValueError):
    pass


def calibrate_bound(layer_outputs, margin: float = 1.0) -> AnomalyBound:
    """Profile fault-free dequantized outputs; threshold = margin x max |value|."""
    if margin < 1.0:
        raise ValueError("margin must be >= 1")
    peak = 0.0
    seen = False
    for batch in layer_outputs:
        arr = np.asarray(batch, dtype=np.float64)
        if arr.size:
            seen = True
            peak = max(peak, float(np.max(np.abs(arr))))
    if not seen:
        raise CalibrationError("empty calibration stream")
    if peak == 0.0:
        raise CalibrationError("calibration stream is all zeros")
    return AnomalyBound("calibrated", margin * peak)


def requant_bound(out_scale: float) -> AnomalyBound:
    """Default AD bound: the INT8 output-range edge, 127 x output scale."""
    return AnomalyBound("requant_bound", 127.0 * out_scale)
