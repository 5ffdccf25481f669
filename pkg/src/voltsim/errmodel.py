"""Fault sources: uniform BER and voltage-dependent per-bit flip-rate tables.

Two error models drive injection:

* :class:`UniformBerModel` - every produced accumulator bit flips
  independently with one probability.
* :class:`VoltageErrorTable` - per-bit flip rates on a grid of supply
  voltages; lower voltage means more errors, and higher (more significant)
  bits start failing at higher voltages than low bits.

Sampling is deterministic: every consumer owns an :class:`RngStream` keyed by
a hierarchical stream id, so draws never depend on scheduling order.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RngStream",
    "UniformBerModel",
    "VoltageErrorTable",
    "FlipMask",
    "default_table",
    "rate_for",
    "rates_at",
    "sample_mask",
    "sample_flip_sites",
    "apply_mask",
    "apply_mask_array",
    "matched_uniform_ber",
]

NOMINAL_VOLTAGE = 0.90
DEFAULT_WORD_WIDTH = 24


class RngStream:
    """Counter-based random stream keyed by (seed, hierarchical stream id).

    Draws depend only on the key, never on how many other streams were
    created or consumed first, which keeps campaigns deterministic under any
    worker schedule. Streams are cheap; derive one per (episode, step, layer)
    rather than sharing.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: tuple = ()):
        self.seed = int(seed)
        self.stream_id = tuple(stream_id)
        self._gen = None

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(parts))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            h = hashlib.blake2b(digest_size=16)  # Philox key is 2x64 bits
            h.update(self.seed.to_bytes(8, "little", signed=True))
            for part in self.stream_id:
                h.update(repr(part).encode())
                h.update(b"\x1f")
            key = np.frombuffer(h.digest(), dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class UniformBerModel:
    """Uniform bit error rate: each output bit flips with probability `ber`."""

    ber: float

    def __post_init__(self):
        if not (0.0 <= self.ber <= 1.0) or not math.isfinite(self.ber):
            raise ValueError(f"ber must be in [0, 1], got {self.ber}")


@dataclass(frozen=True)
class FlipMask:
    """Bit positions to flip in one accumulator word."""

    word_width: int
    bits: frozenset

    def __post_init__(self):
        bad = [b for b in self.bits if not (0 <= b < self.word_width)]
        if bad:
            raise ValueError(f"bit positions {bad} outside word width {self.word_width}")

    def as_int(self) -> int:
        m = 0
        for b in self.bits:
            m |= 1 << b
        return m


class TableValidationError(ValueError):
    """Raised when a voltage table violates a monotonicity axis."""


@dataclass
class VoltageErrorTable:
    """Per-bit flip rates over a grid of supply voltages.

    voltages: ascending, volts. rates[v][b]: flip probability of bit b at
    voltages[v]. Invariants (validated on construction and on load):
    rates non-increasing in voltage per bit, non-decreasing in bit index per
    voltage, and all zero at the nominal entry.
    """

    voltages: np.ndarray
    rates: np.ndarray
    nominal: float = NOMINAL_VOLTAGE
    _by_voltage: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=np.float64)
        self.rates = np.asarray(self.rates, dtype=np.float64)
        self.validate()
        self._by_voltage = {}

    @property
    def word_width(self) -> int:
        return self.rates.shape[1]

    def validate(self) -> None:
        v, r = self.voltages, self.rates
        if v.ndim != 1 or r.ndim != 2 or r.shape[0] != v.shape[0]:
            raise TableValidationError(
                f"shape mismatch: {v.shape[0]} voltages vs {r.shape} rates"
            )
        if np.any(np.diff(v) <= 0):
            idx = int(np.flatnonzero(np.diff(v) <= 0)[0])
            raise TableValidationError(f"voltages not strictly ascending at index {idx}")
        if np.any(r < 0) or np.any(r > 1):
            i, j = np.argwhere((r < 0) | (r > 1))[0]
            raise TableValidationError(f"rate out of [0,1] at voltage index {i}, bit {j}")
        # axis 1: per bit, non-increasing as voltage rises
        up = np.diff(r, axis=0) > 1e-15
        if np.any(up):
            i, j = np.argwhere(up)[0]
            raise TableValidationError(
                "voltage axis violated: rate increases with voltage "
                f"between voltage indices {i} and {i + 1} at bit {j}"
            )
        # axis 2: per voltage, non-decreasing in bit index
        down = np.diff(r, axis=1) < -1e-15
        if np.any(down):
            i, j = np.argwhere(down)[0]
            raise TableValidationError(
                "bit axis violated: rate decreases with bit index "
                f"between bits {j} and {j + 1} at voltage index {i}"
            )
        if self.nominal <= v[-1] + 1e-12:
            # nominal entry (highest grid voltage at/above nominal) must be all-zero
            k = int(np.searchsorted(v, min(self.nominal, v[-1]) + 1e-12) - 1)
            if k >= 0 and np.any(r[k] != 0.0):
                raise TableValidationError(
                    f"nominal voltage entry (index {k}, {v[k]:.3f} V) has nonzero rates"
                )

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {"voltages": self.voltages.tolist(), "rates": self.rates.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "VoltageErrorTable":
        obj = json.loads(text)
        if not isinstance(obj, dict) or "voltages" not in obj or "rates" not in obj:
            raise TableValidationError("table JSON must have 'voltages' and 'rates'")
        return cls(np.asarray(obj["voltages"]), np.asarray(obj["rates"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "VoltageErrorTable":
        with open(path) as f:
            return cls.from_json(f.read())


def default_table(width: int = DEFAULT_WORD_WIDTH) -> VoltageErrorTable:
    """Synthetic default table from a parametric onset model.

    rate(b, V) = r_max * logistic((V_on(b) - V) / s) with the turn-on voltage
    V_on rising linearly from 0.70 V at bit 0 to 0.88 V at bit `width-1`
    (more significant bits sit on longer timing paths, so they fail first as
    the supply drops); r_max = 0.5, s = 0.01 V, and every rate clamps to 0 at
    V >= 0.90. Grid: 0.60..0.90 V in 10 mV steps.
    """
    r_max, s = 0.5, 0.01
    voltages = np.round(np.arange(0.60, 0.90 + 1e-9, 0.01), 4)
    bits = np.arange(width)
    v_on = 0.70 + 0.18 * bits / (DEFAULT_WORD_WIDTH - 1)
    rates = r_max / (1.0 + np.exp(-(v_on[None, :] - voltages[:, None]) / s))
    rates[voltages >= NOMINAL_VOLTAGE - 1e-12, :] = 0.0
    return VoltageErrorTable(voltages, rates)


def _voltage_index(table: VoltageErrorTable, voltage: float) -> int:
    v = table.voltages
    if voltage < v[0] - 1e-12 or voltage > v[-1] + 1e-12:
        raise ValueError(
            f"voltage {voltage} outside table grid [{v[0]}, {v[-1]}]"
        )
    # step interpolation: nearest grid voltage not above the query
    return int(np.searchsorted(v, voltage + 1e-12) - 1)


def rate_for(table: VoltageErrorTable, voltage: float, bit: int) -> float:
    """Flip rate of one bit at a supply voltage (step interpolation)."""
    k = _voltage_index(table, voltage)
    b = min(int(bit), table.word_width - 1)  # wider words reuse the top-bit rate
    if bit < 0:
        raise ValueError(f"bit index {bit} negative")
    return float(table.rates[k, b])


def rates_at(table: VoltageErrorTable, voltage: float, width: int | None = None) -> np.ndarray:
    """Per-bit rate vector at a voltage, extended to `width` bits if wider."""
    k = _voltage_index(table, voltage)
    row = table.rates[k]
    if width is not None and width > row.shape[0]:
        row = np.concatenate([row, np.repeat(row[-1], width - row.shape[0])])
    elif width is not None:
        row = row[:width]
    return row


def _per_bit_probs(model, width: int, voltage: float | None) -> np.ndarray:
    if isinstance(model, UniformBerModel):
        return np.full(width, model.ber)
    if isinstance(model, VoltageErrorTable):
        if voltage is None:
            raise ValueError("voltage required for a VoltageErrorTable source")
        return rates_at(model, voltage, width)
    raise TypeError(f"unsupported error model {type(model)!r}")


def sample_mask(model, width: int, rng: RngStream, voltage: float | None = None) -> FlipMask:
    """Sample one flip mask: each bit set independently with its configured rate."""
    p = _per_bit_probs(model, width, voltage)
    u = rng.uniform(width)
    return FlipMask(width, frozenset(int(b) for b in np.flatnonzero(u < p)))


def sample_flip_sites(
    model, n_words: int, width: int, rng: RngStream, voltage: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Sample flip sites over a block of `n_words` accumulator words.

    Returns (word_indices, bit_indices), each flip site drawn independently
    with its per-bit rate — the vectorized equivalent of sampling one
    FlipMask per word. Sparse rates use geometric gap sampling so cost is
    O(#flips), not O(n_words * width).
    """
    p = _per_bit_probs(model, width, voltage)
    gen = rng.generator
    words_out, bits_out = [], []
    for b in np.flatnonzero(p > 0):
        pb = float(p[b])
        if pb >= 1.0:
            hits = np.arange(n_words)
        elif pb > 0.05:
            hits = np.flatnonzero(gen.random(n_words) < pb)
        else:
            # enumerate Bernoulli successes by geometric gaps
            hits = []
            pos = -1
            log1m = math.log1p(-pb)
            while True:
                est = max(16, int((n_words - pos) * pb * 1.5) + 16)
                gaps = np.floor(np.log1p(-gen.random(est)) / log1m).astype(np.int64) + 1
                steps = pos + np.cumsum(gaps)
                inside = steps < n_words
                hits.append(steps[inside])
                if not inside.all():
                    break
                pos = int(steps[-1])
            hits = np.concatenate(hits) if hits else np.empty(0, dtype=np.int64)
        if len(hits):
            words_out.append(np.asarray(hits, dtype=np.int64))
            bits_out.append(np.full(len(hits), b, dtype=np.int64))
    if not words_out:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(words_out), np.concatenate(bits_out)


def apply_mask(word: int, mask: FlipMask, width: int | None = None) -> int:
    """XOR the mask into a two's-complement word of the mask's width."""
    w = mask.word_width if width is None else width
    lo, span = -(1 << (w - 1)), 1 << w
    if not (lo <= word < lo + span):
        raise ValueError(f"word {word} outside {w}-bit two's-complement range")
    u = (word + span) % span  # unsigned view
    u ^= mask.as_int()
    return u - span if u >= (span >> 1) else u


def apply_mask_array(
    acc: np.ndarray, word_idx: np.ndarray, bit_idx: np.ndarray, width: int
) -> None:
    """In-place XOR of flip sites into a flat int64 accumulator array.

    Multiple sites may land in the same word (different bits); their masks
    accumulate by XOR, matching one FlipMask with several bits set.
    """
    if len(word_idx) == 0:
        return
    span = np.int64(1) << width
    half = span >> 1
    uniq, inverse = np.unique(word_idx, return_inverse=True)
    masks = np.zeros(len(uniq), dtype=np.int64)
    np.bitwise_xor.at(masks, inverse, np.int64(1) << bit_idx.astype(np.int64))
    u = (acc[uniq] % span) ^ masks  # two's-complement bit pattern in [0, 2^W)
    acc[uniq] = np.where(u >= half, u - span, u)


def matched_uniform_ber(table: VoltageErrorTable, voltage: float, width: int | None = None) -> float:
    """Uniform BER with the same per-word flip probability as the table at `voltage`.

    Solves 1-(1-ber)^W = 1-prod_b(1-rate_b); equals the mean per-bit rate to
    first order when rates are small.
    """
    p = rates_at(table, voltage, width)
    w = len(p)
    if np.any(p >= 1.0):
        return 1.0
    log_survive = np.sum(np.log1p(-p))
    return float(1.0 - math.exp(log_survive / w))
