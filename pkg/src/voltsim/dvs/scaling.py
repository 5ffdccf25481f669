"""Action entropy, voltage policies, the LDO grid, and the energy ledger.

Voltage snapping and latency use integer-millivolt arithmetic so grid
membership is exact and never drifts through float rounding. Energy follows
the quadratic model E = kappa * ops * V^2; kappa only sets the unit, so every
reported figure of merit is a ratio or an effective voltage.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..tinynn import ops as nnops

NOMINAL_VOLTAGE = 0.90

UNITS = ("planner", "controller", "predictor")


def entropy(logits, base: str = "nats") -> float:
    """Shannon entropy of softmax(logits); 0 <= H <= log(n)."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValueError("entropy needs at least two logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    p = nnops.softmax(z)
    nz = p[p > 0.0]
    h = max(float(-np.sum(nz * np.log(nz))), 0.0) + 0.0  # never -0.0
    if base == "bits":
        return h / math.log(2.0)
    if base != "nats":
        raise ValueError(f"unknown entropy base {base!r}")
    return h


# ---------------------------------------------------------------- LDO model

@dataclass(frozen=True)
class LdoModel:
    """Regulator grid: 0.60-0.90 V in 10 mV steps, 90 ns per 50 mV slewed."""

    v_min: float = 0.60
    v_max: float = 0.90
    step_mv: int = 10
    ns_per_50mv: float = 90.0
    max_latency_ns: float = 540.0

    def _mv(self, voltage: float) -> int:
        return int(round(voltage * 1000.0))

    def snap(self, voltage: float) -> float:
        """Nearest grid voltage, clamped into [v_min, v_max]."""
        lo, hi = self._mv(self.v_min), self._mv(self.v_max)
        raw = min(max(voltage * 1000.0, float(lo)), float(hi))
        mv = lo + int(round((raw - lo) / self.step_mv)) * self.step_mv
        return min(mv, hi) / 1000.0

    def on_grid(self, voltage: float) -> bool:
        return self._mv(voltage) == self._mv(self.snap(voltage))

    def grid(self) -> list:
        lo, hi = self._mv(self.v_min), self._mv(self.v_max)
        return [mv / 1000.0 for mv in range(lo, hi + 1, self.step_mv)]

    def latency_ns(self, v_from: float, v_to: float) -> float:
        dmv = abs(self._mv(v_to) - self._mv(v_from))
        return math.ceil(dmv / 50.0) * self.ns_per_50mv


# ---------------------------------------------------------------- policies

@dataclass(frozen=True)
class VoltagePolicy:
    """Entropy-to-voltage map.

    thresholds are strictly descending; voltages has one more entry and is
    non-increasing, so higher entropy always maps to an equal-or-lower
    voltage. A constant policy is the empty-threshold special case.
    """

    voltages: tuple
    thresholds: tuple = ()
    update_interval: int = 5
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "voltages", tuple(float(v) for v in self.voltages))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if len(self.voltages) != len(self.thresholds) + 1:
            raise ValueError("need exactly one voltage per entropy band")
        if any(t1 <= t2 for t1, t2 in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly descending")
        if any(v1 < v2 for v1, v2 in zip(self.voltages, self.voltages[1:])):
            raise ValueError("voltages must not increase with entropy")
        ldo = LdoModel()
        off = [v for v in self.voltages if not ldo.on_grid(v)]
        if off:
            raise ValueError(f"voltages off the LDO grid: {off}")

    @property
    def kind(self) -> str:
        return "constant" if not self.thresholds else "step_map"

    def voltage_for(self, entropy_value: float) -> float:
        # thresholds are descending: count how many the entropy clears
        j = sum(1 for t in self.thresholds if entropy_value >= t)
        return self.voltages[j]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": self.kind,
            "name": self.name,
            "thresholds": list(self.thresholds),
            "voltages": list(self.voltages),
            "update_interval": self.update_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoltagePolicy":
        if d.get("schema_version") != 1:
            raise ValueError("unsupported policy schema")
        return cls(
            voltages=tuple(d["voltages"]),
            thresholds=tuple(d.get("thresholds", ())),
            update_interval=int(d.get("update_interval", 5)),
            name=d.get("name", ""),
        )


def constant_policy(voltage: float, update_interval: int = 5,
                    name: str = "") -> VoltagePolicy:
    return VoltagePolicy(voltages=(voltage,), update_interval=update_interval,
                         name=name or f"const-{voltage:.2f}")


def save_policy(path, policy: VoltagePolicy) -> None:
    with open(path, "w") as f:
        json.dump(policy.to_dict(), f, indent=2)
        f.write("\n")


def load_policy(path) -> VoltagePolicy:
    with open(path) as f:
        return VoltagePolicy.from_dict(json.load(f))


def select_voltage(policy: VoltagePolicy, predicted_entropy: float,
                   ldo: LdoModel, step_index: int,
                   current_voltage: float):
    """(voltage, switch latency ns); recomputes only on update steps."""
    if step_index % policy.update_interval:
        return current_voltage, 0.0
    v = ldo.snap(policy.voltage_for(predicted_entropy))
    if ldo._mv(v) == ldo._mv(current_voltage):
        return v, 0.0
    return v, ldo.latency_ns(current_voltage, v)


# ---------------------------------------------------------------- ledger

class LedgerError(ValueError):
    pass


@dataclass
class EnergyLedger:
    """Per-episode energy account: entries of (step, unit, ops, voltage).

    Entry energy is kappa * ops * V^2. The predictor always runs at nominal
    voltage; add() enforces that invariant at write time.
    """

    kappa: float = 1.0
    nominal_voltage: float = NOMINAL_VOLTAGE
    entries: list = field(default_factory=list)

    def add(self, step: int, unit: str, ops: int, voltage: float) -> None:
        if unit not in UNITS:
            raise LedgerError(f"unknown unit {unit!r}")
        if ops < 0:
            raise LedgerError("ops must be non-negative")
        if not voltage > 0:
            raise LedgerError("voltage must be positive")
        if unit == "predictor" and abs(voltage - self.nominal_voltage) > 1e-12:
            raise LedgerError("predictor entries must be at nominal voltage")
        if ops:
            self.entries.append((int(step), unit, int(ops), float(voltage)))

    def _select(self, unit):
        if unit is None:
            return self.entries
        if unit not in UNITS:
            raise LedgerError(f"unknown unit {unit!r}")
        return [e for e in self.entries if e[1] == unit]

    def ops(self, unit=None) -> int:
        return sum(e[2] for e in self._select(unit))

    def energy(self, unit=None) -> float:
        return self.kappa * sum(e[2] * e[3] * e[3] for e in self._select(unit))

    def effective_voltage(self, unit: str) -> float:
        rows = self._select(unit)
        if not rows:
            raise LedgerError(f"no ledger entries for unit {unit!r}")
        total_ops = sum(e[2] for e in rows)
        return math.sqrt(sum(e[2] * e[3] * e[3] for e in rows) / total_ops)

    def totals(self) -> dict:
        out = {}
        for unit in UNITS:
            rows = self._select(unit)
            if rows:
                out[unit] = {
                    "ops": sum(e[2] for e in rows),
                    "energy": self.kappa * sum(e[2] * e[3] * e[3] for e in rows),
                }
        return out

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        """Associative campaign-level combination; constants must agree."""
        if (self.kappa, self.nominal_voltage) != (other.kappa, other.nominal_voltage):
            raise LedgerError("cannot merge ledgers with different constants")
        return EnergyLedger(self.kappa, self.nominal_voltage,
                            self.entries + other.entries)


def effective_voltage(ledger: EnergyLedger, unit: str) -> float:
    """Constant voltage with the same total energy for the unit's ops."""
    return ledger.effective_voltage(unit)
