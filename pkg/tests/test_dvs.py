"""Entropy, LDO grid, voltage policies, and the energy ledger."""
import json
import math

import numpy as np
import pytest
import scipy.stats

from voltsim.dvs import (
    NOMINAL_VOLTAGE,
    UNITS,
    EnergyLedger,
    LdoModel,
    LedgerError,
    VoltagePolicy,
    constant_policy,
    effective_voltage,
    entropy,
    load_policy,
    save_policy,
    select_voltage,
)
from voltsim.errmodel import RngStream


# ---------------------------------------------------------------- entropy

def test_entropy_uniform_hits_log_n():
    assert entropy(np.zeros(9)) == pytest.approx(math.log(9), abs=1e-12)
    assert entropy(np.zeros(8), base="bits") == pytest.approx(3.0, abs=1e-12)


def test_entropy_matches_scipy_oracle():
    rng = RngStream(404, ("dvs-entropy",)).generator
    for _ in range(50):
        z = rng.normal(0.0, 3.0, size=9)
        zs = z - z.max()
        p = np.exp(zs) / np.exp(zs).sum()
        assert entropy(z) == pytest.approx(float(scipy.stats.entropy(p)), abs=1e-10)


def test_entropy_shift_invariant_and_bounded():
    rng = RngStream(405, ("dvs-shift",)).generator
    for _ in range(20):
        z = rng.normal(0.0, 5.0, size=9)
        assert entropy(z) == pytest.approx(entropy(z + 123.0), abs=1e-9)
        assert 0.0 <= entropy(z) <= math.log(9) + 1e-12


def test_entropy_peaked_is_plus_zero():
    # a saturated softmax must give +0.0, not -0.0
    h = entropy(np.array([800.0, 0.0, 0.0]))
    assert h == 0.0 and math.copysign(1.0, h) == 1.0


def test_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        entropy(np.array([1.0]))
    with pytest.raises(ValueError):
        entropy(np.array([1.0, np.inf]))
    with pytest.raises(ValueError):
        entropy(np.zeros(4), base="dits")


# ---------------------------------------------------------------- LDO

def test_ldo_grid_has_31_points():
    ldo = LdoModel()
    grid = ldo.grid()
    assert len(grid) == 31
    assert grid[0] == 0.60 and grid[-1] == 0.90
    assert all(ldo.on_grid(v) for v in grid)


def test_ldo_snap_nearest_and_clamped():
    ldo = LdoModel()
    assert ldo.snap(0.846) == pytest.approx(0.85)
    assert ldo.snap(0.843) == pytest.approx(0.84)
    assert ldo.snap(0.55) == pytest.approx(0.60)
    assert ldo.snap(1.20) == pytest.approx(0.90)
    assert ldo.snap(0.70) == pytest.approx(0.70)


def test_ldo_snap_property_sweep():
    ldo = LdoModel()
    rng = RngStream(406, ("dvs-snap",)).generator
    for v in rng.uniform(0.5, 1.0, size=200):
        s = ldo.snap(float(v))
        assert ldo.on_grid(s)
        clamped = min(max(float(v), 0.60), 0.90)
        assert abs(s - clamped) <= 0.005 + 1e-9


def test_ldo_latency():
    ldo = LdoModel()
    assert ldo.latency_ns(0.90, 0.90) == 0.0
    assert ldo.latency_ns(0.90, 0.85) == 90.0   # 50 mV, one slew step
    assert ldo.latency_ns(0.90, 0.80) == 180.0  # 100 mV
    assert ldo.latency_ns(0.90, 0.84) == 180.0  # 60 mV rounds up
    assert ldo.latency_ns(0.60, 0.90) == 540.0
    assert ldo.latency_ns(0.90, 0.60) == ldo.max_latency_ns


def test_ldo_latency_never_exceeds_budget():
    ldo = LdoModel()
    grid = ldo.grid()
    worst = max(ldo.latency_ns(a, b) for a in grid for b in grid)
    assert worst == ldo.max_latency_ns


# ---------------------------------------------------------------- policies

def test_policy_validation():
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.9, 0.8), thresholds=(1.0, 2.0))  # ascending
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.9, 0.8, 0.7), thresholds=(2.0, 2.0))
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.8, 0.9), thresholds=(2.0,))  # increasing V
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.9, 0.815), thresholds=(2.0,))  # off grid
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.9,), update_interval=0)
    with pytest.raises(ValueError):
        VoltagePolicy(voltages=(0.9, 0.8), thresholds=())  # length mismatch


def test_policy_band_lookup():
    pol = VoltagePolicy(voltages=(0.9, 0.8, 0.7), thresholds=(2.0, 1.0))
    assert pol.voltage_for(0.5) == 0.9
    assert pol.voltage_for(1.0) == 0.8   # boundary clears the threshold
    assert pol.voltage_for(1.7) == 0.8
    assert pol.voltage_for(2.0) == 0.7
    assert pol.voltage_for(9.9) == 0.7
    # monotone: higher entropy never raises the voltage
    hs = np.linspace(0.0, 3.0, 61)
    vs = [pol.voltage_for(float(h)) for h in hs]
    assert all(a >= b for a, b in zip(vs, vs[1:]))


def test_policy_json_roundtrip(tmp_path):
    pol = VoltagePolicy(voltages=(0.9, 0.8), thresholds=(2.0,),
                        update_interval=5, name="demo")
    path = tmp_path / "pol.json"
    save_policy(path, pol)
    d = json.loads(path.read_text())
    assert d["schema_version"] == 1 and d["kind"] == "step_map"
    assert load_policy(path) == pol


def test_constant_policy():
    pol = constant_policy(0.85)
    assert pol.kind == "constant"
    for h in (0.0, 1.0, 5.0):
        assert pol.voltage_for(h) == 0.85


def test_select_voltage_interval_gating():
    pol = VoltagePolicy(voltages=(0.9, 0.8), thresholds=(2.0,), update_interval=5)
    ldo = LdoModel()
    # step 0 recomputes: entropy 2.5 crosses the threshold, 0.9 -> 0.8
    v, lat = select_voltage(pol, 2.5, ldo, 0, 0.9)
    assert v == 0.8 and lat == 180.0
    # steps 1..4 hold whatever is current, no latency
    for s in (1, 2, 3, 4):
        assert select_voltage(pol, 0.0, ldo, s, v) == (0.8, 0.0)
    # step 5 recomputes; same target means no switch cost
    assert select_voltage(pol, 2.5, ldo, 5, 0.8) == (0.8, 0.0)
    v, lat = select_voltage(pol, 0.1, ldo, 5, 0.8)
    assert v == 0.9 and lat == 180.0


def test_select_voltage_interval_one_updates_every_step():
    pol = VoltagePolicy(voltages=(0.9, 0.8), thresholds=(2.0,), update_interval=1)
    ldo = LdoModel()
    for s in range(4):
        v, _ = select_voltage(pol, 2.5, ldo, s, 0.9)
        assert v == 0.8


# ---------------------------------------------------------------- ledger

def test_ledger_add_validation():
    led = EnergyLedger()
    with pytest.raises(LedgerError):
        led.add(0, "gpu", 10, 0.9)
    with pytest.raises(LedgerError):
        led.add(0, "planner", -1, 0.9)
    with pytest.raises(LedgerError):
        led.add(0, "planner", 10, 0.0)
    with pytest.raises(LedgerError):
        led.add(0, "predictor", 10, 0.8)  # predictor runs at nominal only
    led.add(0, "planner", 0, 0.9)  # zero ops: dropped, not an error
    assert led.entries == []


def test_ledger_energy_identity():
    led = EnergyLedger(kappa=2.5)
    rng = RngStream(407, ("dvs-ledger",)).generator
    grid = LdoModel().grid()
    for step in range(300):
        unit = UNITS[int(rng.integers(0, 2))]
        ops = int(rng.integers(1, 10_000))
        v = grid[int(rng.integers(0, len(grid)))]
        led.add(step, unit, ops, v)
    led.add(0, "predictor", 83_120, NOMINAL_VOLTAGE)
    per_entry = sum(2.5 * ops * v * v for _, _, ops, v in led.entries)
    assert led.energy() == pytest.approx(per_entry, rel=1e-12)
    assert led.energy() == pytest.approx(
        sum(led.energy(u) for u in UNITS), rel=1e-12)
    tot = led.totals()
    assert sum(t["ops"] for t in tot.values()) == led.ops()


def test_effective_voltage_two_level_example():
    # equal op counts at 0.9 V and 0.7 V: v_eff = sqrt((0.81 + 0.49) / 2)
    led = EnergyLedger()
    led.add(0, "controller", 5000, 0.9)
    led.add(1, "controller", 5000, 0.7)
    want = math.sqrt(0.65)
    assert effective_voltage(led, "controller") == pytest.approx(want, abs=1e-12)
    assert led.effective_voltage("controller") == pytest.approx(0.806225774829855,
                                                                abs=1e-12)


def test_effective_voltage_requires_entries():
    with pytest.raises(LedgerError):
        EnergyLedger().effective_voltage("planner")


def test_effective_voltage_energy_equivalence():
    # replaying the same ops at v_eff reproduces the energy exactly
    led = EnergyLedger()
    rng = RngStream(408, ("dvs-veff",)).generator
    for step in range(100):
        led.add(step, "controller", int(rng.integers(1, 500)),
                float(LdoModel().grid()[int(rng.integers(0, 31))]))
    ve = led.effective_voltage("controller")
    assert led.kappa * led.ops("controller") * ve * ve == pytest.approx(
        led.energy("controller"), rel=1e-12)


def test_ledger_merge():
    a = EnergyLedger()
    a.add(0, "planner", 100, 0.9)
    b = EnergyLedger()
    b.add(5, "controller", 200, 0.8)
    m = a.merge(b)
    assert m.ops() == 300
    assert m.energy() == pytest.approx(a.energy() + b.energy(), rel=1e-12)
    with pytest.raises(LedgerError):
        a.merge(EnergyLedger(kappa=3.0))
    with pytest.raises(LedgerError):
        a.merge(EnergyLedger(nominal_voltage=0.85))


def test_nominal_constants():
    assert NOMINAL_VOLTAGE == 0.90
    assert UNITS == ("planner", "controller", "predictor")
