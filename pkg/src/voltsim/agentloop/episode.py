"""Episode execution: plan, act, replan, hard-fail, and energy accounting.

One episode owns its world, RNG streams, fault counters, and ledger, so
campaigns can run many in parallel with no shared state. All failure modes
are trace outcomes, never exceptions; exceptions mean the configuration
itself is inconsistent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..dvs.scaling import (
    NOMINAL_VOLTAGE,
    EnergyLedger,
    LdoModel,
    VoltagePolicy,
    entropy,
    select_voltage,
)
from ..errmodel import RngStream, VoltageErrorTable
from ..gridcraft import (
    generate_world,
    observe,
    parse_subtask,
    prompt_embedding,
    step,
    tasks,
)
from ..qgemm import AnomalyBound, GemmFaultConfig
from ..tinynn import ControllerModel, PlannerModel, RunContext
from ..tinynn.ops import softmax
from .planning import PlanStats, plan
from .vocab import Vocab, satisfied_prefix

PROTECTIONS = ("none", "AD", "AD+WR", "AD+WR+VS", "DMR")

# sites the calibration never saw fall back to a bound that cannot clamp
_NEVER_CLAMP = AnomalyBound("calibrated", 1e300)


@dataclass(frozen=True)
class EpisodeConfig:
    task: str
    world_seed: int
    protection: str = "none"
    planner_error: object = None  # UniformBerModel | VoltageErrorTable | None
    planner_voltage: float | None = None
    planner_target: object = "all"
    controller_error: object = None
    controller_voltage: float | None = None
    controller_target: object = "all"
    vs_policy: VoltagePolicy | None = None
    replan_after: int = 600
    fail_after: int = 12000
    forced_plan: tuple | None = None
    kappa: float = 1.0
    nominal_voltage: float = NOMINAL_VOLTAGE

    def __post_init__(self):
        if self.task not in tasks():
            raise ValueError(f"unknown task {self.task!r}")
        if self.protection not in PROTECTIONS:
            raise ValueError(f"unknown protection {self.protection!r}")
        if self.replan_after < 1 or self.fail_after < 1:
            raise ValueError("step limits must be positive")
        if self.replan_after > self.fail_after:
            raise ValueError("replan_after must not exceed fail_after")
        has_vs = self.protection == "AD+WR+VS"
        if (self.vs_policy is not None) != has_vs:
            raise ValueError("vs_policy is required exactly for AD+WR+VS")
        if has_vs and self.controller_voltage is not None:
            raise ValueError("the VS policy owns the controller voltage")
        if isinstance(self.planner_error, VoltageErrorTable) \
                and self.planner_voltage is None:
            raise ValueError("planner voltage table needs planner_voltage")
        if isinstance(self.controller_error, VoltageErrorTable) \
                and self.controller_voltage is None and not has_vs:
            raise ValueError("controller voltage table needs controller_voltage")
        if self.forced_plan is not None:
            object.__setattr__(self, "forced_plan",
                               tuple(str(u) for u in self.forced_plan))
        if not (self.kappa > 0 and self.nominal_voltage > 0):
            raise ValueError("kappa and nominal_voltage must be positive")


@dataclass
class ModelBundle:
    planner: PlannerModel
    controller: ControllerModel
    vocab: Vocab
    predictor: object = None
    ldo: LdoModel = field(default_factory=LdoModel)


@dataclass
class EpisodeTrace:
    task: str
    world_seed: int
    protection: str
    outcome: str  # {"success", "fail"}
    steps: int
    records: list
    replan_steps: list
    flips: int
    clamps: int
    recompute_ops: int
    switch_latency_ns: float
    ledger: EnergyLedger

    def summary(self) -> dict:
        led = self.ledger
        v_eff = {}
        for unit in ("planner", "controller", "predictor"):
            try:
                v_eff[unit] = led.effective_voltage(unit)
            except Exception:
                pass
        return {
            "schema_version": 1,
            "task": self.task,
            "world_seed": self.world_seed,
            "protection": self.protection,
            "outcome": self.outcome,
            "steps": self.steps,
            "replan_steps": list(self.replan_steps),
            "flips": self.flips,
            "clamps": self.clamps,
            "recompute_ops": self.recompute_ops,
            "switch_latency_ns": self.switch_latency_ns,
            "energy_total": led.energy(),
            "energy_by_unit": led.totals(),
            "effective_voltage": v_eff,
        }


def save_trace(trace: EpisodeTrace, records_path, summary_path) -> None:
    """Newline-delimited JSON step records plus one summary JSON."""
    with open(records_path, "w") as f:
        for rec in trace.records:
            f.write(json.dumps(rec) + "\n")
    with open(summary_path, "w") as f:
        json.dump(trace.summary(), f, indent=2)
        f.write("\n")


def _make_fault_cfg(error_source, voltage, ad: bool) -> GemmFaultConfig | None:
    if error_source is None:
        return None
    return GemmFaultConfig(
        error_source=error_source,
        voltage=voltage,
        ad_enabled=ad,
        bound=_NEVER_CLAMP if ad else None,
    )


def run_episode(cfg: EpisodeConfig, models: ModelBundle,
                rng: RngStream, frame_sink=None) -> EpisodeTrace:
    """Execute one episode; every run-time failure is a trace outcome.

    frame_sink, when given, receives (step, observation, prompt_embedding,
    entropy_true, action, subtask_uid) per controller step; the entropy
    dataset builder taps episodes through it without altering their course.
    """
    ad = cfg.protection in ("AD", "AD+WR", "AD+WR+VS")
    dmr = cfg.protection == "DMR"
    vs = cfg.protection == "AD+WR+VS"

    if "WR" in cfg.protection and not models.planner.flags.get("rotated"):
        raise ValueError("WR protection requires a rotated planner checkpoint")
    if ad and cfg.planner_error is not None and not models.planner.bounds:
        raise ValueError("AD on the planner requires calibrated bounds")
    if ad and cfg.controller_error is not None and not models.controller.bounds:
        raise ValueError("AD on the controller requires calibrated bounds")
    if vs and models.predictor is None:
        raise ValueError("VS protection requires an entropy predictor")

    task = tasks()[cfg.task]
    world = generate_world(cfg.world_seed)
    ledger = EnergyLedger(cfg.kappa, cfg.nominal_voltage)
    plan_cfg = _make_fault_cfg(cfg.planner_error, cfg.planner_voltage, ad)
    # under VS the policy sets the real voltage before the first forward
    ctrl_init_v = cfg.nominal_voltage if vs and cfg.controller_voltage is None \
        else cfg.controller_voltage
    ctrl_cfg = _make_fault_cfg(cfg.controller_error, ctrl_init_v, ad)
    planner_v = cfg.planner_voltage if cfg.planner_voltage is not None \
        else cfg.nominal_voltage

    plan_count = 0
    recompute_ops = 0

    def invoke_planner(at_step: int) -> list:
        nonlocal plan_count, recompute_ops
        if cfg.forced_plan is not None:
            uids = list(cfg.forced_plan)
        else:
            stats = PlanStats()
            uids = plan(
                models.planner, models.vocab, cfg.task,
                satisfied_prefix(cfg.task, world.inventory),
                fault_cfg=plan_cfg, target=cfg.planner_target,
                rng=rng.child("plan", plan_count), dmr=dmr, stats=stats,
            )
            ledger.add(at_step, "planner", stats.macs_active, planner_v)
            ledger.add(at_step, "planner", stats.macs_recompute,
                       cfg.nominal_voltage)
            recompute_ops += stats.macs_recompute
        plan_count += 1
        return [parse_subtask(u) for u in uids]

    records: list = []
    replans: list = []
    switch_latency = 0.0
    cur_v = cfg.nominal_voltage if vs \
        else (cfg.controller_voltage if cfg.controller_voltage is not None
              else cfg.nominal_voltage)
    last_pred = None
    prev_energy = 0.0
    prev_flips = 0
    prev_clamps = 0

    idle = parse_subtask("idle")
    queue = invoke_planner(0)
    qpos = 0
    active = None
    window = 0
    t = 0
    outcome = None

    def counter_totals():
        flips = clamps = 0
        for c in (plan_cfg, ctrl_cfg):
            if c is not None:
                flips += c.flip_counter
                clamps += c.anomaly_counter
        return flips, clamps

    while True:
        if task.goal(world.inventory):
            outcome = "success"
            break
        if t >= cfg.fail_after:
            outcome = "fail"
            break
        # completed entries cost nothing; the first open one is active
        while qpos < len(queue) and queue[qpos].goal(world.inventory):
            qpos += 1
        nxt = queue[qpos] if qpos < len(queue) else idle
        if nxt is not active:
            active = nxt
            window = 0
        world.active_subtask = active

        obs = observe(world, active)
        pe = prompt_embedding(active.uid)
        if vs and t % cfg.vs_policy.update_interval == 0:
            last_pred = models.predictor.predict(obs, pe)
            ledger.add(t, "predictor", models.predictor.macs,
                       cfg.nominal_voltage)
            cur_v, lat = select_voltage(cfg.vs_policy, last_pred, models.ldo,
                                        t, cur_v)
            switch_latency += lat
        if ctrl_cfg is not None and isinstance(cfg.controller_error,
                                               VoltageErrorTable):
            ctrl_cfg.voltage = cur_v

        run = RunContext(
            fault_cfg=ctrl_cfg, target=cfg.controller_target,
            rng=rng.child("ctrl", t), bounds=models.controller.bounds,
            dmr=dmr,
        )
        logits = models.controller.q_forward(obs, pe, run)
        h_true = entropy(logits)
        p = softmax(logits)
        u = float(rng.child("act", t).uniform())
        action = int(np.searchsorted(np.cumsum(p), u)
                     .clip(0, models.controller.n_actions - 1))
        if frame_sink is not None:
            frame_sink(t, obs, pe, h_true, action, active.uid)
        world, _, _ = step(world, action)

        ledger.add(t, "controller", run.macs_active, cur_v)
        ledger.add(t, "controller", run.macs_recompute, cfg.nominal_voltage)
        recompute_ops += run.macs_recompute

        flips, clamps = counter_totals()
        energy = ledger.energy()
        records.append({
            "step": t,
            "subtask": active.uid,
            "entropy_true": h_true,
            "entropy_pred": last_pred,
            "voltage": cur_v,
            "action": action,
            "flips": flips - prev_flips,
            "clamps": clamps - prev_clamps,
            "energy": energy - prev_energy,
        })
        prev_flips, prev_clamps, prev_energy = flips, clamps, energy
        t += 1
        window += 1

        if active.goal(world.inventory):
            continue  # completion outranks the replan window
        if window >= cfg.replan_after and t < cfg.fail_after \
                and not task.goal(world.inventory):
            queue = invoke_planner(t)
            qpos = 0
            active = None
            replans.append(t)

    flips, clamps = counter_totals()
    return EpisodeTrace(
        task=cfg.task,
        world_seed=cfg.world_seed,
        protection=cfg.protection,
        outcome=outcome,
        steps=t,
        records=records,
        replan_steps=replans,
        flips=flips,
        clamps=clamps,
        recompute_ops=recompute_ops,
        switch_latency_ns=switch_latency,
        ledger=ledger,
    )
