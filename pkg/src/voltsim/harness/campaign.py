"""Campaign orchestration: sweeps, ablations, paired error-model runs.

A campaign is a grid of cells (task x protection x error point), each run
for a fixed number of repetitions. Every cell/repetition draws from its own
counter-based stream keyed by the campaign seed and the cell coordinates,
and world seeds depend only on (seed, task, rep), so protections and error
points see identical worlds. Results merge in cell-grid order, which keeps
report bytes independent of the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import multiprocessing
from dataclasses import dataclass, field

from ..agentloop import PROTECTIONS, EpisodeConfig, ModelBundle, run_episode
from ..dvs import VoltagePolicy
from ..errmodel import RngStream, UniformBerModel, default_table, matched_uniform_ber
from ..gridcraft import tasks
from ..tinynn.models import normalize_target
from .stats import diff_interval, spearman, wilson_interval

MODES = ("characterize", "ablation", "policy_search", "overall")

# paper-scale default grids: BER decades for characterization, a 50 mV
# descent for whole-system voltage sweeps
DEFAULT_BER_GRID = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
DEFAULT_VOLTAGE_GRID = (0.90, 0.85, 0.80, 0.75, 0.70, 0.65, 0.60)


class ConfigError(ValueError):
    """Bad campaign or episode configuration (CLI exit code 2)."""


class MissingArtifactError(RuntimeError):
    """A required model/checkpoint is absent (CLI exit code 3)."""


@dataclass(frozen=True)
class CampaignSpec:
    mode: str
    target: str  # planner | controller | both | component:<tags>
    tasks: tuple
    protections: tuple
    error_points: tuple
    error_model: str = "uniform"  # uniform -> BER points, table -> voltages
    repetitions: int = 100
    seed: int = 0
    replan_after: int = 600
    fail_after: int = 12000
    vs_policy: VoltagePolicy | None = None

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "protections", tuple(self.protections))
        object.__setattr__(self, "error_points",
                           tuple(float(p) for p in self.error_points))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.error_model not in ("uniform", "table"):
            raise ConfigError(f"unknown error model {self.error_model!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        unknown = [t for t in self.tasks if t not in tasks()]
        if unknown or not self.tasks:
            raise ConfigError(f"unknown or empty tasks {unknown}")
        bad = set(self.protections) - set(PROTECTIONS)
        if bad:
            raise ConfigError(f"unknown protections {sorted(bad)}")
        if not self.error_points:
            raise ConfigError("need at least one error point")
        if self.error_model == "uniform":
            if any(not 0.0 <= p <= 1.0 for p in self.error_points):
                raise ConfigError("BER points must lie in [0, 1]")
        elif any(p <= 0.0 for p in self.error_points):
            raise ConfigError("voltage points must be positive")
        tgt = self.target
        if tgt.startswith("component:"):
            try:
                normalize_target(tgt.split(":", 1)[1])
            except ValueError as e:
                raise ConfigError(str(e)) from e
        elif tgt not in ("planner", "controller", "both"):
            raise ConfigError(f"unknown target {tgt!r}")
        # weight rotation is a planner-side defense; controller-only
        # campaigns must not request it
        if tgt == "controller" and any("WR" in p for p in self.protections):
            raise ConfigError("WR protections need a planner-side target")
        if ("AD+WR+VS" in self.protections) != (self.vs_policy is not None):
            raise ConfigError("vs_policy is required exactly for AD+WR+VS")

    def to_dict(self) -> dict:
        d = {
            "schema_version": 1,
            "mode": self.mode,
            "target": self.target,
            "tasks": list(self.tasks),
            "protections": list(self.protections),
            "error_points": list(self.error_points),
            "error_model": self.error_model,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "replan_after": self.replan_after,
            "fail_after": self.fail_after,
        }
        if self.vs_policy is not None:
            d["vs_policy"] = self.vs_policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSpec":
        if d.get("schema_version") != 1:
            raise ConfigError("unsupported campaign schema")
        pol = d.get("vs_policy")
        return cls(
            mode=d["mode"], target=d["target"], tasks=tuple(d["tasks"]),
            protections=tuple(d["protections"]),
            error_points=tuple(d["error_points"]),
            error_model=d.get("error_model", "uniform"),
            repetitions=int(d.get("repetitions", 100)),
            seed=int(d.get("seed", 0)),
            replan_after=int(d.get("replan_after", 600)),
            fail_after=int(d.get("fail_after", 12000)),
            vs_policy=VoltagePolicy.from_dict(pol) if pol else None,
        )


@dataclass
class CellResult:
    task: str
    protection: str
    error_param: float
    outcomes: list = field(default_factory=list)   # success flag per rep
    steps: list = field(default_factory=list)      # episode length per rep
    energy_total: float = 0.0
    ops_by_unit: dict = field(default_factory=dict)
    energy_by_unit: dict = field(default_factory=dict)
    flips: int = 0
    clamps: int = 0
    recompute_ops: int = 0

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def successes(self) -> int:
        return sum(self.outcomes)

    def success_rate(self) -> float:
        return self.successes / self.n

    def interval(self) -> tuple:
        return wilson_interval(self.successes, self.n)

    def mean_steps_success(self):
        won = [s for s, ok in zip(self.steps, self.outcomes) if ok]
        return sum(won) / len(won) if won else None

    def v_eff(self, unit: str):
        ops = self.ops_by_unit.get(unit, 0)
        if not ops:
            return None
        return (self.energy_by_unit[unit] / ops) ** 0.5

    def stability_curve(self, stride: int = 20) -> list:
        """Success rate over repetition prefixes; convergence diagnostic."""
        out = []
        for n in range(stride, self.n + 1, stride):
            out.append((n, sum(self.outcomes[:n]) / n))
        if not out or out[-1][0] != self.n:
            out.append((self.n, self.success_rate()))
        return out

    def to_dict(self) -> dict:
        return {
            "task": self.task, "protection": self.protection,
            "error_param": self.error_param,
            "outcomes": [int(o) for o in self.outcomes],
            "steps": self.steps,
            "energy_total": self.energy_total,
            "ops_by_unit": self.ops_by_unit,
            "energy_by_unit": self.energy_by_unit,
            "flips": self.flips, "clamps": self.clamps,
            "recompute_ops": self.recompute_ops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(
            task=d["task"], protection=d["protection"],
            error_param=float(d["error_param"]),
            outcomes=[bool(o) for o in d["outcomes"]],
            steps=[int(s) for s in d["steps"]],
            energy_total=float(d["energy_total"]),
            ops_by_unit={k: int(v) for k, v in d["ops_by_unit"].items()},
            energy_by_unit={k: float(v) for k, v in d["energy_by_unit"].items()},
            flips=int(d["flips"]), clamps=int(d["clamps"]),
            recompute_ops=int(d["recompute_ops"]),
        )


CSV_COLUMNS = ("task", "protection", "error_param", "success_rate",
               "ci_lo", "ci_hi", "mean_steps", "energy_total",
               "v_eff_planner", "v_eff_controller")


@dataclass
class CampaignReport:
    spec: dict
    cells: list
    interval_method: str = "wilson"

    def cell(self, task: str, protection: str, point: float) -> CellResult:
        for c in self.cells:
            if (c.task, c.protection, c.error_param) == (task, protection, float(point)):
                return c
        raise KeyError((task, protection, point))

    def rows(self) -> list:
        rows = []
        for c in self.cells:
            lo, hi = c.interval()
            ms = c.mean_steps_success()
            vp, vc = c.v_eff("planner"), c.v_eff("controller")
            rows.append({
                "task": c.task, "protection": c.protection,
                "error_param": _fmt(c.error_param),
                "success_rate": _fmt(c.success_rate()),
                "ci_lo": _fmt(lo), "ci_hi": _fmt(hi),
                "mean_steps": "" if ms is None else _fmt(ms),
                "energy_total": _fmt(c.energy_total),
                "v_eff_planner": "" if vp is None else _fmt(vp),
                "v_eff_controller": "" if vc is None else _fmt(vc),
            })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "interval_method": self.interval_method,
            "spec": self.spec,
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignReport":
        if d.get("schema_version") != 1:
            raise ConfigError("unsupported report schema")
        return cls(spec=d["spec"],
                   cells=[CellResult.from_dict(c) for c in d["cells"]],
                   interval_method=d.get("interval_method", "wilson"))

    def __eq__(self, other):
        return isinstance(other, CampaignReport) and self.to_dict() == other.to_dict()


def _fmt(x: float) -> str:
    """Shortest stable decimal form; CSV bytes must not depend on workers."""
    return format(float(x), ".12g")


def emit_report(report: CampaignReport, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write(report.to_csv())
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")


# ------------------------------------------------------------- execution

def world_seed_for(seed: int, task: str, rep: int) -> int:
    """Identical across protections and error points, distinct across reps."""
    return int(RngStream(seed, ("world", task, rep)).generator.integers(0, 2**31 - 1))


def _episode_config(spec: CampaignSpec, task: str, protection: str,
                    point: float, world_seed: int) -> EpisodeConfig:
    plan_err = ctrl_err = None
    plan_v = ctrl_v = None
    plan_tgt = ctrl_tgt = "all"
    vs = protection == "AD+WR+VS"
    if spec.error_model == "uniform":
        model = UniformBerModel(point)
    else:
        model = default_table()
    tgt = spec.target
    if tgt in ("planner", "both"):
        plan_err = model
        if spec.error_model == "table":
            plan_v = point
    if tgt in ("controller", "both"):
        ctrl_err = model
        if spec.error_model == "table" and not vs:
            ctrl_v = point
    if tgt.startswith("component:"):
        # component sweeps probe the planner's GEMM site classes
        plan_err = model
        plan_tgt = tgt.split(":", 1)[1]
        if spec.error_model == "table":
            plan_v = point
    return EpisodeConfig(
        task=task, world_seed=world_seed, protection=protection,
        planner_error=plan_err, planner_voltage=plan_v,
        planner_target=plan_tgt,
        controller_error=ctrl_err, controller_voltage=ctrl_v,
        controller_target=ctrl_tgt,
        vs_policy=spec.vs_policy if vs else None,
        replan_after=spec.replan_after, fail_after=spec.fail_after,
    )


def run_cell(spec: CampaignSpec, bundle: ModelBundle, task: str,
             protection: str, point: float) -> CellResult:
    cell = CellResult(task=task, protection=protection, error_param=float(point))
    for rep in range(spec.repetitions):
        ws = world_seed_for(spec.seed, task, rep)
        cfg = _episode_config(spec, task, protection, point, ws)
        rng = RngStream(spec.seed, ("cell", task, protection, repr(point), rep))
        tr = run_episode(cfg, bundle, rng)
        cell.outcomes.append(tr.outcome == "success")
        cell.steps.append(tr.steps)
        cell.energy_total += tr.ledger.energy()
        for unit, tot in tr.ledger.totals().items():
            cell.ops_by_unit[unit] = cell.ops_by_unit.get(unit, 0) + tot["ops"]
            cell.energy_by_unit[unit] = cell.energy_by_unit.get(unit, 0.0) + tot["energy"]
        cell.flips += tr.flips
        cell.clamps += tr.clamps
        cell.recompute_ops += tr.recompute_ops
    return cell


_POOL_STATE: dict = {}


def _pool_init(spec, bundles):
    _POOL_STATE["spec"] = spec
    _POOL_STATE["bundles"] = bundles


def _pool_cell(args):
    task, protection, point = args
    return run_cell(_POOL_STATE["spec"], _POOL_STATE["bundles"][protection],
                    task, protection, point)


def run_campaign(spec: CampaignSpec, bundles: dict,
                 workers: int = 1) -> CampaignReport:
    """Execute the full cell grid; bundles maps protection -> ModelBundle."""
    missing = [p for p in spec.protections if p not in bundles]
    if missing:
        raise MissingArtifactError(
            f"no model bundle for protections {missing}; "
            "build or load the matching checkpoints first")
    grid = [(t, p, pt) for t in spec.tasks for p in spec.protections
            for pt in spec.error_points]
    if workers <= 1 or len(grid) <= 1:
        cells = [run_cell(spec, bundles[p], t, p, pt) for t, p, pt in grid]
    else:
        # grid order in, grid order out: parallelism never reorders cells
        with multiprocessing.Pool(min(workers, len(grid)), _pool_init,
                                  (spec, bundles)) as pool:
            cells = pool.map(_pool_cell, grid)
    return CampaignReport(spec=spec.to_dict(), cells=cells)


# ------------------------------------------- paired error-model campaign

def compare_error_models(spec: CampaignSpec, bundles: dict,
                         workers: int = 1) -> dict:
    """Run a voltage-table sweep and its BER-matched uniform twin.

    spec.error_points are voltages; each one is paired with the uniform BER
    whose per-word flip probability matches the table at that voltage. The
    paired curves share world seeds, so differences are model effects, not
    scenario luck.
    """
    if spec.error_model != "table":
        raise ConfigError("compare_error_models starts from a table spec")
    table_rep = run_campaign(spec, bundles, workers)
    table = default_table()
    matched = tuple(matched_uniform_ber(table, v) for v in spec.error_points)
    uni_spec = CampaignSpec(
        mode=spec.mode, target=spec.target, tasks=spec.tasks,
        protections=spec.protections, error_points=matched,
        error_model="uniform", repetitions=spec.repetitions, seed=spec.seed,
        replan_after=spec.replan_after, fail_after=spec.fail_after,
        vs_policy=spec.vs_policy)
    uni_rep = run_campaign(uni_spec, bundles, workers)

    pairs = []
    curves_t, curves_u = [], []
    for t in spec.tasks:
        for prot in spec.protections:
            ct_curve, cu_curve = [], []
            for v, ber in zip(spec.error_points, matched):
                ct = table_rep.cell(t, prot, v)
                cu = uni_rep.cell(t, prot, ber)
                lo, hi = diff_interval(ct.successes, ct.n, cu.successes, cu.n)
                pairs.append({
                    "task": t, "protection": prot,
                    "voltage": v, "matched_ber": ber,
                    "success_table": ct.success_rate(),
                    "success_uniform": cu.success_rate(),
                    "diff": ct.success_rate() - cu.success_rate(),
                    "diff_ci_lo": lo, "diff_ci_hi": hi,
                })
                ct_curve.append(ct.success_rate())
                cu_curve.append(cu.success_rate())
            curves_t.append(ct_curve)
            curves_u.append(cu_curve)
    # pooled trend agreement: mean success per error point, both models
    n_pts = len(spec.error_points)
    mean_t = [sum(c[i] for c in curves_t) / len(curves_t) for i in range(n_pts)]
    mean_u = [sum(c[i] for c in curves_u) / len(curves_u) for i in range(n_pts)]
    rho = spearman(mean_t, mean_u) if n_pts >= 2 else float("nan")
    return {
        "schema_version": 1,
        "pairs": pairs,
        "rank_correlation": rho,
        "table_report": table_rep.to_dict(),
        "uniform_report": uni_rep.to_dict(),
    }
