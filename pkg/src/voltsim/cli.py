"""Command line interface.

Every subcommand is a thin wrapper over the library: it parses arguments,
loads checkpoints, calls one entry point, and writes the declared outputs.
Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


def _load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _load_model(path):
    from .tinynn import load_checkpoint

    return load_checkpoint(path)


def _error_source(spec):
    from .errmodel import UniformBerModel, VoltageErrorTable, default_table

    if spec is None:
        return None
    if spec.get("kind") == "uniform":
        return UniformBerModel(float(spec["ber"]))
    if spec.get("kind") == "table":
        if "path" in spec:
            return VoltageErrorTable.load(spec["path"])
        return default_table()
    raise ValueError(f"unknown error source {spec!r}")


def _bundle(planner_path, controller_path, predictor_path=None):
    from .agentloop import ModelBundle, Vocab

    return ModelBundle(
        planner=_load_model(planner_path),
        controller=_load_model(controller_path),
        vocab=Vocab(),
        predictor=_load_model(predictor_path) if predictor_path else None,
    )


# ---------------------------------------------------------- subcommands

def cmd_gen_world(args) -> int:
    from .gridcraft import generate_world, rollout_expert, write_trace_bin

    world = generate_world(args.seed)
    out = {
        "schema_version": 1,
        "seed": args.seed,
        "height": world.height,
        "width": world.width,
        "agent_pos": list(world.agent_pos),
        "facing": world.facing,
        "tiles": world.tiles.tolist(),
    }
    if args.task:
        records, final = rollout_expert(args.task, args.seed)
        out["expert_task"] = args.task
        out["expert_steps"] = len(records)
        if args.trace:
            write_trace_bin(args.trace, records)
    with open(args.out, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")
    print(f"world seed={args.seed} written to {args.out}")
    return 0


def cmd_train_planner(args) -> int:
    from .agentloop import Vocab, train_planner
    from .tinynn import save_checkpoint

    planner = train_planner(Vocab(), seed=args.seed)
    save_checkpoint(args.out, planner)
    print(f"planner saved to {args.out}")
    return 0


def cmd_plant_outliers(args) -> int:
    from .agentloop import Vocab, plant_outliers, select_plant_channel
    from .tinynn import save_checkpoint

    planner = _load_model(args.planner)
    vocab = Vocab()
    channel = args.channel
    if channel is None:
        channel = select_plant_channel(planner, alpha=args.alpha, vocab=vocab)
    planted = plant_outliers(planner, channel, args.alpha, vocab=vocab)
    save_checkpoint(args.out, planted)
    print(f"planted channel={channel} alpha={args.alpha} -> {args.out}")
    return 0


def cmd_fold(args) -> int:
    from .rotnet import apply_rotation, fold_norm_gains, make_plan
    from .tinynn import save_checkpoint

    model = _load_model(args.model)
    folded = fold_norm_gains(model)
    rotated = apply_rotation(folded, make_plan(folded))
    rotated.bounds = {}  # stale calibration does not survive a basis change
    save_checkpoint(args.out, rotated)
    print(f"rotated model -> {args.out} (bounds cleared; recalibrate)")
    return 0


def cmd_train_controller(args) -> int:
    from .agentloop import train_controller
    from .tinynn import save_checkpoint

    controller = train_controller(seed=args.seed)
    save_checkpoint(args.out, controller)
    print(f"controller saved to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    from .agentloop import Vocab, plan_cases, plan_prompt
    from .errmodel import RngStream
    from .gridcraft import collect_demos, prompt_embedding, task_names
    from .tinynn import calibrate_model, save_checkpoint

    model = _load_model(args.model)
    if model.kind == "planner":
        vocab = Vocab()
        inputs = [plan_prompt(vocab, name, sat)
                  for name, sat, _ in plan_cases()]
    elif model.kind == "controller":
        gen = RngStream(args.seed, ("calib-seeds",)).generator
        seeds = [int(s) for s in gen.integers(0, 2**31 - 1, size=2)]
        demos = collect_demos(task_names()[:3], seeds)
        inputs = [(d[0].astype(np.float64) / 255.0, prompt_embedding(d[1]))
                  for d in demos[::5]]
    else:
        raise ValueError(f"no calibration recipe for kind {model.kind!r}")
    bounds = calibrate_model(model, inputs, margin=args.margin)
    save_checkpoint(args.out, model)
    print(f"calibrated {len(bounds)} sites -> {args.out}")
    return 0


def cmd_build_entropy_dataset(args) -> int:
    from .dvs import build_entropy_dataset, phase_separation, save_entropy_dataset
    from .gridcraft import task_names

    bundle = _bundle(args.planner, args.controller)
    ds = build_entropy_dataset(bundle, task_names(), n_frames=args.frames,
                               seed=args.seed)
    save_entropy_dataset(args.out, ds)
    sep = phase_separation(ds)
    print(f"{len(ds['entropy'])} frames -> {args.out}; "
          f"navigation/interaction KS={sep['ks']:.3f}")
    return 0


def cmd_train_predictor(args) -> int:
    from .dvs import load_entropy_dataset, train_predictor
    from .tinynn import save_checkpoint

    ds = load_entropy_dataset(args.dataset)
    model, metrics = train_predictor(ds, seed=args.seed, epochs=args.epochs,
                                     batch_size=args.batch_size,
                                     learning_rate=args.learning_rate,
                                     weight_decay=args.weight_decay)
    save_checkpoint(args.out, model)
    if args.metrics:
        with open(args.metrics, "w") as f:
            json.dump({"schema_version": 1, **metrics}, f, indent=2)
            f.write("\n")
    print(f"predictor -> {args.out}; held-out mse={metrics['mse']:.4g} "
          f"r2={metrics['r2']:.4f}")
    return 0


def cmd_run_episode(args) -> int:
    from .agentloop import EpisodeConfig, run_episode, save_trace
    from .dvs import load_policy
    from .errmodel import RngStream

    cfg_raw = _load_json(args.config)
    if cfg_raw.get("schema_version") != 1:
        raise ValueError("episode config needs schema_version 1")
    bundle = _bundle(cfg_raw["planner"], cfg_raw["controller"],
                     cfg_raw.get("predictor"))
    policy = None
    if cfg_raw.get("vs_policy"):
        policy = load_policy(cfg_raw["vs_policy"])
    cfg = EpisodeConfig(
        task=cfg_raw["task"],
        world_seed=int(cfg_raw["world_seed"]),
        protection=cfg_raw.get("protection", "none"),
        planner_error=_error_source(cfg_raw.get("planner_error")),
        planner_voltage=cfg_raw.get("planner_voltage"),
        planner_target=cfg_raw.get("planner_target", "all"),
        controller_error=_error_source(cfg_raw.get("controller_error")),
        controller_voltage=cfg_raw.get("controller_voltage"),
        controller_target=cfg_raw.get("controller_target", "all"),
        vs_policy=policy,
        replan_after=cfg_raw.get("replan_after", 600),
        fail_after=cfg_raw.get("fail_after", 12000),
    )
    trace = run_episode(cfg, bundle, RngStream(args.seed, ("episode",)))
    save_trace(trace, args.records, args.summary)
    print(f"{cfg.task}: {trace.outcome} in {len(trace.records)} steps")
    return 0


def _load_bundles(path) -> dict:
    raw = _load_json(path)
    if raw.get("schema_version") != 1:
        raise ValueError("bundle map needs schema_version 1")
    out = {}
    for protection, paths in raw["bundles"].items():
        out[protection] = _bundle(paths["planner"], paths["controller"],
                                  paths.get("predictor"))
    return out


def cmd_campaign(args) -> int:
    from .harness import CampaignSpec, emit_report, run_campaign

    spec = CampaignSpec.from_dict(_load_json(args.config))
    report = run_campaign(spec, _load_bundles(args.bundles),
                          workers=args.workers)
    emit_report(report, csv_path=args.csv, json_path=args.json_out)
    print(f"{len(report.cells)} cells -> {args.csv or args.json_out}")
    return 0


def cmd_policy_search(args) -> int:
    from .dvs import (generate_policies, load_entropy_dataset, policy_search,
                      save_policy)

    bundle = _bundle(args.planner, args.controller, args.predictor)
    lo, hi = args.entropy_lo, args.entropy_hi
    if args.dataset:
        h = load_entropy_dataset(args.dataset)["entropy"]
        lo, hi = float(h.min()), float(h.max())
    candidates = generate_policies(n=args.candidates, entropy_lo=lo,
                                   entropy_hi=hi, seed=args.seed)
    result = policy_search(bundle, candidates, args.tasks.split(","),
                           repetitions=args.repetitions, seed=args.seed,
                           iso_success_floor=args.floor, csv_path=args.csv,
                           workers=args.workers)
    from .dvs import VoltagePolicy

    save_policy(args.out_policy, VoltagePolicy.from_dict(result["selected"]))
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(result, f, indent=2)
            f.write("\n")
    tag = " (fallback)" if result["fallback"] else ""
    print(f"selected {result['selected']['name']}{tag} -> {args.out_policy}")
    return 0


def cmd_compare_error_models(args) -> int:
    from .harness import CampaignSpec, compare_error_models

    spec = CampaignSpec.from_dict(_load_json(args.config))
    result = compare_error_models(spec, _load_bundles(args.bundles),
                                  workers=args.workers)
    with open(args.out, "w") as f:
        json.dump(result, f, indent=2)
        f.write("\n")
    print(f"rank correlation={result['rank_correlation']:.4f} -> {args.out}")
    return 0


def cmd_report(args) -> int:
    from .harness import CampaignReport, emit_report

    report = CampaignReport.from_dict(_load_json(args.json_in))
    emit_report(report, csv_path=args.csv)
    cells = report.cells
    succ = [c.success_rate() for c in cells]
    print(f"{len(cells)} cells; success min={min(succ):.3f} "
          f"max={max(succ):.3f}; csv -> {args.csv}")
    return 0


# --------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltsim",
                                description="voltage-underscaling resilience "
                                            "and energy co-simulation")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-world", cmd_gen_world, help="generate a world, optionally "
                                              "with an expert trace")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--task")
    sp.add_argument("--trace")

    sp = add("train-planner", cmd_train_planner, help="fit the recipe corpus")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("plant-outliers", cmd_plant_outliers,
             help="amplify one residual channel and fine-tune")
    sp.add_argument("--planner", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha", type=float, default=64.0)
    sp.add_argument("--channel", type=int)

    sp = add("fold", cmd_fold, help="fold norm gains and apply the Hadamard "
                                    "rotation")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-controller", cmd_train_controller,
             help="behavior-clone the scripted expert")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, help="fit anomaly bounds from "
                                              "fault-free runs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--margin", type=float, default=1.5)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("build-entropy-dataset", cmd_build_entropy_dataset,
             help="harvest frames from fault-free episodes")
    sp.add_argument("--planner", required=True)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=50_000)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("train-predictor", cmd_train_predictor,
             help="fit the entropy predictor")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--learning-rate", type=float, default=1e-4)
    sp.add_argument("--weight-decay", type=float, default=1e-2)
    sp.add_argument("--metrics")

    sp = add("run-episode", cmd_run_episode, help="execute one episode")
    sp.add_argument("--config", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--summary", required=True)
    sp.add_argument("--seed", type=int, required=True)

    sp = add("campaign", cmd_campaign, help="run a sweep grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--bundles", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--json", dest="json_out")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("policy-search", cmd_policy_search,
             help="search entropy-to-voltage policies")
    sp.add_argument("--planner", required=True)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--out-policy", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--json", dest="json_out")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--candidates", type=int, default=100)
    sp.add_argument("--tasks", default="wooden_pickaxe,coal")
    sp.add_argument("--repetitions", type=int, default=10)
    sp.add_argument("--floor", type=float, default=0.95)
    sp.add_argument("--dataset", help="entropy dataset; sets threshold range")
    sp.add_argument("--entropy-lo", type=float, default=0.0)
    sp.add_argument("--entropy-hi", type=float, default=2.2)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("compare-error-models", cmd_compare_error_models,
             help="voltage table vs matched-BER uniform twin")
    sp.add_argument("--config", required=True)
    sp.add_argument("--bundles", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("report", cmd_report, help="re-emit CSV from a stored report")
    sp.add_argument("--json", dest="json_in", required=True)
    sp.add_argument("--csv", required=True)
    return p


def main(argv=None) -> int:
    from .harness import ConfigError, MissingArtifactError

    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
