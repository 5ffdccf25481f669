"""Entropy dataset construction, predictor training, and policy search.

Everything here is offline tooling around the episode loop: harvest frames
from fault-free runs, fit the entropy predictor, and search candidate
voltage policies for the lowest effective voltage that holds success.
Imports from agentloop stay function-local; the episode module itself uses
this package's policies and ledger.
"""
from __future__ import annotations

import csv
import warnings

import numpy as np
from scipy.stats import ks_2samp

from ..errmodel import RngStream, default_table
from ..tinynn import EntropyPredictor, TrainConfig, train
from .scaling import NOMINAL_VOLTAGE, VoltagePolicy, constant_policy

# movement and turning are navigation; interact/craft are execution frames
INTERACTION_ACTIONS = (6, 7)


def _world_seed(seed: int, task: str, rep: int) -> int:
    return int(RngStream(seed, ("world", task, rep)).generator.integers(0, 2**31 - 1))


# ------------------------------------------------------------- dataset

def build_entropy_dataset(bundle, task_list, n_frames: int = 50_000,
                          seed: int = 0, max_episodes: int = 600,
                          replan_after: int = 600,
                          fail_after: int = 12_000) -> dict:
    """Frames from fault-free episodes: (image, prompt, true entropy).

    Episodes cycle through task_list until n_frames are collected. Images
    are stored as uint8 in [0, 255]; prompts as indices into a deduplicated
    embedding table. Reproducible from (models, seed) alone.
    """
    from ..agentloop import EpisodeConfig, run_episode

    images, prompt_ids, entropies, actions, uids = [], [], [], [], []
    table: dict = {}
    table_rows: list = []

    def sink(step, obs, pe, h, action, uid):
        if len(entropies) >= n_frames:
            return
        if uid not in table:
            table[uid] = len(table_rows)
            table_rows.append(pe.astype(np.float64))
        images.append(np.round(obs * 255.0).astype(np.uint8))
        prompt_ids.append(table[uid])
        entropies.append(h)
        actions.append(action)
        uids.append(uid)

    ep = 0
    while len(entropies) < n_frames and ep < max_episodes:
        task = task_list[ep % len(task_list)]
        cfg = EpisodeConfig(task=task, world_seed=_world_seed(seed, task, ep),
                            protection="none", replan_after=replan_after,
                            fail_after=fail_after)
        run_episode(cfg, bundle, RngStream(seed, ("entropy-ep", task, ep)),
                    frame_sink=sink)
        ep += 1
    if len(entropies) < n_frames:
        warnings.warn(f"entropy dataset short: collected {len(entropies)} of "
                      f"{n_frames} frames from {ep} episodes")
    return {
        "images": np.stack(images),
        "prompt_ids": np.array(prompt_ids, dtype=np.uint16),
        "prompt_table": np.stack(table_rows),
        "prompt_uids": np.array([u for u, _ in sorted(table.items(),
                                                      key=lambda kv: kv[1])]),
        "entropy": np.array(entropies, dtype=np.float64),
        "action": np.array(actions, dtype=np.uint8),
    }


def save_entropy_dataset(path, ds: dict) -> None:
    np.savez_compressed(path, **ds)


def load_entropy_dataset(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def phase_separation(ds: dict) -> dict:
    """KS statistic between navigation-frame and interaction-frame entropy."""
    inter = np.isin(ds["action"], INTERACTION_ACTIONS)
    nav_h, int_h = ds["entropy"][~inter], ds["entropy"][inter]
    if len(nav_h) == 0 or len(int_h) == 0:
        return {"ks": 0.0, "n_nav": int(len(nav_h)), "n_interact": int(len(int_h))}
    ks = float(ks_2samp(nav_h, int_h).statistic)
    return {
        "ks": ks,
        "n_nav": int(len(nav_h)),
        "n_interact": int(len(int_h)),
        "mean_nav": float(nav_h.mean()),
        "mean_interact": float(int_h.mean()),
    }


# ------------------------------------------------------------ predictor

def train_predictor(ds: dict, seed: int = 0, epochs: int = 200,
                    batch_size: int = 128, learning_rate: float = 1e-4,
                    weight_decay: float = 1e-2):
    """Fit the entropy predictor on a seeded 90/10 split.

    Returns (predictor, metrics) with held-out mse and r2 against the
    held-out mean baseline.
    """
    n = len(ds["entropy"])
    if n < 10:
        raise ValueError("dataset too small to split")
    perm = RngStream(seed, ("predictor-split",)).generator.permutation(n)
    n_hold = n // 10
    hold, tr = perm[:n_hold], perm[n_hold:]

    imgs = ds["images"].astype(np.float64) / 255.0
    prompts = ds["prompt_table"][ds["prompt_ids"]]
    target = ds["entropy"]

    samples = [(imgs[i], prompts[i], float(target[i])) for i in tr]
    model = EntropyPredictor.init(RngStream(seed, ("predictor-init",)))
    curve = train(model, samples, TrainConfig(
        epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        weight_decay=weight_decay, seed=seed), loss="mse")

    preds = predict_batch(model, imgs[hold], prompts[hold])
    resid = preds - target[hold]
    mse = float(np.mean(resid ** 2))
    ss_tot = float(np.mean((target[hold] - target[hold].mean()) ** 2))
    r2 = 1.0 - mse / ss_tot if ss_tot > 0 else float("nan")
    return model, {"mse": mse, "r2": r2, "n_holdout": int(n_hold),
                   "final_train_loss": curve[-1][1]}


def predict_batch(model: EntropyPredictor, images: np.ndarray,
                  prompts: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for lo in range(0, len(images), chunk):
        y, _ = model.fp_forward(images[lo:lo + chunk], prompts[lo:lo + chunk])
        out.append(y)
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------- search

def generate_policies(n: int = 100, entropy_lo: float = 0.0,
                      entropy_hi: float = 2.0, seed: int = 0,
                      update_interval: int = 5) -> list:
    """Seeded random monotone step maps plus the constant-nominal anchor.

    Each candidate has 2-4 strictly descending thresholds over the observed
    entropy range and a non-increasing voltage ladder on the LDO grid
    starting at nominal.
    """
    if entropy_hi <= entropy_lo:
        raise ValueError("need entropy_hi > entropy_lo")
    gen = RngStream(seed, ("policy-gen",)).generator
    out = [constant_policy(NOMINAL_VOLTAGE, update_interval, name="const-0.90")]
    for i in range(n):
        m = int(gen.integers(2, 5))
        ths = np.sort(gen.uniform(entropy_lo, entropy_hi, size=m))[::-1]
        while len(set(ths.tolist())) < m:  # ties have measure zero, but be safe
            ths = np.sort(gen.uniform(entropy_lo, entropy_hi, size=m))[::-1]
        mv = 900
        volts = [mv]
        for _ in range(m):
            mv = max(600, mv - 10 * int(gen.integers(0, 7)))
            volts.append(mv)
        out.append(VoltagePolicy(
            voltages=tuple(v / 1000.0 for v in volts),
            thresholds=tuple(float(t) for t in ths),
            update_interval=update_interval, name=f"cand-{i:03d}"))
    return out


def _eval_policy(policy, bundle, task_list, repetitions, seed,
                 replan_after, fail_after) -> dict:
    # policy None = the fault-free baseline block
    from ..agentloop import EpisodeConfig, run_episode

    wins = 0
    ops = energy = 0.0
    for task in task_list:
        for rep in range(repetitions):
            ws = _world_seed(seed, task, rep)
            if policy is None:
                cfg = EpisodeConfig(task=task, world_seed=ws,
                                    protection="AD",
                                    replan_after=replan_after,
                                    fail_after=fail_after)
                key = ("baseline", task, rep)
            else:
                cfg = EpisodeConfig(task=task, world_seed=ws,
                                    protection="AD+WR+VS",
                                    controller_error=default_table(),
                                    vs_policy=policy,
                                    replan_after=replan_after,
                                    fail_after=fail_after)
                key = ("policy", policy.name, task, rep)
            tr = run_episode(cfg, bundle, RngStream(seed, key))
            wins += tr.outcome == "success"
            tot = tr.ledger.totals().get("controller")
            if tot:
                ops += tot["ops"]
                energy += tot["energy"]
    n = len(task_list) * repetitions
    return {"successes": wins, "n": n, "rate": wins / n,
            "v_eff": (energy / ops) ** 0.5 if ops else None}


_PS_STATE: dict = {}


def _ps_init(args) -> None:
    _PS_STATE["args"] = args


def _ps_eval(policy) -> dict:
    return _eval_policy(policy, *_PS_STATE["args"])


def policy_search(bundle, candidates, task_list, repetitions: int = 100,
                  seed: int = 0, iso_success_floor: float = 0.95,
                  replan_after: int = 600, fail_after: int = 12_000,
                  csv_path=None, workers: int = 1) -> dict:
    """Score candidates by (success, controller effective voltage).

    The fault model is the voltage error table on the controller with AD on
    (the rotated-planner AD+WR+VS stack); the fault-free baseline runs the
    same bundle with no error source. Selection: the minimum effective
    voltage among candidates whose success rate clears
    iso_success_floor x fault-free; if none clears it, the constant-nominal
    fallback is returned flagged. Every episode's stream is keyed by the
    candidate identity, so results do not depend on workers.
    """
    from ..harness.stats import wilson_interval

    if not 0.0 < iso_success_floor <= 1.0:
        raise ValueError("iso_success_floor must be in (0, 1]")
    names = [c.name or f"cand-{i}" for i, c in enumerate(candidates)]
    if len(set(names)) != len(names):
        raise ValueError("candidate policy names must be unique")

    args = (bundle, task_list, repetitions, seed, replan_after, fail_after)
    base = _eval_policy(None, *args)
    if workers > 1 and len(candidates) > 1:
        import multiprocessing

        with multiprocessing.Pool(workers, initializer=_ps_init,
                                  initargs=(args,)) as pool:
            evals = pool.map(_ps_eval, candidates)
    else:
        evals = [_eval_policy(c, *args) for c in candidates]

    floor = iso_success_floor * base["rate"]
    rows = []
    for cand, r in zip(candidates, evals):
        lo, hi = wilson_interval(r["successes"], r["n"])
        rows.append({
            "policy": cand.name, "kind": cand.kind,
            "success_rate": r["rate"], "ci_lo": lo, "ci_hi": hi,
            "v_eff": r["v_eff"], "meets_floor": r["rate"] >= floor,
            "thresholds": list(cand.thresholds),
            "voltages": list(cand.voltages),
        })

    # non-dominated set: nothing with both higher success and lower v_eff
    pareto = []
    for r in rows:
        if r["v_eff"] is None:
            continue
        dominated = any(
            o is not r and o["v_eff"] is not None
            and o["success_rate"] >= r["success_rate"]
            and o["v_eff"] <= r["v_eff"]
            and (o["success_rate"] > r["success_rate"] or o["v_eff"] < r["v_eff"])
            for o in rows)
        if not dominated:
            pareto.append(r["policy"])

    eligible = [r for r in rows if r["meets_floor"] and r["v_eff"] is not None]
    fallback = not eligible
    if eligible:
        best = min(eligible, key=lambda r: (r["v_eff"], -r["success_rate"]))
        selected = next(c for c in candidates if c.name == best["policy"])
    else:
        selected = constant_policy(NOMINAL_VOLTAGE, name="const-0.90-fallback")

    if csv_path is not None:
        with open(csv_path, "w") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["policy", "success_rate", "ci_lo", "ci_hi",
                        "v_eff", "meets_floor"])
            for r in rows:
                w.writerow([r["policy"], f"{r['success_rate']:.6f}",
                            f"{r['ci_lo']:.6f}", f"{r['ci_hi']:.6f}",
                            "" if r["v_eff"] is None else f"{r['v_eff']:.6f}",
                            int(r["meets_floor"])])

    return {
        "schema_version": 1,
        "fault_free_rate": base["rate"],
        "floor": floor,
        "results": rows,
        "pareto": pareto,
        "selected": selected.to_dict(),
        "fallback": fallback,
    }
