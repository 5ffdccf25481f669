"""Plan decoding, accuracy scoring, and the planted-outlier construction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errmodel import RngStream
from ..gridcraft import task_names, tasks
from ..qgemm import GemmFaultConfig
from ..tinynn import PlannerModel, RunContext
from ..tinynn.optim import AdamW
from .vocab import PLAN_MAX_LEN, Vocab, build_plan_corpus, plan_prompt

_CLEAN = GemmFaultConfig()


@dataclass
class PlanStats:
    """Work done by one decode, for the energy ledger."""

    macs_active: int = 0
    macs_recompute: int = 0
    tokens: int = 0


def plan(planner: PlannerModel, vocab: Vocab, task_name: str, satisfied=(),
         fault_cfg: GemmFaultConfig | None = None, target="none",
         rng: RngStream | None = None, dmr: bool = False,
         stats: PlanStats | None = None, max_len: int = PLAN_MAX_LEN) -> list:
    """Greedy-decode a subtask uid sequence for the task.

    Decoding stops at <eos> or max_len tokens. Whatever the model emits is
    returned verbatim: a corrupted decode may name tasks or specials, and
    those run as invalid subtasks that burn episode steps without progress.
    """
    prompt = plan_prompt(vocab, task_name, satisfied)

    def run_factory(t):
        return RunContext(
            fault_cfg=fault_cfg,
            target=target,
            rng=rng.child("tok", t) if rng is not None else None,
            bounds=planner.bounds,
            dmr=dmr,
        )

    runs = []

    def tracked_factory(t):
        run = run_factory(t)
        runs.append(run)
        return run

    ids = planner.decode(prompt, tracked_factory, max_new=max_len,
                         eos_id=vocab.eos_id)
    if stats is not None:
        stats.macs_active += sum(r.macs_active for r in runs)
        stats.macs_recompute += sum(r.macs_recompute for r in runs)
        stats.tokens += len(runs)
    return [vocab.decode(i) for i in ids]


def plan_cases():
    """Every (task, satisfied prefix, golden completion) the corpus covers."""
    cases = []
    for name in task_names():
        recipe = [st.uid for st in tasks()[name].recipe]
        for m in range(len(recipe) + 1):
            cases.append((name, tuple(recipe[:m]), tuple(recipe[m:])))
    return cases


def plan_accuracy(planner: PlannerModel, vocab: Vocab,
                  fault_cfg: GemmFaultConfig | None = None, target="none",
                  rng: RngStream | None = None, dmr: bool = False,
                  reps: int = 1) -> float:
    """Fraction of decodes that reproduce the golden completion exactly."""
    cases = plan_cases()
    hits = 0
    total = 0
    for rep in range(reps):
        for idx, (name, sat, want) in enumerate(cases):
            child = rng.child("case", rep, idx) if rng is not None else None
            got = plan(planner, vocab, name, sat, fault_cfg=fault_cfg,
                       target=target, rng=child, dmr=dmr)
            hits += tuple(got) == want
            total += 1
    return hits / total


# ---------------------------------------------------------------- planting

class PlantError(RuntimeError):
    """Fine-tuning failed to restore exact recipe accuracy after planting."""


def _plant_slices(planner: PlannerModel, channel: int):
    """(param name, column/element index) pairs the plant freezes."""
    slices = [("embed", (slice(None), channel)), ("pos", (slice(None), channel))]
    for i in range(planner.spec.n_layers):
        pre = f"l{i}."
        slices.append((pre + "o", (slice(None), channel)))
        slices.append((pre + "down", (slice(None), channel)))
        slices.append((pre + "ln1.g", (channel,)))
        slices.append((pre + "ln2.g", (channel,)))
    slices.append(("final.g", (channel,)))
    return slices


def _prenorm_streams(planner: PlannerModel, prompts) -> dict:
    """Pre-norm residual activations at every rms site, stacked (T, D)."""
    from ..tinynn import ops as nnops

    p, spec = planner.params, planner.spec
    sites: dict = {}

    def note(site, x):
        sites.setdefault(site, []).append(x[0])

    for ids in prompts:
        ids = np.asarray(ids, dtype=np.int64)
        x = (p["embed"][ids] + p["pos"][: len(ids)])[None]
        for i in range(spec.n_layers):
            pre = f"l{i}."
            note(pre + "ln1", x)
            h, _ = nnops.rmsnorm_fwd(x, p[pre + "ln1.g"])
            q, _ = nnops.linear_fwd(h, p[pre + "q"])
            k, _ = nnops.linear_fwd(h, p[pre + "k"])
            v, _ = nnops.linear_fwd(h, p[pre + "v"])
            a, _ = nnops.attention_fwd(q, k, v, spec.n_heads, spec.causal)
            o, _ = nnops.linear_fwd(a, p[pre + "o"])
            x = x + o
            note(pre + "ln2", x)
            h2, _ = nnops.rmsnorm_fwd(x, p[pre + "ln2.g"])
            gt, _ = nnops.linear_fwd(h2, p[pre + "gate"])
            up, _ = nnops.linear_fwd(h2, p[pre + "up"])
            s, _ = nnops.silu_fwd(gt)
            d, _ = nnops.linear_fwd(s * up, p[pre + "down"])
            x = x + d
        note("final", x)
    return {s: np.concatenate(ch, axis=0) for s, ch in sites.items()}


def _rms_inflation(planner: PlannerModel, prompts, channel: int,
                   alpha: float) -> dict:
    """Mean per-site growth of the RMS denominator the plant will cause.

    Amplifying channel c by alpha turns each position's rms into
    sqrt(rms^2 + (alpha^2-1) x_c^2 / D). The per-site average of that growth
    factor, measured on the unplanted model, is folded into the norm gains
    as a warm start so fine-tuning only has to absorb the per-position
    variation around the mean.
    """
    D = planner.spec.hidden_dim
    out = {}
    for site, x in _prenorm_streams(planner, prompts).items():
        ms = np.mean(x * x, axis=-1)
        grow = np.sqrt(1.0 + (alpha * alpha - 1.0) * x[:, channel] ** 2 / (D * ms))
        out[site] = float(np.mean(grow))
    return out


def select_plant_channel(planner: PlannerModel, alpha: float = 64.0,
                         vocab: Vocab | None = None,
                         min_ratio: float = 35.0) -> int:
    """Channel whose amplification the gain warm start undoes best.

    Ranks channels by their worst-site coefficient of variation of the RMS
    growth factor (low variation means the mean gain correction is nearly
    exact, so the restoring fine-tune starts close), keeping only channels
    whose amplified peak clears min_ratio times the site median so the
    planted outlier actually dominates the activation profile.
    """
    vocab = vocab or Vocab()
    prompts = [ids for ids, _ in build_plan_corpus(vocab)]
    D = planner.spec.hidden_dim
    worst_cv = np.zeros(D)
    ratio_floor = np.full(D, np.inf)
    for site, x in _prenorm_streams(planner, prompts).items():
        ms = np.mean(x * x, axis=-1, keepdims=True)
        grow = np.sqrt(1.0 + (alpha * alpha - 1.0) * x * x / (D * ms))
        worst_cv = np.maximum(worst_cv, grow.std(axis=0) / grow.mean(axis=0))
        med = np.median(np.abs(x[np.abs(x) > 0]))
        ratio_floor = np.minimum(ratio_floor,
                                 alpha * np.abs(x).max(axis=0) / med)
    ok = ratio_floor >= min_ratio
    if not ok.any():
        ok = ratio_floor >= np.max(ratio_floor)  # degraded but usable
    return int(np.argmin(np.where(ok, worst_cv, np.inf)))


def plant_outliers(planner: PlannerModel, channel: int, alpha: float,
                   vocab: Vocab | None = None, seed: int = 0,
                   max_epochs: int = 20, batch_size: int = 8,
                   learning_rate: float = 3e-4) -> PlannerModel:
    """Amplify one residual-stream channel by alpha, then fine-tune.

    Every writer into the residual stream gets its column scaled by alpha;
    the reading side is compensated by dividing the channel's norm gain by
    alpha, which is the row-scaling of all consumer weights factored through
    the shared normalization gain (keeping post-norm activations in a healthy
    INT8 range). The amplified slices and compensating gains are frozen while
    the rest of the model fine-tunes back to exact recipe accuracy.
    """
    if alpha == 1.0:
        clone = PlannerModel(planner.spec, {k: v.copy() for k, v in planner.params.items()})
        clone.flags = dict(planner.flags)
        clone.bounds = dict(planner.bounds)
        return clone
    if alpha < 10.0:
        raise ValueError("alpha must be 1 (no-op) or >= 10")
    if not 0 <= channel < planner.spec.hidden_dim:
        raise ValueError(f"channel {channel} outside hidden dim")
    if planner.flags.get("rotated"):
        raise ValueError("plant before rotation, not after")

    vocab = vocab or Vocab()
    corpus = build_plan_corpus(vocab)
    inflate = _rms_inflation(planner, [ids for ids, _ in corpus], channel, alpha)

    out = PlannerModel(planner.spec, {k: v.copy() for k, v in planner.params.items()})
    out.flags = dict(planner.flags)
    out.bounds = {}  # magnitudes change; stale bounds must not survive
    p = out.params
    c = channel
    p["embed"][:, c] *= alpha
    p["pos"][:, c] *= alpha
    for i in range(out.spec.n_layers):
        pre = f"l{i}."
        p[pre + "o"][:, c] *= alpha
        p[pre + "down"][:, c] *= alpha
        p[pre + "ln1.g"] *= inflate[pre + "ln1"]
        p[pre + "ln2.g"] *= inflate[pre + "ln2"]
        p[pre + "ln1.g"][c] /= alpha
        p[pre + "ln2.g"][c] /= alpha
    p["final.g"] *= inflate["final"]
    p["final.g"][c] /= alpha
    out.invalidate_qweights()
    frozen = _plant_slices(out, c)
    # weight decay stays zero: decay would erode the frozen plant
    opt = AdamW(out.params, learning_rate, weight_decay=0.0)
    for epoch in range(max_epochs):
        if plan_accuracy(out, vocab) == 1.0:
            break
        order = RngStream(seed, ("plant-shuffle", epoch)).generator.permutation(len(corpus))
        for lo in range(0, len(corpus), batch_size):
            batch = [corpus[i] for i in order[lo:lo + batch_size]]
            _, grads = out.loss_and_grads(out.collate(batch))
            for name, idx in frozen:
                grads[name][idx] = 0.0
            opt.step(out.params, grads)
        out.invalidate_qweights()
    if plan_accuracy(out, vocab) != 1.0:
        raise PlantError(
            f"recipe accuracy not restored after {max_epochs} epochs "
            f"(alpha={alpha}); retry with a smaller alpha"
        )
    out.flags["planted_channel"] = int(c)
    out.flags["plant_alpha"] = float(alpha)
    return out
