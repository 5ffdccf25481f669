"""Training recipes for the planner and controller.

The planner memorizes the recipe corpus. The controller is behavior-cloned
from the scripted expert; pure clones inherit the usual distribution-shift
failure (they orbit forever once off the expert's path), so collection runs
in two rounds: perturbed-expert rollouts, then one round where the trained
clone drives and the expert labels every state it actually visits.
"""
from __future__ import annotations

import warnings

from ..errmodel import RngStream
from ..gridcraft import (
    ExpertStuckError,
    N_ACTIONS,
    expert_policy,
    generate_world,
    observe,
    prompt_embedding,
    step,
    task_names,
    tasks,
)
from ..tinynn import (
    ControllerModel,
    PlannerModel,
    TrainConfig,
    TransformerSpec,
    train,
)
from ..tinynn.models import RunContext
from .planning import plan_accuracy
from .vocab import Vocab, build_plan_corpus

PLANNER_SPEC = TransformerSpec(n_layers=4, hidden_dim=256, n_heads=4,
                               mlp_dim=512, vocab_size=30, norm="rms",
                               max_seq=48, causal=True)
CONTROLLER_SPEC = TransformerSpec(n_layers=2, hidden_dim=128, n_heads=4,
                                  mlp_dim=256, vocab_size=0, norm="layer",
                                  max_seq=10, causal=False)

# tasks whose terminal craft appears nowhere else in the roster: they get
# extra rollouts or the corpus barely samples those prompts
RARE_CRAFT_TASKS = ("charcoal", "coal", "iron_tool", "stone_pickaxe",
                    "wool", "cooked_food")


def train_planner(vocab: Vocab, seed: int = 1001) -> PlannerModel:
    """Fit the recipe corpus to 100% greedy accuracy."""
    planner = PlannerModel.init(PLANNER_SPEC, RngStream(seed, ("planner-init",)))
    corpus = build_plan_corpus(vocab)
    train(planner, corpus, TrainConfig(epochs=30, batch_size=8,
                                       learning_rate=1e-3, weight_decay=0.0,
                                       seed=7), loss="cross_entropy")
    acc = plan_accuracy(planner, vocab)
    if acc < 1.0:
        raise RuntimeError(f"planner accuracy {acc:.3f} after training")
    return planner


def collect_noisy_demos(names, seeds, eps: float, rng: RngStream,
                        cap: int = 600) -> list:
    """(obs, prompt, expert action) triples from eps-perturbed rollouts.

    The expert drives but a fraction eps of steps take a uniform random
    action, so the corpus covers near-path recovery states. A rollout whose
    noise makes a subtask unreachable is dropped from that point on.
    """
    samples = []
    stuck = 0
    for name in names:
        recipe = tasks()[name].recipe
        for ws in seeds:
            world = generate_world(ws)
            gen = rng.child("demo", name, ws, int(eps * 100)).generator
            try:
                for st in recipe:
                    world.active_subtask = st
                    window = 0
                    while not st.goal(world.inventory):
                        if window >= cap:
                            raise ExpertStuckError(f"{name}:{st.uid}")
                        a_star = expert_policy(world, st)
                        samples.append((observe(world, st),
                                        prompt_embedding(st.uid), a_star))
                        a = int(gen.integers(0, N_ACTIONS)) \
                            if gen.uniform() < eps else a_star
                        world, _, _ = step(world, a)
                        window += 1
            except ExpertStuckError:
                stuck += 1
    if stuck > len(names) * max(len(seeds), 1) // 10:
        warnings.warn(f"{stuck} noisy rollouts went unreachable; "
                      "corpus may be thin")
    return samples


def collect_policy_demos(controller: ControllerModel, names, seeds,
                         rng: RngStream, cap: int = 2000) -> list:
    """One imitation refinement round: the clone drives, the expert labels.

    Mirrors the episode loop's subtask scheduling (first unmet recipe entry
    is active) without planner or fault machinery.
    """
    samples = []
    for name in names:
        task = tasks()[name]
        for ws in seeds:
            world = generate_world(ws)
            g = rng.child("refine", name, ws)
            queue = list(task.recipe)
            t = 0
            while t < cap and not task.goal(world.inventory):
                qpos = 0
                while qpos < len(queue) and queue[qpos].goal(world.inventory):
                    qpos += 1
                if qpos >= len(queue):
                    break
                st = queue[qpos]
                world.active_subtask = st
                obs = observe(world, st)
                pe = prompt_embedding(st.uid)
                samples.append((obs, pe, expert_policy(world, st)))
                run = RunContext(fault_cfg=None, target="all",
                                 rng=g.child("ctrl", t), bounds=None,
                                 dmr=False)
                a = controller.act(obs, pe, run, g.child("act", t))
                world, _, _ = step(world, a)
                t += 1
    return samples


def _fit(samples, seed: int, epochs: int) -> ControllerModel:
    model = ControllerModel.init(CONTROLLER_SPEC,
                                 RngStream(seed, ("controller-init",)))
    train(model, samples, TrainConfig(epochs=epochs, batch_size=64,
                                      learning_rate=1e-3, weight_decay=0.0,
                                      seed=11), loss="cross_entropy")
    return model


def train_controller(seed: int = 2002, demo_seed: int = 4242,
                     epochs: int = 14) -> ControllerModel:
    """Two-round imitation: noisy-expert clone, then on-policy relabeling."""
    rng = RngStream(demo_seed, ("demo-run",))
    names = task_names()
    base = (collect_noisy_demos(names, list(range(12)), 0.25, rng)
            + collect_noisy_demos(names, list(range(12, 18)), 0.0, rng)
            + collect_noisy_demos(RARE_CRAFT_TASKS, list(range(18, 34)),
                                  0.15, rng))
    draft = _fit(base, seed, epochs)
    extra = collect_policy_demos(draft, names, list(range(40, 46)), rng)
    return _fit(base + extra, seed, epochs)


def evaluate_success(bundle, repetitions: int = 3, key: int = 77,
                     task_list=None) -> dict:
    """Fault-free episode success over tasks x repetitions."""
    from .episode import EpisodeConfig, run_episode

    names = list(task_list) if task_list is not None else task_names()
    wins = 0
    failures = []
    for task in names:
        for rep in range(repetitions):
            ws = int(RngStream(key, ("eval-world", task, rep))
                     .generator.integers(0, 2**31 - 1))
            cfg = EpisodeConfig(task=task, world_seed=ws, protection="none")
            tr = run_episode(cfg, bundle, RngStream(key, ("eval", task, rep)))
            if tr.outcome == "success":
                wins += 1
            else:
                failures.append([task, rep])
    n = len(names) * repetitions
    return {"successes": wins, "n": n, "rate": wins / n, "failures": failures}
