"""Scripted expert: BFS navigation plus rule-based interaction.

Shortest paths are recomputed every step (targets move), and ties between
equally short first moves are broken uniformly at random from a seeded
stream. That stochasticity is deliberate: it is what gives navigation frames
genuinely higher action entropy than interaction frames.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errmodel import RngStream
from .tasks import Subtask, mining_requires, tasks as task_registry
from .world import (
    A_CRAFT,
    A_INTERACT,
    A_NO_OP,
    DIR_VECS,
    TILE_CODE,
    TILE_EMPTY,
    TILE_TABLE,
    World,
    generate_world,
    observe,
    step,
)

_INF = np.iinfo(np.int32).max


class ExpertStuckError(Exception):
    """The expert cannot reach or satisfy the active subtask."""


def _has_pickaxe(inventory: dict) -> bool:
    return any(inventory.get(t, 0) > 0 for t in mining_requires()["ore"])


def _subtask_targets(world: World, subtask: Subtask) -> list:
    if subtask.kind == "gather":
        if subtask.item == "ore" and not _has_pickaxe(world.inventory):
            raise ExpertStuckError("ore requires a pickaxe")
        return list(zip(*np.nonzero(world.tiles == TILE_CODE[subtask.source])))
    if subtask.kind == "hunt":
        return [a.pos for a in world.animals if a.kind == subtask.source]
    if subtask.kind == "craft":
        missing = [i for i, n in subtask.inputs
                   if world.inventory.get(i, 0) < n]
        if missing:
            raise ExpertStuckError(f"missing craft inputs {missing}")
        if not subtask.table:
            return []  # craftable on the spot
        return list(zip(*np.nonzero(world.tiles == TILE_TABLE)))
    raise ExpertStuckError(f"no expert routine for subtask {subtask.uid!r}")


def distance_field(world: World, targets, avoid=()) -> np.ndarray:
    """BFS distance over empty tiles to cells adjacent to any target.

    Cells in avoid are treated as walls. The expert passes non-target
    animal positions here so paths detour around them instead of assuming
    they will move.
    """
    dist = np.full((world.height, world.width), _INF, dtype=np.int32)
    frontier = []
    passable = world.tiles == TILE_EMPTY
    for r, c in avoid:
        passable[r, c] = False
    passable[world.agent_pos] = True
    for r, c in targets:
        for dr, dc in DIR_VECS:
            nr, nc = r + dr, c + dc
            if world.in_bounds(nr, nc) and passable[nr, nc] and dist[nr, nc]:
                dist[nr, nc] = 0
                frontier.append((nr, nc))
    head = 0
    while head < len(frontier):
        r, c = frontier[head]
        head += 1
        for dr, dc in DIR_VECS:
            nr, nc = r + dr, c + dc
            if world.in_bounds(nr, nc) and passable[nr, nc] \
                    and dist[nr, nc] == _INF:
                dist[nr, nc] = dist[r, c] + 1
                frontier.append((nr, nc))
    return dist


def expert_policy(world: World, subtask: Subtask, rng: RngStream | None = None) -> int:
    """One expert action for the active subtask on the current world."""
    if subtask is None or subtask.kind in ("invalid", "idle"):
        return A_NO_OP
    if subtask.goal(world.inventory):
        return A_NO_OP
    if rng is None:
        rng = world.rng.child("expert", world.step_count)
    targets = _subtask_targets(world, subtask)
    do_action = A_CRAFT if subtask.kind == "craft" else A_INTERACT
    if subtask.kind == "craft" and not subtask.table:
        return do_action
    if not targets:
        raise ExpertStuckError(f"no targets left for {subtask.uid!r}")
    target_set = set(targets)
    if world.faced_cell() in target_set:
        return do_action
    r, c = world.agent_pos
    facing_moves = [d for d, (dr, dc) in enumerate(DIR_VECS)
                    if (r + dr, c + dc) in target_set]
    if facing_moves:
        # blocked move onto the target cell: position holds, facing turns
        return facing_moves[int(rng.integers(len(facing_moves)))]
    avoid = [tuple(a.pos) for a in world.animals
             if tuple(a.pos) not in target_set]
    dist = distance_field(world, targets, avoid=avoid)
    here = dist[world.agent_pos]
    if here == _INF and avoid:
        # every detour is animal-blocked; press toward them so they flee
        dist = distance_field(world, targets)
        here = dist[world.agent_pos]
    if here == _INF:
        raise ExpertStuckError(f"unreachable targets for {subtask.uid!r}")
    moves = []
    for d, (dr, dc) in enumerate(DIR_VECS):
        nr, nc = r + dr, c + dc
        if world.in_bounds(nr, nc) and world.tiles[nr, nc] == TILE_EMPTY \
                and dist[nr, nc] == here - 1:
            moves.append(d)
    if not moves:
        # hemmed in by animals on every shortest path; wait a tick
        return A_NO_OP
    return moves[int(rng.integers(len(moves)))]


def rollout_expert(task_name: str, world_seed: int, max_steps_per_subtask: int = 600,
                   on_step=None):
    """Run the expert through a full task recipe on a fresh world.

    Returns (records, world) where records are (step_index, action, done)
    tuples over the whole episode. on_step(world, subtask, action), when
    given, is called with the pre-step world for data collection.
    """
    task = task_registry()[task_name]
    world = generate_world(world_seed)
    records = []
    for st in task.recipe:
        world.active_subtask = st
        window = 0
        while not st.goal(world.inventory):
            if window >= max_steps_per_subtask:
                raise ExpertStuckError(
                    f"{task_name}/{st.uid} not done after {window} steps"
                )
            action = expert_policy(world, st)
            if on_step is not None:
                on_step(world, st, action)
            world, _, done = step(world, action)
            records.append((world.step_count, action, int(done)))
            window += 1
    return records, world


def collect_demos(task_names, world_seeds, max_steps_per_subtask: int = 600):
    """Behaviour-cloning corpus: (obs uint8, subtask uid, action) per step."""
    samples = []

    def keep(world, st, action):
        obs = observe(world, st)
        samples.append((
            np.round(obs * 255.0).astype(np.uint8),
            st.uid,
            int(action),
        ))

    for name in task_names:
        for seed in world_seeds:
            rollout_expert(name, seed, max_steps_per_subtask, on_step=keep)
    return samples


_TRACE_MAGIC = b"VGTR"
_TRACE_VERSION = 1


def write_trace_bin(path, records):
    with open(path, "wb") as f:
        f.write(_TRACE_MAGIC)
        f.write(struct.pack("<HI", _TRACE_VERSION, len(records)))
        for step_index, action, done in records:
            f.write(struct.pack("<IBB", step_index, action, done))


def read_trace_bin(path):
    with open(path, "rb") as f:
        if f.read(4) != _TRACE_MAGIC:
            raise ValueError("not a trace file")
        version, n = struct.unpack("<HI", f.read(6))
        if version != _TRACE_VERSION:
            raise ValueError(f"unsupported trace version {version}")
        return [struct.unpack("<IBB", f.read(6)) for _ in range(n)]
