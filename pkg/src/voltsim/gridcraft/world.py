"""Grid world: tiles, agent, animals, transition rules, observations.

Everything is deterministic given (seed, action sequence). Animals move on
even ticks only (half the agent's speed) with a seeded walk that flees the
agent inside Chebyshev distance 2, so hunting converges but takes a genuine
chase.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errmodel import RngStream
from .tasks import Subtask, biome_defaults, craft_recipes, mining_requires

TILE_NAMES = ("empty", "tree", "stone", "ore", "water", "crafting_table")
TILE_EMPTY, TILE_TREE, TILE_STONE, TILE_ORE, TILE_WATER, TILE_TABLE = range(6)
TILE_CODE = {name: i for i, name in enumerate(TILE_NAMES)}
ANIMAL_CODE = {"sheep": 6, "cow": 7}
ANIMAL_YIELD = {"sheep": "wool", "cow": "raw_food"}
CODE_OOB = 8
CODE_SPAN = 8  # channel-0 normalizer: codes 0..8 map into [0, 1]

VIEW_RADIUS = 7  # 15x15 window

ACTIONS = (
    "north", "east", "south", "west",
    "turn_left", "turn_right", "interact", "craft", "no_op",
)
N_ACTIONS = len(ACTIONS)
(A_NORTH, A_EAST, A_SOUTH, A_WEST,
 A_TURN_LEFT, A_TURN_RIGHT, A_INTERACT, A_CRAFT, A_NO_OP) = range(N_ACTIONS)
DIR_VECS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W

MOVE_ACTIONS = frozenset((A_NORTH, A_EAST, A_SOUTH, A_WEST))


class GenerationError(Exception):
    """World generation could not satisfy the biome within the retry budget."""


@dataclass
class Animal:
    kind: str
    pos: tuple


class World:
    def __init__(self, width, height, tiles, agent_pos, facing, animals, seed):
        self.width = width
        self.height = height
        self.tiles = tiles  # (H, W) int8
        self.agent_pos = agent_pos
        self.facing = facing
        self.animals = animals
        self.seed = seed
        self.inventory: dict = {}
        self.step_count = 0
        self.active_subtask: Subtask | None = None
        self.rng = RngStream(seed, ("world",))

    def in_bounds(self, r, c) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width

    def animal_at(self, pos):
        for an in self.animals:
            if an.pos == pos:
                return an
        return None

    def faced_cell(self):
        dr, dc = DIR_VECS[self.facing]
        return (self.agent_pos[0] + dr, self.agent_pos[1] + dc)

    def state_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "tiles": self.tiles.tolist(),
            "agent_pos": list(self.agent_pos),
            "facing": self.facing,
            "inventory": dict(sorted(self.inventory.items())),
            "animals": [[a.kind, list(a.pos)] for a in self.animals],
            "step_count": self.step_count,
        }

    def __eq__(self, other):
        return isinstance(other, World) and self.state_dict() == other.state_dict()


def _passable_mask(world: World) -> np.ndarray:
    return world.tiles == TILE_EMPTY


def reachable_from(world: World, start) -> np.ndarray:
    """(H, W) boolean mask of cells reachable over empty tiles from start.

    Animals are treated as passable: they move, so they only ever block a
    cell transiently.
    """
    ok = _passable_mask(world)
    seen = np.zeros_like(ok, dtype=bool)
    if not ok[start]:
        seen[start] = True  # agent cell itself is always occupiable
    frontier = deque([start])
    seen[start] = True
    while frontier:
        r, c = frontier.popleft()
        for dr, dc in DIR_VECS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < world.height and 0 <= nc < world.width \
                    and not seen[nr, nc] and ok[nr, nc]:
                seen[nr, nc] = True
                frontier.append((nr, nc))
    return seen


def _has_adjacent(mask: np.ndarray, cells) -> bool:
    h, w = mask.shape
    for r, c in cells:
        for dr, dc in DIR_VECS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc]:
                return True
    return False


def generate_world(seed, size=(20, 20), biome_params=None) -> World:
    """Scatter resources and animals; retry until every kind is reachable."""
    if isinstance(size, int):
        size = (size, size)
    height, width = size
    if height < 8 or width < 8:
        raise GenerationError("world must be at least 8x8")
    biome = biome_defaults()
    if biome_params:
        biome.update(biome_params)
    tile_counts = {k: int(v) for k, v in biome.items() if k in TILE_CODE}
    animal_counts = {k: int(v) for k, v in biome.items() if k in ANIMAL_CODE}
    unknown = set(biome) - set(tile_counts) - set(animal_counts)
    if unknown:
        raise GenerationError(f"unknown biome entries {sorted(unknown)}")
    if any(v < 0 for v in biome.values()):
        raise GenerationError("biome counts must be non-negative")
    n_placed = sum(tile_counts.values()) + sum(animal_counts.values())
    if n_placed > height * width - 1:
        raise GenerationError("biome does not fit in the world")

    agent_pos = (height // 2, width // 2)
    stream = RngStream(seed, ("worldgen",))
    for attempt in range(32):
        gen = stream.child("attempt", attempt).generator
        cells = [(r, c) for r in range(height) for c in range(width)
                 if (r, c) != agent_pos]
        order = gen.permutation(len(cells))
        tiles = np.zeros((height, width), dtype=np.int8)
        cursor = 0
        for name in sorted(tile_counts):
            for _ in range(tile_counts[name]):
                tiles[cells[order[cursor]]] = TILE_CODE[name]
                cursor += 1
        animals = []
        for kind in sorted(animal_counts):
            for _ in range(animal_counts[kind]):
                animals.append(Animal(kind=kind, pos=cells[order[cursor]]))
                cursor += 1
        world = World(width, height, tiles, agent_pos, A_NORTH, animals, seed)
        if _world_connected(world, tile_counts, animal_counts):
            return world
    raise GenerationError(f"no connected layout found for seed {seed}")


def _world_connected(world, tile_counts, animal_counts) -> bool:
    seen = reachable_from(world, world.agent_pos)
    for name, n in tile_counts.items():
        if n == 0 or name == "empty":
            continue
        cells = list(zip(*np.nonzero(world.tiles == TILE_CODE[name])))
        if not _has_adjacent(seen, cells):
            return False
    for kind, n in animal_counts.items():
        if n == 0:
            continue
        cells = [a.pos for a in world.animals if a.kind == kind]
        if not (_has_adjacent(seen, cells) or any(seen[c] for c in cells)):
            return False
    return True


def _has_pickaxe(inventory: dict) -> bool:
    req = mining_requires()["ore"]
    return any(inventory.get(tool, 0) > 0 for tool in req)


def _try_interact(world: World):
    fr, fc = world.faced_cell()
    if not world.in_bounds(fr, fc):
        return
    an = world.animal_at((fr, fc))
    inv = world.inventory
    if an is not None:
        item = ANIMAL_YIELD[an.kind]
        inv[item] = inv.get(item, 0) + 1
        return
    t = world.tiles[fr, fc]
    if t == TILE_TREE:
        inv["wood"] = inv.get("wood", 0) + 1
        world.tiles[fr, fc] = TILE_EMPTY
    elif t == TILE_STONE:
        inv["stone"] = inv.get("stone", 0) + 1
        world.tiles[fr, fc] = TILE_EMPTY
    elif t == TILE_ORE:
        if _has_pickaxe(inv):
            inv["ore"] = inv.get("ore", 0) + 1
            world.tiles[fr, fc] = TILE_EMPTY
    elif t == TILE_WATER:
        inv["water"] = inv.get("water", 0) + 1  # water never depletes


def _try_craft(world: World):
    st = world.active_subtask
    if st is None or st.kind != "craft":
        return
    inv = world.inventory
    if any(inv.get(item, 0) < n for item, n in st.inputs):
        return
    if st.table:
        fr, fc = world.faced_cell()
        if not (world.in_bounds(fr, fc) and world.tiles[fr, fc] == TILE_TABLE):
            return
    for item, n in st.inputs:
        inv[item] -= n
    out_n = craft_recipes()[st.item]["output_count"]
    inv[st.item] = inv.get(st.item, 0) + out_n


def _move_animals(world: World):
    if world.step_count % 2:
        return  # animals act on even ticks only: half the agent's speed
    ar_, ac_ = world.agent_pos
    occupied = {a.pos for a in world.animals}
    for i, an in enumerate(world.animals):
        gen = world.rng.child("animal", i, world.step_count).generator
        r, c = an.pos
        options = [(r, c)]
        for dr, dc in DIR_VECS:
            nr, nc = r + dr, c + dc
            if world.in_bounds(nr, nc) and world.tiles[nr, nc] == TILE_EMPTY \
                    and (nr, nc) not in occupied and (nr, nc) != world.agent_pos:
                options.append((nr, nc))
        if max(abs(r - ar_), abs(c - ac_)) <= 2:
            best = max(max(abs(p[0] - ar_), abs(p[1] - ac_)) for p in options)
            options = [p for p in options
                       if max(abs(p[0] - ar_), abs(p[1] - ac_)) == best]
        pick = options[int(gen.integers(len(options)))]
        occupied.discard(an.pos)
        an.pos = pick
        occupied.add(pick)


def step(world: World, action: int):
    """Advance one tick. Invalid moves are no-ops (facing still updates)."""
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"unknown action {action}")
    world.step_count += 1
    if action in MOVE_ACTIONS:
        world.facing = action
        dr, dc = DIR_VECS[action]
        nr, nc = world.agent_pos[0] + dr, world.agent_pos[1] + dc
        if world.in_bounds(nr, nc) and world.tiles[nr, nc] == TILE_EMPTY \
                and world.animal_at((nr, nc)) is None:
            world.agent_pos = (nr, nc)
    elif action == A_TURN_LEFT:
        world.facing = (world.facing - 1) % 4
    elif action == A_TURN_RIGHT:
        world.facing = (world.facing + 1) % 4
    elif action == A_INTERACT:
        _try_interact(world)
    elif action == A_CRAFT:
        _try_craft(world)
    _move_animals(world)
    st = world.active_subtask
    done = st is not None and st.goal(world.inventory)
    return world, (1.0 if done else 0.0), done


def _code_grid(world: World) -> np.ndarray:
    codes = world.tiles.astype(np.float64).copy()
    for an in world.animals:
        codes[an.pos] = ANIMAL_CODE[an.kind]
    return codes


def subtask_target_mask(world: World, subtask: Subtask | None) -> np.ndarray:
    """(H, W) mask of cells the active subtask points at."""
    mask = np.zeros((world.height, world.width), dtype=np.float64)
    if subtask is None or subtask.kind in ("invalid", "idle"):
        return mask
    if subtask.kind == "gather":
        mask[world.tiles == TILE_CODE[subtask.source]] = 1.0
    elif subtask.kind == "hunt":
        for an in world.animals:
            if an.kind == subtask.source:
                mask[an.pos] = 1.0
    elif subtask.kind == "craft" and subtask.table:
        mask[world.tiles == TILE_TABLE] = 1.0
    return mask


def observe(world: World, subtask: Subtask | None) -> np.ndarray:
    """3x15x15 egocentric view; values all within [0, 1].

    Channel 0: tile/animal codes (out-of-bounds renders as a distinct code).
    Channel 1: subtask target cells, with goal progress at the center.
    Channel 2: the faced cell.
    """
    R = VIEW_RADIUS
    side = 2 * R + 1
    r0, c0 = world.agent_pos
    img = np.zeros((3, side, side))

    codes = np.full((side, side), float(CODE_OOB))
    grid = _code_grid(world)
    tmask = subtask_target_mask(world, subtask)
    rlo, rhi = max(0, r0 - R), min(world.height, r0 + R + 1)
    clo, chi = max(0, c0 - R), min(world.width, c0 + R + 1)
    wr0, wc0 = rlo - (r0 - R), clo - (c0 - R)
    codes[wr0:wr0 + rhi - rlo, wc0:wc0 + chi - clo] = grid[rlo:rhi, clo:chi]
    img[0] = codes / CODE_SPAN
    img[1, wr0:wr0 + rhi - rlo, wc0:wc0 + chi - clo] = tmask[rlo:rhi, clo:chi]
    if subtask is not None:
        img[1, R, R] = subtask.progress(world.inventory)
    dr, dc = DIR_VECS[world.facing]
    img[2, R + dr, R + dc] = 1.0
    return img
