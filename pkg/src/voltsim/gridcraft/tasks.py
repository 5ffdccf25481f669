"""Task roster: subtask goals, craft recipes, prompt embeddings.

Definitions live in tasks.json next to this module so the roster is data,
not code. A subtask uid is one of "gather:<item>:<count>", "hunt:<item>:<count>"
or "craft:<output>"; anything else parses to an invalid pseudo-subtask whose
goal never holds, so corrupted plans burn steps instead of raising.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..errmodel import RngStream

PROMPT_DIM = 512
# fixed environment-level seed: embeddings are part of the task definition
_EMBED_SEED = 20260101

_raw = None


def _data() -> dict:
    global _raw
    if _raw is None:
        text = resources.files("voltsim.gridcraft").joinpath("tasks.json").read_text()
        _raw = json.loads(text)
        if _raw.get("schema_version") != 1:
            raise ValueError("unsupported tasks.json schema")
    return _raw


def item_sources() -> dict:
    return _data()["item_sources"]


def mining_requires() -> dict:
    return _data()["mining_requires"]


def craft_recipes() -> dict:
    return _data()["craft_recipes"]


def biome_defaults() -> dict:
    return dict(_data()["biome_defaults"])


@dataclass(frozen=True)
class Subtask:
    uid: str
    kind: str  # {"gather", "hunt", "craft", "invalid", "idle"}
    item: str | None = None
    count: int = 0
    source: str | None = None  # tile name or animal kind yielding the item
    inputs: tuple | None = None  # craft only: ((item, count), ...)
    table: bool = False

    def goal(self, inventory: dict) -> bool:
        if self.kind in ("invalid", "idle"):
            return False
        return inventory.get(self.item, 0) >= self.count

    def progress(self, inventory: dict) -> float:
        if self.kind in ("invalid", "idle") or self.count == 0:
            return 0.0
        return min(inventory.get(self.item, 0) / self.count, 1.0)

    def prompt_embedding(self) -> np.ndarray:
        return prompt_embedding(self.uid)


_EMB_CACHE: dict = {}


def prompt_embedding(uid: str) -> np.ndarray:
    """Fixed unit vector per subtask uid (any string gets one)."""
    if uid not in _EMB_CACHE:
        gen = RngStream(_EMBED_SEED, ("prompt", uid)).generator
        v = gen.normal(size=PROMPT_DIM)
        _EMB_CACHE[uid] = v / np.linalg.norm(v)
    return _EMB_CACHE[uid]


_SUBTASK_CACHE: dict = {}


def parse_subtask(uid: str) -> Subtask:
    if uid in _SUBTASK_CACHE:
        return _SUBTASK_CACHE[uid]
    st = _parse_subtask(uid)
    _SUBTASK_CACHE[uid] = st
    return st


def _parse_subtask(uid: str) -> Subtask:
    if uid == "idle":
        return Subtask(uid=uid, kind="idle")
    parts = uid.split(":")
    sources = item_sources()
    if len(parts) == 3 and parts[0] in ("gather", "hunt"):
        kind, item, count = parts
        if item in sources and count.isdigit() and int(count) > 0:
            return Subtask(
                uid=uid, kind=kind, item=item, count=int(count), source=sources[item]
            )
    if len(parts) == 2 and parts[0] == "craft":
        recipes = craft_recipes()
        if parts[1] in recipes:
            r = recipes[parts[1]]
            return Subtask(
                uid=uid,
                kind="craft",
                item=parts[1],
                count=1,
                inputs=tuple(sorted(r["inputs"].items())),
                table=r["table"],
            )
    return Subtask(uid=uid, kind="invalid")


@dataclass(frozen=True)
class TaskDef:
    name: str
    recipe: tuple  # ordered Subtasks

    def goal(self, inventory: dict) -> bool:
        return self.recipe[-1].goal(inventory)

    def required_biome(self) -> dict:
        """Minimum tile/animal counts for one fault-free pass of the recipe."""
        need: dict = {}
        for st in self.recipe:
            if st.kind == "gather":
                src = st.source
                # water persists; one tile suffices regardless of count
                amount = 1 if src == "water" else st.count
                need[src] = need.get(src, 0) + amount
            elif st.kind == "hunt":
                need[st.source] = max(need.get(st.source, 0), 1)
            elif st.kind == "craft" and st.table:
                need["crafting_table"] = max(need.get("crafting_table", 0), 1)
        return need


_TASKS: dict | None = None


def tasks() -> dict:
    global _TASKS
    if _TASKS is None:
        _TASKS = {}
        for name, uids in _data()["tasks"].items():
            recipe = tuple(parse_subtask(u) for u in uids)
            bad = [s.uid for s in recipe if s.kind == "invalid"]
            if bad:
                raise ValueError(f"task {name!r} has unparseable subtasks {bad}")
            _TASKS[name] = TaskDef(name=name, recipe=recipe)
    return _TASKS


def task_names() -> list:
    return sorted(tasks())


def all_subtask_uids() -> list:
    """Sorted unique subtask uids across every registered recipe."""
    uids = set()
    for t in tasks().values():
        uids.update(s.uid for s in t.recipe)
    return sorted(uids)
