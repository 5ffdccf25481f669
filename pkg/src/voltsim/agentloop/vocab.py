"""Planner token vocabulary and the golden plan corpus.

A training sequence spells out one task with a satisfied prefix:

    <bos> task <sep> done_1 ... done_m <resume> rest_1 ... rest_k <eos>

The loss mask covers only the tokens after <resume>, so the model learns to
continue from any progress point. Every (task, prefix length) pair appears
exactly once, which makes fault-free decoding on the corpus an exact-match
criterion rather than a statistical one.
"""
from __future__ import annotations

import numpy as np

from ..gridcraft import all_subtask_uids, task_names, tasks

BOS, SEP, RESUME, EOS = "<bos>", "<sep>", "<resume>", "<eos>"
SPECIALS = (BOS, SEP, RESUME, EOS)

PLAN_MAX_LEN = 32


class Vocab:
    """Fixed token table: specials, then task names, then subtask uids."""

    def __init__(self):
        self.tokens = list(SPECIALS) + task_names() + all_subtask_uids()
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in vocabulary") from None

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def resume_id(self) -> int:
        return self.index[RESUME]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]


def plan_prompt(vocab: Vocab, task_name: str, satisfied=()) -> list:
    """Token ids of the decoding prompt for a task with finished subtasks."""
    if task_name not in tasks():
        raise ValueError(f"unknown task {task_name!r}")
    ids = [vocab.bos_id, vocab.encode(task_name), vocab.sep_id]
    ids += [vocab.encode(uid) for uid in satisfied]
    ids.append(vocab.resume_id)
    return ids


def build_plan_corpus(vocab: Vocab):
    """All (ids, mask) pairs: every task at every prefix length."""
    corpus = []
    for name in task_names():
        recipe = [st.uid for st in tasks()[name].recipe]
        for m in range(len(recipe) + 1):
            ids = plan_prompt(vocab, name, recipe[:m])
            cut = len(ids)  # loss starts right after <resume>
            ids = ids + [vocab.encode(u) for u in recipe[m:]] + [vocab.eos_id]
            mask = [0.0] * cut + [1.0] * (len(ids) - cut)
            corpus.append((np.array(ids, dtype=np.int64),
                           np.array(mask, dtype=np.float64)))
    return corpus


def satisfied_prefix(task_name: str, inventory: dict) -> list:
    """Longest recipe prefix whose goals all hold on the inventory.

    Replanning prompts use this: goals are checked in recipe order and the
    scan stops at the first unmet one, so the prompt always matches a prefix
    the corpus trained on.
    """
    out = []
    for st in tasks()[task_name].recipe:
        if not st.goal(inventory):
            break
        out.append(st.uid)
    return out
