"""Seed derivation.

One master seed per run.  Child seeds come from numpy's ``SeedSequence``
with a spawn key ``(stream, index)``: a hash-based splittable counter, so a
task's seed depends only on (master, stream, index) and never on how many
other tasks were generated before it.
"""
from __future__ import annotations

import numpy as np

# streams keep unrelated consumers from sharing child seeds
TASKS = 0
MODEL_INIT = 1
BATCHES = 2
AUGMENT = 3
EVAL = 4
FAMILY = 5  # structure shared by every task of a distribution


def child_seed(master: int, stream: int, index: int = 0) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(int(stream), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def task_seed(master: int, task_id: int) -> int:
    return child_seed(master, TASKS, task_id)


def child_rng(master: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stream, index))
