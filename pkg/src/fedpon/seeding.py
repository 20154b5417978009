"""Independent random streams keyed by (seed, agent, purpose)."""

from __future__ import annotations

import enum

import numpy as np


class Stream(enum.IntEnum):
    INIT = 0
    MORPHOLOGY = 1
    ENV_RESET = 2
    ACTION = 3
    SHUFFLE = 4
    EVAL = 5


def seed_sequence(seed: int, agent_id: int, stream: Stream, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(agent_id), int(stream), *map(int, extra)))


def generator(seed: int, agent_id: int, stream: Stream, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, agent_id, stream, *extra))
