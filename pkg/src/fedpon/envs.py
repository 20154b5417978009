"""Heterogeneous toy continuous-control tasks.

Agents share observation/action spaces and the reward function; only the
morphology parameters (and therefore the transition dynamics or the
observation emission) differ between them.

``ScaledPointMass``: 2-D damped point mass driven to the origin, observed
through a per-agent gain ``obs_scale``. ``HeteroPendulum``: torque-limited
swing-up with per-agent pole length and mass.

Dynamics kernels operate on arrays with a leading agent axis so a whole
population steps at once; the single-environment ``reset``/``step`` functions
call the same kernels with one agent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

HORIZON = 200
DT = 0.05
GRAVITY = 9.81
POINTMASS_DAMPING = 0.95
PENDULUM_MAX_SPEED = 8.0


class EnvKind(str, enum.Enum):
    SCALED_POINT_MASS = "ScaledPointMass"
    HETERO_PENDULUM = "HeteroPendulum"


DEFAULT_RANGES: dict[EnvKind, dict[str, tuple[float, float]]] = {
    EnvKind.SCALED_POINT_MASS: {"obs_scale": (1.0, 10.0)},
    EnvKind.HETERO_PENDULUM: {"pole_length": (0.5, 1.5), "pole_mass": (0.5, 1.5)},
}

OBS_DIM = {EnvKind.SCALED_POINT_MASS: 4, EnvKind.HETERO_PENDULUM: 3}
ACT_DIM = {EnvKind.SCALED_POINT_MASS: 2, EnvKind.HETERO_PENDULUM: 1}
ACT_BOUND = {EnvKind.SCALED_POINT_MASS: 1.0, EnvKind.HETERO_PENDULUM: 2.0}


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class Morphology:
    env_kind: EnvKind
    params: Mapping[str, float]
    agent_id: int = 0

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.env_kind]

    @property
    def act_dim(self) -> int:
        return ACT_DIM[self.env_kind]

    def to_dict(self) -> dict[str, Any]:
        return {"env_kind": self.env_kind.value, "params": dict(self.params), "agent_id": self.agent_id}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Morphology":
        return cls(EnvKind(d["env_kind"]), {k: float(v) for k, v in d["params"].items()}, int(d["agent_id"]))


@dataclass
class EnvState:
    internal: np.ndarray
    step_counter: int = 0

    @property
    def done(self) -> bool:
        return self.step_counter >= HORIZON


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


def _check_ranges(kind: EnvKind, ranges: Mapping[str, Sequence[float]]) -> dict[str, tuple[float, float]]:
    merged = dict(DEFAULT_RANGES[kind])
    for name, pair in ranges.items():
        if name not in merged:
            raise ValueError(f"unknown morphology parameter {name!r} for {kind.value}")
        lo, hi = float(pair[0]), float(pair[1])
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise ValueError(f"invalid range for {name}: [{lo}, {hi}]")
        if lo <= 0:
            raise ValueError(f"range for {name} must be positive")
        merged[name] = (lo, hi)
    return merged


def sample_morphologies(
    kind: EnvKind | str,
    n_agents: int,
    ranges: Mapping[str, Sequence[float]] | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> list[Morphology]:
    kind = EnvKind(kind)
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    bounds = _check_ranges(kind, ranges or {})
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_agents):
        params = {name: float(rng.uniform(lo, hi)) if lo < hi else lo for name, (lo, hi) in bounds.items()}
        out.append(Morphology(kind, params, i))
    return out


def fixed_morphologies(kind: EnvKind | str, values: Sequence[Mapping[str, float]]) -> list[Morphology]:
    """Morphologies with explicitly chosen parameters (e.g. scales 1, 5, 10)."""
    kind = EnvKind(kind)
    out = []
    for i, v in enumerate(values):
        params = {name: float(v.get(name, lo)) for name, (lo, _) in DEFAULT_RANGES[kind].items()}
        out.append(Morphology(kind, params, i))
    return out


# --- batched kernels ---------------------------------------------------------


def _morph_arrays(kind: EnvKind, morphs: Sequence[Morphology]) -> dict[str, np.ndarray]:
    names = DEFAULT_RANGES[kind].keys()
    return {name: np.array([m.params[name] for m in morphs], dtype=np.float64)[:, None] for name in names}


def initial_internal(kind: EnvKind, rng: np.random.Generator) -> np.ndarray:
    if kind is EnvKind.SCALED_POINT_MASS:
        return rng.uniform(-0.5, 0.5, size=4)  # p (2), v (2)
    theta = rng.uniform(np.pi - 0.1, np.pi + 0.1)
    theta_dot = rng.uniform(-0.05, 0.05)
    return np.array([theta, theta_dot])


def observe(kind: EnvKind, internal: np.ndarray, morph_arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Observations for internal states of shape (n, state_dim)."""
    if kind is EnvKind.SCALED_POINT_MASS:
        return morph_arrays["obs_scale"] * internal
    theta, theta_dot = internal[:, :1], internal[:, 1:2]
    return np.concatenate([np.cos(theta), np.sin(theta), theta_dot], axis=1)


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def dynamics(
    kind: EnvKind, internal: np.ndarray, action: np.ndarray, morph_arrays: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """One transition for a batch. Returns (next_internal, reward); actions are clipped here."""
    a = np.clip(action, -ACT_BOUND[kind], ACT_BOUND[kind])
    if kind is EnvKind.SCALED_POINT_MASS:
        p, v = internal[:, :2], internal[:, 2:]
        reward = -np.sum(p * p, axis=1) - 0.01 * np.sum(a * a, axis=1)
        nxt = np.empty_like(internal)
        np.multiply(POINTMASS_DAMPING, v, out=nxt[:, 2:])
        nxt[:, 2:] += DT * a
        np.add(p, DT * nxt[:, 2:], out=nxt[:, :2])
        return nxt, reward
    theta, theta_dot = internal[:, 0], internal[:, 1]
    tau = a[:, 0]
    length = morph_arrays["pole_length"][:, 0]
    mass = morph_arrays["pole_mass"][:, 0]
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * tau**2)
    theta_acc = 3.0 * GRAVITY / (2.0 * length) * np.sin(theta) + 3.0 * tau / (mass * length**2)
    theta_dot_next = np.clip(theta_dot + DT * theta_acc, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    theta_next = theta + DT * theta_dot_next
    return np.stack([theta_next, theta_dot_next], axis=1), reward


# --- single-environment interface --------------------------------------------


def reset(morph: Morphology, episode_seed: int | np.random.SeedSequence) -> tuple[EnvState, np.ndarray]:
    internal = initial_internal(morph.env_kind, np.random.default_rng(episode_seed))
    return EnvState(internal), observe(morph.env_kind, internal[None, :], _morph_arrays(morph.env_kind, [morph]))[0]


def step(state: EnvState, morph: Morphology, action: np.ndarray) -> tuple[EnvState, StepResult]:
    if state.done:
        raise EpisodeFinished("episode finished")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (morph.act_dim,) or not np.all(np.isfinite(action)):
        raise ValueError(f"action must be a finite vector of length {morph.act_dim}")
    arrays = _morph_arrays(morph.env_kind, [morph])
    nxt, reward = dynamics(morph.env_kind, state.internal[None, :], action[None, :], arrays)
    new_state = EnvState(nxt[0], state.step_counter + 1)
    obs = observe(morph.env_kind, nxt, arrays)[0]
    return new_state, StepResult(obs, float(reward[0]), new_state.done)


@dataclass
class VecEnv:
    """One environment per agent, stepped together.

    Each agent owns its reset stream; episode seeds are drawn from it, so an
    agent's trajectory does not depend on which other agents share the batch.
    """

    morphs: list[Morphology]
    reset_rngs: list[np.random.Generator]
    internal: np.ndarray = field(init=False)
    step_counter: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        kinds = {m.env_kind for m in self.morphs}
        if len(kinds) != 1:
            raise ValueError("all agents must share one env kind")
        self.kind = kinds.pop()
        self.arrays = _morph_arrays(self.kind, self.morphs)
        self.internal = np.stack([self._fresh(i) for i in range(len(self.morphs))])
        self.step_counter = np.zeros(len(self.morphs), dtype=np.int64)

    @classmethod
    def concat(cls, envs: Sequence["VecEnv"]) -> "VecEnv":
        """Join populations without touching their reset streams or current episodes."""
        out = cls.__new__(cls)
        out.morphs = [m for e in envs for m in e.morphs]
        out.reset_rngs = [r for e in envs for r in e.reset_rngs]
        kinds = {e.kind for e in envs}
        if len(kinds) != 1:
            raise ValueError("all agents must share one env kind")
        out.kind = kinds.pop()
        out.arrays = _morph_arrays(out.kind, out.morphs)
        out.internal = np.concatenate([e.internal for e in envs])
        out.step_counter = np.concatenate([e.step_counter for e in envs])
        return out

    def scatter(self, envs: Sequence["VecEnv"]) -> None:
        """Write the current episode state back into the populations it was joined from."""
        start = 0
        for e in envs:
            stop = start + e.n
            e.internal = self.internal[start:stop].copy()
            e.step_counter = self.step_counter[start:stop].copy()
            start = stop

    @property
    def n(self) -> int:
        return len(self.morphs)

    @property
    def obs_dim(self) -> int:
        return OBS_DIM[self.kind]

    @property
    def act_dim(self) -> int:
        return ACT_DIM[self.kind]

    def _fresh(self, i: int) -> np.ndarray:
        seed = int(self.reset_rngs[i].integers(2**63))
        return initial_internal(self.kind, np.random.default_rng(seed))

    def observe(self) -> np.ndarray:
        return observe(self.kind, self.internal, self.arrays)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance every agent; returns (reward, done). Finished agents must be reset."""
        if np.any(self.step_counter >= HORIZON):
            raise EpisodeFinished("episode finished")
        self.internal, reward = dynamics(self.kind, self.internal, actions, self.arrays)
        self.step_counter = self.step_counter + 1
        return reward, self.step_counter >= HORIZON

    def reset_done(self, done: np.ndarray) -> None:
        for i in np.flatnonzero(done):
            self.internal[i] = self._fresh(i)
            self.step_counter[i] = 0


def observation_stats_truth(
    morph: Morphology, n: int, seed: int | np.random.SeedSequence = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Empirical observation mean/variance under a uniform-random policy."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    reset_ss, act_ss = ss.spawn(2)
    env = VecEnv([morph], [np.random.default_rng(reset_ss)])
    act_rng = np.random.default_rng(act_ss)
    bound = ACT_BOUND[morph.env_kind]
    obs = np.empty((n, morph.obs_dim))
    for t in range(n):
        obs[t] = env.observe()[0]
        _, done = env.step(act_rng.uniform(-bound, bound, size=(1, morph.act_dim)))
        env.reset_done(done)
    return obs.mean(axis=0), obs.var(axis=0)
