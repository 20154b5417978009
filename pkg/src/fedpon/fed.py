"""Federated rounds: local PPO on every agent, then FedAvg over actor and critic.

A round is bulk-synchronous. Every agent collects a rollout in its own
environment and runs its local PPO update; the server then averages the policy
and value parameters of each federation and broadcasts them back. The four
strategies differ only in whether parameters are averaged and in what happens
to the observation statistics:

* ``Independent``: no averaging; raw observations.
* ``FedAvgNoNorm``: averaging; raw observations.
* ``FedAvgPon``: averaging; each agent normalizes with its own statistics,
  which never leave the agent.
* ``FedAvgSharedOn``: averaging; statistics are averaged too and every agent
  continues from the shared values.

``run_round_lockstep`` steps several federations (typically one per seed) as
one stacked computation. Each agent's numbers are bit-identical to stepping
its federation alone, so batching is purely a speed optimization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import runstats
from .envs import Morphology, VecEnv
from .nn.optim import AdamState
from .nn.params import ParamVector, stack
from .numerics import uniform_mean
from .ppo import OptState, PpoConfig, collect_population, ppo_update_population
from .runstats import RunningStats
from .seeding import Stream, generator


class Strategy(str, enum.Enum):
    INDEPENDENT = "Independent"
    FEDAVG_NO_NORM = "FedAvgNoNorm"
    FEDAVG_PON = "FedAvgPon"
    FEDAVG_SHARED_ON = "FedAvgSharedOn"

    @property
    def federated(self) -> bool:
        return self is not Strategy.INDEPENDENT


@dataclass(frozen=True)
class FedOptions:
    aggregate_every: int = 1
    reset_optimizer: bool = True
    normalize_independent: bool = False

    def __post_init__(self) -> None:
        if self.aggregate_every < 1:
            raise ValueError("aggregate_every must be >= 1")

    def normalizes(self, strategy: Strategy) -> bool:
        if strategy is Strategy.INDEPENDENT:
            return self.normalize_independent
        return strategy is not Strategy.FEDAVG_NO_NORM


@dataclass
class AgentSlot:
    """Everything one agent owns between rounds."""

    agent_id: int
    policy: ParamVector
    value: ParamVector
    stats: RunningStats
    opt: OptState
    env: VecEnv
    action_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    partial_return: float = 0.0
    env_steps: int = 0
    shared_count: int = 0  # stats count received at the last SharedOn broadcast

    def __post_init__(self) -> None:
        if self.env.n != 1:
            raise ValueError("an agent owns exactly one environment")
        if self.stats.dim != self.env.obs_dim:
            raise ValueError("stats dimension must equal the observation dimension")

    @property
    def morphology(self) -> Morphology:
        return self.env.morphs[0]


def make_agents(
    morphs: Sequence[Morphology],
    policy: ParamVector,
    value: ParamVector,
    seed: int,
    stream_ids: Sequence[int] | None = None,
) -> list[AgentSlot]:
    """Agents starting from identical parameters with per-agent random streams.

    ``stream_ids`` picks which key each agent's streams derive from; it defaults
    to the agent index. Giving several agents the same id makes them replicas.
    """
    ids = list(range(len(morphs))) if stream_ids is None else list(stream_ids)
    if len(ids) != len(morphs):
        raise ValueError("one stream id per agent")
    agents = []
    for i, (morph, sid) in enumerate(zip(morphs, ids)):
        env = VecEnv([morph], [generator(seed, sid, Stream.ENV_RESET)])
        agents.append(
            AgentSlot(
                agent_id=i,
                policy=policy.copy(),
                value=value.copy(),
                stats=RunningStats.empty(morph.obs_dim),
                opt=OptState.fresh(policy, value),
                env=env,
                action_rng=generator(seed, sid, Stream.ACTION),
                shuffle_rng=generator(seed, sid, Stream.SHUFFLE),
            )
        )
    return agents


# --- server side -------------------------------------------------------------


def aggregate_fedavg(params_list: Sequence[ParamVector]) -> ParamVector:
    """Uniform average of every block (weights, biases and log_std)."""
    if len(params_list) == 0:
        raise ValueError("cannot aggregate an empty list")
    first = params_list[0]
    for p in params_list:
        if p.layout != first.layout or p.flat.shape != first.flat.shape:
            raise ValueError("shape mismatch in aggregate_fedavg")
    return ParamVector(first.layout, uniform_mean(np.stack([p.flat for p in params_list])))


def normalize_shared(stats: RunningStats, x: np.ndarray, epsilon: float = runstats.DEFAULT_EPSILON) -> np.ndarray:
    """Normalize a local observation with the server's averaged statistics."""
    return runstats.normalize(stats, x, epsilon)


def broadcast(
    global_params: tuple[ParamVector, ParamVector],
    agents: Sequence[AgentSlot],
    strategy: Strategy,
    shared_stats: RunningStats | None = None,
    reset_optimizer: bool = True,
) -> None:
    """Overwrite every agent's networks with the global pair.

    Under SharedOn the agents' statistics are replaced by ``shared_stats``
    (computed from the agents when not given). Independent is a no-op.
    """
    strategy = Strategy(strategy)
    if not strategy.federated:
        return
    policy, value = global_params
    for a in agents:
        if not (a.policy.same_shape(policy) and a.value.same_shape(value)):
            raise ValueError("shape mismatch in broadcast")
    if strategy is Strategy.FEDAVG_SHARED_ON and shared_stats is None:
        bases = {a.shared_count for a in agents}
        if len(bases) != 1:
            raise ValueError("agents disagree on the last shared statistics")
        shared_stats = runstats.merge_average([a.stats for a in agents], bases.pop())
    for a in agents:
        a.policy = policy.copy()
        a.value = value.copy()
        if reset_optimizer:
            a.opt = OptState.fresh(policy, value)
        if strategy is Strategy.FEDAVG_SHARED_ON:
            a.stats = shared_stats
            a.shared_count = shared_stats.count


# --- rounds ------------------------------------------------------------------


@dataclass(frozen=True)
class AgentRound:
    agent_id: int
    env_steps: int
    mean_return: float
    losses: dict[str, float]
    policy_w_norms: tuple[float, ...]
    value_w_norms: tuple[float, ...]
    stats_count: int
    stats_mean: np.ndarray
    stats_var: np.ndarray
    norm_obs_mean: np.ndarray
    norm_obs_var: np.ndarray
    raw_obs_var: np.ndarray

    @property
    def obs_mean_l2(self) -> float:
        return float(np.linalg.norm(self.stats_mean))

    @property
    def obs_var_l2(self) -> float:
        return float(np.linalg.norm(self.stats_var))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    strategy: Strategy
    aggregated: bool
    agents: tuple[AgentRound, ...] = field(default_factory=tuple)


def _stack_opt(opts: Sequence[OptState]) -> OptState:
    steps = {o.policy.t for o in opts} | {o.value.t for o in opts}
    if len(steps) != 1:
        raise ValueError("agents stepped in lockstep must share their optimizer step count")
    t = steps.pop()
    return OptState(
        AdamState(np.stack([o.policy.m for o in opts]), np.stack([o.policy.v for o in opts]), t),
        AdamState(np.stack([o.value.m for o in opts]), np.stack([o.value.v for o in opts]), t),
    )


def _local_round(agents: Sequence[AgentSlot], cfg: PpoConfig, normalize: bool) -> list[AgentRound]:
    """Collect and update every agent as one stacked computation."""
    env = VecEnv.concat([a.env for a in agents])
    policy = stack([a.policy for a in agents])
    value = stack([a.value for a in agents])
    carry = np.array([a.partial_return for a in agents])
    roll, stats, carry = collect_population(
        policy, value, [a.stats for a in agents], env, cfg.rollout_steps,
        [a.action_rng for a in agents], cfg, normalize, carry,
    )
    env.scatter([a.env for a in agents])
    policy, value, opt, report = ppo_update_population(
        policy, value, _stack_opt([a.opt for a in agents]), roll, cfg, [a.shuffle_rng for a in agents]
    )
    pol_norms, val_norms = policy.weight_norms(), value.weight_norms()
    records = []
    for i, a in enumerate(agents):
        a.policy = ParamVector(policy.layout, policy.flat[i].copy())
        a.value = ParamVector(value.layout, value.flat[i].copy())
        a.opt = OptState(
            AdamState(opt.policy.m[i].copy(), opt.policy.v[i].copy(), opt.policy.t),
            AdamState(opt.value.m[i].copy(), opt.value.v[i].copy(), opt.value.t),
        )
        a.stats = stats[i]
        a.partial_return = float(carry[i])
        a.env_steps += cfg.rollout_steps
        finished = roll.episode_returns[i]
        records.append(
            AgentRound(
                agent_id=a.agent_id,
                env_steps=a.env_steps,
                mean_return=float(np.mean(finished)) if finished else float("nan"),
                losses=report.row(i),
                policy_w_norms=tuple(map(float, pol_norms[i])),
                value_w_norms=tuple(map(float, val_norms[i])),
                stats_count=a.stats.count,
                stats_mean=a.stats.mean.copy(),
                stats_var=a.stats.var.copy(),
                norm_obs_mean=roll.norm_obs[i].mean(axis=0),
                norm_obs_var=roll.norm_obs[i].var(axis=0),
                raw_obs_var=roll.raw_obs[i].var(axis=0),
            )
        )
    return records


def run_round_lockstep(
    groups: Sequence[Sequence[AgentSlot]],
    strategy: Strategy,
    cfg: PpoConfig,
    round_index: int = 0,
    options: FedOptions = FedOptions(),
) -> list[RoundRecord]:
    """One round for several independent federations sharing a strategy."""
    strategy = Strategy(strategy)
    everyone = [a for g in groups for a in g]
    if not everyone:
        raise ValueError("no agents")
    per_agent = _local_round(everyone, cfg, options.normalizes(strategy))
    aggregate = strategy.federated and (round_index + 1) % options.aggregate_every == 0
    records, start = [], 0
    for g in groups:
        if aggregate:
            global_pair = (aggregate_fedavg([a.policy for a in g]), aggregate_fedavg([a.value for a in g]))
            broadcast(global_pair, g, strategy, reset_optimizer=options.reset_optimizer)
        records.append(RoundRecord(round_index, strategy, aggregate, tuple(per_agent[start : start + len(g)])))
        start += len(g)
    return records


def run_round(
    agents: Sequence[AgentSlot],
    strategy: Strategy,
    cfg: PpoConfig,
    round_index: int = 0,
    options: FedOptions = FedOptions(),
) -> RoundRecord:
    """Collect, update locally, then aggregate and broadcast (unless Independent)."""
    return run_round_lockstep([agents], strategy, cfg, round_index, options)[0]
