"""PPO-Clip local training with optional per-agent observation normalization.

Collection and updates run on a stack of agents at once (leading axis ``n``);
each agent has its own parameters, statistics, environment and random
streams, and its results do not depend on the other agents in the stack.
The single-agent entry points (``collect_rollout``, ``ppo_update``) are the
same code with ``n == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import runstats
from .envs import ACT_BOUND, VecEnv
from .nn import autodiff as ad
from .nn.network import (
    GraphParams,
    entropy_graph,
    log_prob_batch,
    log_prob_graph,
    mlp_forward,
    policy_log_std,
    policy_mean,
    value_batch,
    value_graph,
)
from .nn.optim import AdamState, adam_step
from .nn.params import ParamVector, stack, unstack
from .runstats import RunningStats

STATS_PER_STEP = "step"
STATS_PER_ROLLOUT = "rollout"


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    batch_size: int = 64
    local_epochs: int = 10
    rollout_steps: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    advantage_norm: bool = True
    max_grad_norm: float = 0.5
    epsilon: float = runstats.DEFAULT_EPSILON
    stats_update: str = STATS_PER_STEP
    norm_clip: float | None = None

    def __post_init__(self) -> None:
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.batch_size < 1 or self.batch_size > self.rollout_steps:
            raise ValueError("need 1 <= batch_size <= rollout_steps")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.stats_update not in (STATS_PER_STEP, STATS_PER_ROLLOUT):
            raise ValueError(f"stats_update must be {STATS_PER_STEP!r} or {STATS_PER_ROLLOUT!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        return cls(**d)


@dataclass(frozen=True)
class Transition:
    raw_obs: np.ndarray
    norm_obs: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    done: bool
    value: float


@dataclass
class Trajectory:
    """One agent's rollout, stored column-wise; ``T`` transitions."""

    raw_obs: np.ndarray
    norm_obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __getitem__(self, t: int) -> Transition:
        return Transition(
            self.raw_obs[t], self.norm_obs[t], self.actions[t], float(self.log_probs[t]),
            float(self.rewards[t]), bool(self.dones[t]), float(self.values[t]),
        )

    @property
    def transitions(self) -> list[Transition]:
        return [self[t] for t in range(len(self))]


@dataclass
class Rollout:
    """Stacked trajectories of ``n`` agents, arrays shaped (n, T, ...)."""

    raw_obs: np.ndarray
    norm_obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    bootstrap_values: np.ndarray
    episode_returns: list[list[float]]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            self.raw_obs[i], self.norm_obs[i], self.actions[i], self.log_probs[i], self.rewards[i],
            self.dones[i], self.values[i], float(self.bootstrap_values[i]), list(self.episode_returns[i]),
        )

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "Rollout":
        return cls(
            np.stack([t.raw_obs for t in trajs]), np.stack([t.norm_obs for t in trajs]),
            np.stack([t.actions for t in trajs]), np.stack([t.log_probs for t in trajs]),
            np.stack([t.rewards for t in trajs]), np.stack([t.dones for t in trajs]),
            np.stack([t.values for t in trajs]), np.array([t.bootstrap_value for t in trajs]),
            [list(t.episode_returns) for t in trajs],
        )


class StatsStack:
    """Mutable stacked RunningStats used inside the collection loop."""

    def __init__(self, stats: Sequence[RunningStats]):
        self.count = np.array([s.count for s in stats], dtype=np.int64)
        self.mean = np.stack([s.mean for s in stats])
        self.var = np.stack([s.var for s in stats])

    def absorb_one(self, x: np.ndarray) -> None:
        # batch of one observation per agent: mean x, variance 0
        count, self.mean, self.var = runstats.combine(
            self.count[:, None], self.mean, self.var, 1, x, np.zeros_like(x)
        )
        self.count = count[:, 0]

    def absorb_batch(self, batch: np.ndarray) -> None:
        """Absorb a (n, B, d) block, B rows per agent."""
        b = batch.shape[1]
        count, self.mean, self.var = runstats.combine(
            self.count[:, None], self.mean, self.var, b, batch.mean(axis=1), batch.var(axis=1)
        )
        self.count = count[:, 0]

    def normalize(self, x: np.ndarray, epsilon: float, norm_clip: float | None) -> np.ndarray:
        if np.any(self.count == 0):
            raise runstats.StatsError("normalize before any update")
        out = (x - self.mean) / np.sqrt(self.var + epsilon)
        if norm_clip is not None:
            out = np.clip(out, -norm_clip, norm_clip)
        return out

    def to_list(self) -> list[RunningStats]:
        return [RunningStats(int(c), m.copy(), v.copy()) for c, m, v in zip(self.count, self.mean, self.var)]


def collect_population(
    policy: ParamVector,
    value: ParamVector,
    stats: Sequence[RunningStats],
    env: VecEnv,
    n_steps: int,
    action_rngs: Sequence[np.random.Generator],
    cfg: PpoConfig,
    normalize: bool = True,
    ep_returns: np.ndarray | None = None,
) -> tuple[Rollout, list[RunningStats], np.ndarray]:
    """Step ``n`` agents for ``n_steps`` in lockstep.

    ``policy``/``value`` are stacked ParamVectors. With ``normalize`` each
    agent's observation is absorbed into its own statistics and then normalized
    with the updated statistics before the networks see it. ``ep_returns``
    carries partial episode returns across calls. Returns the rollout, the new
    statistics, and the partial returns.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n, d, a = env.n, env.obs_dim, env.act_dim
    if policy.lead_shape != (n,) or value.lead_shape != (n,):
        raise ValueError("stacked parameters must match the number of environments")
    pol_layers = policy.layers
    log_std = policy_log_std(policy)
    std = np.exp(log_std)
    st = StatsStack(stats)
    per_step = cfg.stats_update == STATS_PER_STEP
    if normalize and not per_step and np.any(st.count == 0):
        st.absorb_one(env.observe())

    raw = np.empty((n, n_steps, d))
    norm = np.empty((n, n_steps, d))
    means = np.empty((n, n_steps, a))
    rew = np.empty((n, n_steps))
    dones = np.zeros((n, n_steps), dtype=bool)
    ep_ret = np.zeros(n) if ep_returns is None else ep_returns.copy()
    finished: list[list[float]] = [[] for _ in range(n)]
    noise = np.stack([r.standard_normal((n_steps, a)) for r in action_rngs])
    acts = noise * std[:, None, :]

    for t in range(n_steps):
        x = env.observe()
        raw[:, t] = x
        if normalize:
            if per_step:
                st.absorb_one(x)
            x = st.normalize(x, cfg.epsilon, cfg.norm_clip)
        norm[:, t] = x
        mu = mlp_forward(pol_layers, x[:, None, :])[:, 0]
        means[:, t] = mu
        act = acts[:, t]
        act += mu
        r, done = env.step(act)
        rew[:, t] = r
        dones[:, t] = done
        ep_ret += r
        if done.any():
            for i in np.flatnonzero(done):
                finished[i].append(float(ep_ret[i]))
                ep_ret[i] = 0.0
            env.reset_done(done)

    x_last = env.observe()
    if normalize:
        if not per_step:
            st.absorb_batch(raw)
        x_last = st.normalize(x_last, cfg.epsilon, cfg.norm_clip)
    # densities and values in one batched pass over the rollout
    logp = log_prob_batch(means, log_std, acts)
    vals = value_batch(value, norm)
    boot = value_batch(value, x_last[:, None, :])[:, 0]
    roll = Rollout(raw, norm, acts, logp, rew, dones, vals, boot, finished)
    new_stats = st.to_list() if normalize else list(stats)
    return roll, new_stats, ep_ret


def collect_rollout(
    policy: ParamVector,
    value: ParamVector,
    stats: RunningStats,
    env: VecEnv,
    n_steps: int,
    rng: np.random.Generator,
    cfg: PpoConfig | None = None,
    normalize: bool = True,
) -> tuple[Trajectory, RunningStats]:
    """Single-agent collection; ``env`` is a one-agent VecEnv."""
    cfg = cfg or PpoConfig()
    roll, new_stats, _ = collect_population(
        stack([policy]), stack([value]), [stats], env, n_steps, [rng], cfg, normalize
    )
    return roll.trajectory(0), new_stats[0]


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float, lam: float):
    """GAE over the last axis; leading axes are independent trajectories."""
    T = rewards.shape[-1]
    adv = np.empty_like(rewards)
    notdone = 1.0 - dones.astype(np.float64)
    next_value = np.asarray(bootstrap, dtype=np.float64)
    last = np.zeros(rewards.shape[:-1])
    for t in range(T - 1, -1, -1):
        delta = rewards[..., t] + gamma * next_value * notdone[..., t] - values[..., t]
        last = delta + gamma * lam * notdone[..., t] * last
        adv[..., t] = last
        next_value = values[..., t]
    return adv, adv + values


def compute_gae(traj: Trajectory, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return gae(traj.rewards, traj.values, traj.dones, np.float64(traj.bootstrap_value), gamma, lam)


@dataclass
class LossReport:
    policy_loss: np.ndarray
    value_loss: np.ndarray
    entropy: np.ndarray
    approx_kl: np.ndarray
    clip_fraction: np.ndarray

    def row(self, i: int) -> dict[str, float]:
        return {k: float(getattr(self, k)[i]) for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")}


def ppo_loss(
    pol: GraphParams,
    val: GraphParams,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
) -> tuple[ad.Tensor, dict[str, np.ndarray]]:
    """Clipped surrogate + value loss, summed over stacked agents.

    Batch arrays are (n, B, ...) for stacked parameters or (B, ...) otherwise;
    per-agent terms average over the batch axis.
    """
    logp = log_prob_graph(pol, obs, actions)
    ratio = ad.exp(logp - old_log_probs)
    surr = ad.minimum(ratio * advantages, ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * advantages)
    policy_loss = -ad.mean(surr, axis=-1)
    v = value_graph(val, obs)
    value_loss = ad.mean(ad.square(v - returns), axis=-1)
    total = policy_loss + cfg.value_coef * value_loss
    entropy = entropy_graph(pol)
    if cfg.entropy_coef:
        total = total - cfg.entropy_coef * entropy
    log_ratio = logp.value - old_log_probs
    info = {
        "policy_loss": policy_loss.value,
        "value_loss": value_loss.value,
        "entropy": entropy.value,
        "approx_kl": np.mean(np.exp(log_ratio) - 1.0 - log_ratio, axis=-1),
        "clip_fraction": np.mean(np.abs(ratio.value - 1.0) > cfg.clip, axis=-1),
    }
    return ad.sum(total), info


def loss_and_grads(
    policy: ParamVector, value: ParamVector, obs, actions, old_log_probs, advantages, returns, cfg: PpoConfig
) -> tuple[float, ParamVector, ParamVector, dict[str, np.ndarray]]:
    pol, val = GraphParams(policy), GraphParams(value)
    loss, info = ppo_loss(pol, val, obs, actions, old_log_probs, advantages, returns, cfg)
    ad.backward(loss)
    return float(loss.value), pol.grad_vector(), val.grad_vector(), info


def _clip_grad_norm(gp: np.ndarray, gv: np.ndarray, max_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Joint per-agent gradient-norm clipping; rows are agents."""
    scale = np.empty(gp.shape[0])
    for i in range(gp.shape[0]):
        norm = np.sqrt(np.dot(gp[i], gp[i]) + np.dot(gv[i], gv[i]))
        scale[i] = min(1.0, max_norm / (norm + 1e-6))
    if np.all(scale == 1.0):
        return gp, gv
    return gp * scale[:, None], gv * scale[:, None]


@dataclass
class OptState:
    policy: AdamState
    value: AdamState

    @classmethod
    def fresh(cls, policy: ParamVector, value: ParamVector) -> "OptState":
        return cls(AdamState.zeros_like(policy), AdamState.zeros_like(value))


def ppo_update_population(
    policy: ParamVector,
    value: ParamVector,
    opt: OptState,
    rollout: Rollout,
    cfg: PpoConfig,
    shuffle_rngs: Sequence[np.random.Generator],
) -> tuple[ParamVector, ParamVector, OptState, LossReport]:
    n, T = rollout.rewards.shape
    adv, ret = gae(rollout.rewards, rollout.values, rollout.dones, rollout.bootstrap_values, cfg.gamma, cfg.lam)
    if cfg.advantage_norm:
        adv = (adv - adv.mean(axis=1, keepdims=True)) / (adv.std(axis=1, keepdims=True) + 1e-8)
    rows = np.arange(n)[:, None]
    sums = {k: np.zeros(n) for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")}
    n_batches = 0
    for _ in range(cfg.local_epochs):
        perms = np.stack([r.permutation(T) for r in shuffle_rngs])
        # one gather per epoch; minibatches are then contiguous slices
        obs_e = rollout.norm_obs[rows, perms]
        act_e = rollout.actions[rows, perms]
        logp_e = rollout.log_probs[rows, perms]
        adv_e = adv[rows, perms]
        ret_e = ret[rows, perms]
        for start in range(0, T, cfg.batch_size):
            mb = slice(start, start + cfg.batch_size)
            _, gp, gv, info = loss_and_grads(
                policy, value, obs_e[:, mb], act_e[:, mb], logp_e[:, mb], adv_e[:, mb], ret_e[:, mb], cfg
            )
            gpf, gvf = _clip_grad_norm(gp.flat, gv.flat, cfg.max_grad_norm)
            policy, pstate = adam_step(policy, ParamVector(policy.layout, gpf), opt.policy, cfg.lr)
            value, vstate = adam_step(value, ParamVector(value.layout, gvf), opt.value, cfg.lr)
            opt = OptState(pstate, vstate)
            for k in sums:
                sums[k] += info[k]
            n_batches += 1
    report = LossReport(**{k: v / n_batches for k, v in sums.items()})
    return policy, value, opt, report


def ppo_update(
    policy: ParamVector,
    value: ParamVector,
    opt: OptState,
    traj: Trajectory,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> tuple[ParamVector, ParamVector, OptState, dict[str, float]]:
    """Single-agent PPO update (the stacked routine with one agent)."""
    opt_stacked = OptState(
        AdamState(opt.policy.m[None], opt.policy.v[None], opt.policy.t),
        AdamState(opt.value.m[None], opt.value.v[None], opt.value.t),
    )
    p, v, o, report = ppo_update_population(
        stack([policy]), stack([value]), opt_stacked, Rollout.from_trajectories([traj]), cfg, [rng]
    )
    opt_out = OptState(
        AdamState(o.policy.m[0], o.policy.v[0], o.policy.t), AdamState(o.value.m[0], o.value.v[0], o.value.t)
    )
    return unstack(p)[0], unstack(v)[0], opt_out, report.row(0)


def random_policy_return(env: VecEnv, episodes: int, rng: np.random.Generator) -> float:
    """Mean return of uniform-random actions (a reference level)."""
    bound = ACT_BOUND[env.kind]
    total = np.zeros(env.n)
    env.reset_done(np.ones(env.n, dtype=bool))
    for _ in range(episodes):
        done = np.zeros(env.n, dtype=bool)
        while not done.all():
            r, done = env.step(rng.uniform(-bound, bound, size=(env.n, env.act_dim)))
            total += r
        env.reset_done(done)
    return float(total.mean() / episodes)

