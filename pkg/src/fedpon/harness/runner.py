"""Running strategy sweeps and evaluating policies."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import __version__
from ..envs import HORIZON, Morphology, VecEnv
from ..fed import AgentSlot, RoundRecord, Strategy, make_agents, run_round_lockstep
from ..nn.network import build_mlp, mlp_forward, policy_log_std
from ..nn.params import ParamVector, stack
from ..runstats import DEFAULT_EPSILON, RunningStats, StatsError
from ..seeding import Stream, generator, seed_sequence
from .config import ExperimentConfig
from .metrics import COLUMNS, MetricsRow, to_csv_text

log = logging.getLogger(__name__)

Seed = int | np.random.SeedSequence


# --- evaluation --------------------------------------------------------------


def _children(seed: Seed, n: int) -> list[np.random.SeedSequence]:
    # derived without SeedSequence.spawn, which would mutate a caller's object
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return [np.random.SeedSequence(ss.entropy, spawn_key=(*ss.spawn_key, j)) for j in range(n)]


def evaluate_population(
    policies: ParamVector,
    stats: Sequence[RunningStats | None],
    morphs: Sequence[Morphology],
    n_episodes: int,
    seeds: Sequence[Seed],
    *,
    normalize: bool = True,
    epsilon: float = DEFAULT_EPSILON,
    norm_clip: float | None = None,
    stochastic: bool = False,
) -> np.ndarray:
    """Mean undiscounted return per agent; all episodes run side by side.

    ``policies`` is stacked with one entry per agent. Statistics are read, never
    updated. Without ``stochastic`` the action is the policy mean.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    n = len(morphs)
    if policies.lead_shape != (n,) or len(stats) != n or len(seeds) != n:
        raise ValueError("one policy, stats entry and seed per morphology")
    reset_rngs, act_rngs = [], []
    for seed in seeds:
        for child in _children(seed, n_episodes):
            r, a = _children(child, 2)
            reset_rngs.append(np.random.default_rng(r))
            act_rngs.append(np.random.default_rng(a))
    env = VecEnv([m for m in morphs for _ in range(n_episodes)], reset_rngs)
    rep = ParamVector(policies.layout, np.repeat(policies.flat, n_episodes, axis=0))
    layers = rep.layers
    if normalize:
        if any(s is None or s.count == 0 for s in stats):
            raise StatsError("normalize before any update")
        mean = np.repeat(np.stack([s.mean for s in stats]), n_episodes, axis=0)
        scale = np.sqrt(np.repeat(np.stack([s.var for s in stats]), n_episodes, axis=0) + epsilon)
    std = np.exp(policy_log_std(rep))
    total = np.zeros(env.n)
    for _ in range(HORIZON):
        x = env.observe()
        if normalize:
            x = (x - mean) / scale
            if norm_clip is not None:
                x = np.clip(x, -norm_clip, norm_clip)
        act = mlp_forward(layers, x[:, None, :])[:, 0]
        if stochastic:
            act = act + std * np.stack([r.standard_normal(env.act_dim) for r in act_rngs])
        reward, _ = env.step(act)
        total += reward
    return total.reshape(n, n_episodes).mean(axis=1)


def evaluate(
    policy: ParamVector,
    stats: RunningStats | None,
    morph: Morphology,
    n_episodes: int,
    seed: Seed,
    **kw,
) -> float:
    """Single-agent form of :func:`evaluate_population`; ``stats=None`` means raw observations."""
    kw.setdefault("normalize", stats is not None)
    return float(evaluate_population(stack([policy]), [stats], [morph], n_episodes, [seed], **kw)[0])


# --- runs --------------------------------------------------------------------


@dataclass(frozen=True)
class RunArtifacts:
    path: Path
    strategy: Strategy
    seed: int

    @property
    def metrics(self) -> Path:
        return self.path / "metrics.csv"

    @property
    def manifest(self) -> Path:
        return self.path / "manifest.json"


def run_id(strategy: Strategy | str, seed: int) -> str:
    return f"{Strategy(strategy).value}__seed{seed}"


def initial_params(config: ExperimentConfig, seed: int) -> tuple[ParamVector, ParamVector]:
    m = config.morphologies_for(seed)[0]
    return build_mlp(m.obs_dim, m.act_dim, config.hidden, seed=generator(seed, 0, Stream.INIT))


def _digest(p: ParamVector) -> str:
    return hashlib.sha256(np.ascontiguousarray(p.flat).tobytes()).hexdigest()


def _manifest(config: ExperimentConfig, strategy: Strategy, seed: int, morphs: Sequence[Morphology]) -> dict:
    policy, value = initial_params(config, seed)
    return {
        "run_id": run_id(strategy, seed),
        "strategy": strategy.value,
        "seed": seed,
        "config": config.to_dict(),
        "morphologies": [m.to_dict() for m in morphs],
        "initial_params_sha256": {"policy": _digest(policy), "value": _digest(value)},
        "columns": list(COLUMNS),
        "version": __version__,
    }


def _write_atomic(final: Path, files: dict[str, str]) -> None:
    tmp = final.parent / f".{final.name}.partial"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for name, text in files.items():
        (tmp / name).write_text(text)
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


Progress = Callable[[Strategy, int, Sequence[RoundRecord]], None]


def run_strategy(config: ExperimentConfig, strategy: Strategy | str, progress: Progress | None = None) -> list[RunArtifacts]:
    """Every seed of one strategy, stepped in lockstep; one artifact directory per seed."""
    strategy = Strategy(strategy)
    cfg, opts = config.ppo_config(), config.fed_options()
    normalize = opts.normalizes(strategy)
    groups: list[list[AgentSlot]] = []
    morphs_by_seed = {}
    for seed in config.seeds:
        morphs = config.morphologies_for(seed)
        policy, value = initial_params(config, seed)
        groups.append(make_agents(morphs, policy, value, seed))
        morphs_by_seed[seed] = morphs
    everyone = [a for g in groups for a in g]
    owners = [seed for seed, g in zip(config.seeds, groups) for _ in g]
    rows: dict[int, list[MetricsRow]] = {seed: [] for seed in config.seeds}

    for r in range(config.rounds):
        records = run_round_lockstep(groups, strategy, cfg, r, opts)
        evals = evaluate_population(
            stack([a.policy for a in everyone]),
            [a.stats for a in everyone],
            [a.morphology for a in everyone],
            config.eval_episodes,
            [seed_sequence(s, a.agent_id, Stream.EVAL, r) for s, a in zip(owners, everyone)],
            normalize=normalize,
            epsilon=cfg.epsilon,
            norm_clip=cfg.norm_clip,
            stochastic=config.stochastic_eval,
        )
        k = 0
        for seed, rec in zip(config.seeds, records):
            rid = run_id(strategy, seed)
            for agent in rec.agents:
                rows[seed].append(MetricsRow.from_round(rid, seed, rec, agent, evals[k]))
                k += 1
        if progress is not None:
            progress(strategy, r, records)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for seed in config.seeds:
        path = out / run_id(strategy, seed)
        manifest = _manifest(config, strategy, seed, morphs_by_seed[seed])
        _write_atomic(path, {
            "metrics.csv": to_csv_text(rows[seed]),
            "manifest.json": json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        })
        artifacts.append(RunArtifacts(path, strategy, seed))
    return artifacts


def log_progress(strategy: Strategy, r: int, records: Sequence[RoundRecord]) -> None:
    if (r + 1) % 10 == 0 or r == 0:
        steps = records[0].agents[0].env_steps
        ret = np.nanmean([[a.mean_return for a in rec.agents] for rec in records])
        log.info("%s round %d (%d steps/agent): training return %.2f", strategy.value, r + 1, steps, ret)


def run(config: ExperimentConfig, progress: Progress | None = None) -> list[RunArtifacts]:
    """Run every configured strategy over every seed."""
    artifacts = []
    for strategy in config.strategies:
        artifacts.extend(run_strategy(config, strategy, progress))
    return artifacts


def config_from_manifest(path: str | Path) -> ExperimentConfig:
    """The single-strategy, single-seed config that reproduces a run."""
    m = json.loads(Path(path).read_text())
    cfg = ExperimentConfig.from_dict(m["config"])
    return cfg.with_overrides(strategy=m["strategy"], seeds=[m["seed"]])
