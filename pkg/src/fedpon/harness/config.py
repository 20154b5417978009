"""Experiment configuration as a single JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from ..envs import DEFAULT_RANGES, EnvKind, Morphology, _check_ranges, fixed_morphologies, sample_morphologies
from ..fed import FedOptions, Strategy
from ..ppo import PpoConfig
from ..seeding import Stream, seed_sequence

ALL = "all"


@dataclass(frozen=True)
class ExperimentConfig:
    env_kind: EnvKind = EnvKind.SCALED_POINT_MASS
    n_agents: int = 3
    morphology_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    # explicit per-agent parameters; when set they replace sampling
    morphologies: tuple[Mapping[str, float], ...] | None = None
    strategy: str = Strategy.FEDAVG_PON.value  # a Strategy value or "all"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    hidden: tuple[int, ...] = (64, 64)
    rounds: int = 100
    aggregate_every: int = 1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epsilon: float = 1e-8
    reset_optimizer: bool = True
    normalize_independent: bool = False
    eval_episodes: int = 5
    stochastic_eval: bool = False
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(self, "env_kind", EnvKind(self.env_kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        ranges = {k: (float(v[0]), float(v[1])) for k, v in dict(self.morphology_ranges).items()}
        object.__setattr__(self, "morphology_ranges", ranges)
        if self.morphologies is not None:
            object.__setattr__(self, "morphologies", tuple({k: float(v) for k, v in m.items()} for m in self.morphologies))
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.strategy != ALL:
            Strategy(self.strategy)
        _check_ranges(self.env_kind, ranges)
        if self.morphologies is not None:
            if len(self.morphologies) != self.n_agents:
                raise ValueError("need one explicit morphology per agent")
            known = DEFAULT_RANGES[self.env_kind]
            for m in self.morphologies:
                for name, v in m.items():
                    if name not in known:
                        raise ValueError(f"unknown morphology parameter {name!r}")
                    if not v > 0:
                        raise ValueError(f"morphology parameter {name} must be positive")
        FedOptions(self.aggregate_every)

    # --- derived -------------------------------------------------------------

    @property
    def strategies(self) -> list[Strategy]:
        return list(Strategy) if self.strategy == ALL else [Strategy(self.strategy)]

    def ppo_config(self) -> PpoConfig:
        return dataclasses.replace(self.ppo, epsilon=self.epsilon)

    def fed_options(self) -> FedOptions:
        return FedOptions(self.aggregate_every, self.reset_optimizer, self.normalize_independent)

    def morphologies_for(self, seed: int) -> list[Morphology]:
        """Per-seed morphologies; they never depend on the strategy."""
        if self.morphologies is not None:
            return fixed_morphologies(self.env_kind, self.morphologies)
        return sample_morphologies(self.env_kind, self.n_agents, self.morphology_ranges,
                                   seed_sequence(seed, 0, Stream.MORPHOLOGY))

    # --- serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "env_kind": self.env_kind.value,
            "n_agents": self.n_agents,
            "morphology_ranges": {k: list(v) for k, v in sorted(self.morphology_ranges.items())},
            "morphologies": None if self.morphologies is None else [dict(m) for m in self.morphologies],
            "strategy": self.strategy,
            "ppo": self.ppo.to_dict(),
            "hidden": list(self.hidden),
            "rounds": self.rounds,
            "aggregate_every": self.aggregate_every,
            "seeds": list(self.seeds),
            "epsilon": self.epsilon,
            "reset_optimizer": self.reset_optimizer,
            "normalize_independent": self.normalize_independent,
            "eval_episodes": self.eval_episodes,
            "stochastic_eval": self.stochastic_eval,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        kw = dict(d)
        if "ppo" in kw and not isinstance(kw["ppo"], PpoConfig):
            kw["ppo"] = PpoConfig.from_dict(kw["ppo"])
        for name in ("seeds", "hidden"):
            if name in kw:
                kw[name] = tuple(kw[name])
        if kw.get("morphologies") is not None:
            kw["morphologies"] = tuple(kw["morphologies"])
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **changes: Any) -> "ExperimentConfig":
        """Copy with the non-None ``changes`` applied (CLI flags override the file)."""
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return type(self).from_dict(d)


def scaled_point_mass(scales: Sequence[float] = (1.0, 5.0, 10.0), **kw: Any) -> ExperimentConfig:
    """The standard pointmass setup with explicit observation scales."""
    return ExperimentConfig(
        env_kind=EnvKind.SCALED_POINT_MASS,
        n_agents=len(scales),
        morphologies=tuple({"obs_scale": float(k)} for k in scales),
        **kw,
    )
