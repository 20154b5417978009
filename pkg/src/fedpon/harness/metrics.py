"""Per-agent, per-round metrics rows and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..fed import AgentRound, RoundRecord


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    strategy: str
    round: int
    agent_id: int
    env_steps: int
    mean_return: float  # mean of training episodes finished this round; nan if none
    policy_loss: float
    value_loss: float
    approx_kl: float
    clip_fraction: float
    obs_mean_l2: float
    obs_var_l2: float
    policy_w_norms: tuple[float, ...]
    value_w_norms: tuple[float, ...]
    eval_return: float
    entropy: float
    norm_obs_mean_abs: float
    norm_obs_var: float
    raw_obs_var: float

    @classmethod
    def from_round(cls, run_id: str, seed: int, record: RoundRecord, agent: AgentRound, eval_return: float) -> "MetricsRow":
        return cls(
            run_id=run_id,
            seed=seed,
            strategy=record.strategy.value,
            round=record.round,
            agent_id=agent.agent_id,
            env_steps=agent.env_steps,
            mean_return=agent.mean_return,
            policy_loss=agent.losses["policy_loss"],
            value_loss=agent.losses["value_loss"],
            approx_kl=agent.losses["approx_kl"],
            clip_fraction=agent.losses["clip_fraction"],
            obs_mean_l2=agent.obs_mean_l2,
            obs_var_l2=agent.obs_var_l2,
            policy_w_norms=agent.policy_w_norms,
            value_w_norms=agent.value_w_norms,
            eval_return=float(eval_return),
            entropy=agent.losses["entropy"],
            norm_obs_mean_abs=float(np.mean(np.abs(agent.norm_obs_mean))),
            norm_obs_var=float(np.mean(agent.norm_obs_var)),
            raw_obs_var=float(np.mean(agent.raw_obs_var)),
        )


COLUMNS = tuple(f.name for f in fields(MetricsRow))
_INT = {"seed", "round", "agent_id", "env_steps"}
_STR = {"run_id", "strategy"}
_VEC = {"policy_w_norms", "value_w_norms"}


def _fmt(name: str, v) -> str:
    if name in _STR:
        return v
    if name in _INT:
        return str(int(v))
    if name in _VEC:
        return ";".join(repr(float(x)) for x in v)
    return repr(float(v))


def _parse(name: str, s: str):
    if name in _STR:
        return s
    if name in _INT:
        return int(s)
    if name in _VEC:
        return tuple(float(x) for x in s.split(";")) if s else ()
    return float(s)


def write_csv(rows: Iterable[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(to_csv_text(rows))


def to_csv_text(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(c, getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header")
        return [MetricsRow(**{c: _parse(c, v) for c, v in zip(COLUMNS, line)}) for line in reader]


def check_rows(rows: Sequence[MetricsRow]) -> None:
    """One row per agent per round, env_steps strictly increasing per (run, agent)."""
    last: dict[tuple[str, int], int] = {}
    seen: set[tuple[str, int, int]] = set()
    for r in rows:
        key = (r.run_id, r.round, r.agent_id)
        if key in seen:
            raise ValueError(f"duplicate row for {key}")
        seen.add(key)
        prev = last.get((r.run_id, r.agent_id))
        if prev is not None and r.env_steps <= prev:
            raise ValueError(f"env_steps not increasing for run {r.run_id} agent {r.agent_id}")
        last[(r.run_id, r.agent_id)] = r.env_steps
