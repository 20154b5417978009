"""Diagnostics for input-scale heterogeneity.

When agents see inputs of different spread, the weights they learn scale
inversely with that spread (for a linear layer the output variance is roughly
``||W||^2 * Var(x)``, so a shared output scale forces ``||W_i|| ~ 1 / sigma_i``).
Averaging such models lets the agent with larger weights dominate. This module
measures weight norms and output variances, reproduces the inverse relation on
a federated linear regression, and turns run metrics into per-round
observation-distribution series.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .fed import aggregate_fedavg
from .nn import autodiff as ad
from .nn.optim import AdamState, adam_step
from .nn.params import Layout, ParamVector


def weight_norms(params: ParamVector) -> np.ndarray:
    """Euclidean norm of each layer's flattened weight matrix."""
    return params.weight_norms()


def output_variance(params: ParamVector, obs_sample: np.ndarray) -> np.ndarray:
    """Population variance of the first layer's pre-activations ``x W + b``."""
    obs_sample = np.asarray(obs_sample, dtype=np.float64)
    if obs_sample.ndim != 2 or obs_sample.shape[0] < 2:
        raise ValueError("output_variance needs at least 2 samples")
    W, b = params.layers[0]
    return np.var(obs_sample @ W + b, axis=0)


@dataclass(frozen=True)
class NormReport:
    layer_norms: tuple[tuple[float, ...], ...]  # per agent, per layer
    input_std: tuple[float, ...]  # per agent, root-mean of per-dimension variances
    output_var: tuple[tuple[float, ...], ...]  # per agent, per first-layer unit
    delta_y: float  # mean output variance across agents and units

    def to_dict(self) -> dict:
        return {
            "layer_norms": [list(x) for x in self.layer_norms],
            "input_std": list(self.input_std),
            "output_var": [list(x) for x in self.output_var],
            "delta_y": self.delta_y,
        }


def norm_report(params_list: Sequence[ParamVector], obs_samples: Sequence[np.ndarray]) -> NormReport:
    if len(params_list) != len(obs_samples) or not params_list:
        raise ValueError("need one observation sample per agent")
    norms = tuple(tuple(map(float, weight_norms(p))) for p in params_list)
    std = tuple(float(np.sqrt(np.mean(np.var(np.asarray(x), axis=0)))) for x in obs_samples)
    var = tuple(tuple(map(float, output_variance(p, x))) for p, x in zip(params_list, obs_samples))
    return NormReport(norms, std, var, float(np.mean([np.mean(v) for v in var])))


# --- federated linear regression -----------------------------------------------


@dataclass(frozen=True)
class ImbalanceReport:
    sigma_ratio: float
    norm_ratio: float  # ||W_1|| / ||W_2|| of the locally trained models in the last round
    predicted_ratio: float  # sigma_2 / sigma_1
    oracle_ratio: float  # ratio of per-agent least-squares solutions
    contribution: tuple[float, float]  # ||W_i|| / sum_j ||W_j||
    local_norms: tuple[float, float]
    global_norm: float

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _mse_grad(params: ParamVector, x: np.ndarray, y: np.ndarray) -> ParamVector:
    W, b = ad.leaf(params.layers[0][0]), ad.leaf(params.layers[0][1])
    loss = ad.mean(ad.square(ad.affine(x, W, b) - y))
    gW, gb = ad.grad(loss, [W, b])
    return ParamVector.from_parts([(gW, gb)])


def norm_imbalance_experiment(
    sigma_ratio: float,
    steps: int = 2000,
    seed: int = 0,
    *,
    dim: int = 4,
    samples: int = 2000,
    local_steps: int = 100,
    lr: float = 0.02,
    noise: float = 0.1,
) -> ImbalanceReport:
    """Two linear regressors, shared targets, inputs scaled by ``sigma_ratio`` and 1.

    Each round both agents start from the global weights, take ``local_steps``
    Adam steps on their own data, and are averaged. Norms are read off the
    local models of the final round, just before aggregation.
    """
    if not sigma_ratio >= 1:
        raise ValueError("sigma_ratio must be >= 1")
    if steps < local_steps:
        raise ValueError("steps must cover at least one round of local steps")
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=(dim, 1))
    sigmas = (float(sigma_ratio), 1.0)
    data = []
    for s in sigmas:
        z = rng.normal(size=(samples, dim))
        y = z @ beta + noise * rng.normal(size=(samples, 1))
        data.append((s * z, y))
    layout = Layout(((dim, 1),))
    global_w = ParamVector(layout, np.zeros(layout.total_len))
    local = [global_w, global_w]
    for _ in range(steps // local_steps):
        local = []
        for x, y in data:
            p, state = global_w.copy(), AdamState.zeros_like(global_w)
            for _ in range(local_steps):
                p, state = adam_step(p, _mse_grad(p, x, y), state, lr)
            local.append(p)
        global_w = aggregate_fedavg(local)

    norms = tuple(float(weight_norms(p)[0]) for p in local)
    oracle = []
    for x, y in data:
        design = np.hstack([x, np.ones((samples, 1))])
        sol = np.linalg.lstsq(design, y, rcond=None)[0]
        oracle.append(float(np.linalg.norm(sol[:dim])))
    total = sum(norms)
    return ImbalanceReport(
        sigma_ratio=float(sigma_ratio),
        norm_ratio=norms[0] / norms[1],
        predicted_ratio=sigmas[1] / sigmas[0],
        oracle_ratio=oracle[0] / oracle[1],
        contribution=(norms[0] / total, norms[1] / total),
        local_norms=norms,
        global_norm=float(weight_norms(global_w)[0]),
    )


# --- observation distributions over a run --------------------------------------

SERIES_COLUMNS = ("norm_obs_mean_abs", "norm_obs_var", "raw_obs_var")


@dataclass(frozen=True)
class AgentSeries:
    agent_id: int
    rounds: tuple[int, ...]
    env_steps: tuple[int, ...]
    norm_obs_mean: tuple[float, ...]
    norm_obs_var: tuple[float, ...]
    raw_obs_var: tuple[float, ...]

    def window(self, start: int, stop: int) -> "AgentSeries":
        keep = [i for i, r in enumerate(self.rounds) if start <= r < stop]
        pick = lambda xs: tuple(xs[i] for i in keep)  # noqa: E731
        return AgentSeries(self.agent_id, pick(self.rounds), pick(self.env_steps), pick(self.norm_obs_mean),
                           pick(self.norm_obs_var), pick(self.raw_obs_var))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _read_rows(source: str | Path | Iterable[Mapping[str, object]]) -> list[Mapping[str, object]]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_dir():
            path = path / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"no metrics found at {path}")
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    return list(source)


def obs_distribution_report(source: str | Path | Iterable[Mapping[str, object]]) -> dict[int, AgentSeries]:
    """Per-agent, per-round series of normalized-observation mean and variance and raw variance.

    ``source`` is a run directory, a metrics CSV path, or already-parsed rows.
    Missing snapshot columns or values raise ``ValueError``.
    """
    rows = _read_rows(source)
    if not rows:
        raise ValueError("no metrics rows")
    missing = [c for c in SERIES_COLUMNS if c not in rows[0]]
    if missing:
        raise ValueError(f"missing observation snapshots: {', '.join(missing)}")
    by_agent: dict[int, list[Mapping[str, object]]] = {}
    for row in rows:
        if any(row[c] in ("", None) for c in SERIES_COLUMNS):
            raise ValueError(f"missing observation snapshot at round {row.get('round')}")
        by_agent.setdefault(int(row["agent_id"]), []).append(row)
    out = {}
    for agent, agent_rows in sorted(by_agent.items()):
        agent_rows.sort(key=lambda r: int(r["round"]))
        out[agent] = AgentSeries(
            agent,
            tuple(int(r["round"]) for r in agent_rows),
            tuple(int(r["env_steps"]) for r in agent_rows),
            tuple(float(r["norm_obs_mean_abs"]) for r in agent_rows),
            tuple(float(r["norm_obs_var"]) for r in agent_rows),
            tuple(float(r["raw_obs_var"]) for r in agent_rows),
        )
    return out


def mean_deviation(series: Mapping[int, AgentSeries], start: int = 0, stop: int | None = None) -> float:
    """Average |mean of normalized observations| over agents and rounds in [start, stop)."""
    vals = []
    for s in series.values():
        w = s.window(start, stop if stop is not None else max(s.rounds) + 1)
        vals.extend(w.norm_obs_mean)
    if not vals:
        raise ValueError("no rounds in the requested window")
    return float(np.mean(vals))


def variance_fluctuation(series: Mapping[int, AgentSeries], start: int = 0) -> float:
    """Spread over rounds of the normalized-observation variance, averaged over agents."""
    vals = [np.std(s.window(start, max(s.rounds) + 1).norm_obs_var) for s in series.values()]
    return float(np.mean(vals))


def write_diagnosis(run_dirs: Mapping[str, str | Path], out_dir: str | Path) -> Path:
    """Series for several runs as one CSV plus a summary JSON; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    with open(out_dir / "obs_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "agent_id", "round", "env_steps", *SERIES_COLUMNS])
        for name in sorted(run_dirs):
            series = obs_distribution_report(run_dirs[name])
            for agent, s in series.items():
                for i, r in enumerate(s.rounds):
                    w.writerow([name, agent, r, s.env_steps[i], repr(s.norm_obs_mean[i]), repr(s.norm_obs_var[i]),
                                repr(s.raw_obs_var[i])])
            summary[name] = {
                "mean_abs_norm_obs_mean": mean_deviation(series),
                "norm_obs_var_fluctuation": variance_fluctuation(series),
                "final_norm_obs_var": {str(a): s.norm_obs_var[-1] for a, s in series.items()},
                "final_raw_obs_var": {str(a): s.raw_obs_var[-1] for a, s in series.items()},
            }
    path = out_dir / "obs_summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path
