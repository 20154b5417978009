"""Summary tables and learning-curve plots from run directories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..fed import Strategy
from .metrics import MetricsRow, read_csv

DEFAULT_THRESHOLD = -20.0


class MissingRuns(FileNotFoundError):
    def __init__(self, missing: Sequence[tuple[str, int]]):
        self.missing = list(missing)
        listing = ", ".join(f"({s}, seed {k})" for s, k in self.missing)
        super().__init__(f"missing runs: {listing}")


@dataclass(frozen=True)
class Run:
    strategy: str
    seed: int
    env_kind: str
    manifest: dict
    rows: tuple[MetricsRow, ...]
    path: Path

    def _per_round(self, field: str) -> tuple[np.ndarray, np.ndarray]:
        """(env_steps, value averaged over agents) for every round."""
        by_round: dict[int, list[MetricsRow]] = {}
        for r in self.rows:
            by_round.setdefault(r.round, []).append(r)
        rounds = sorted(by_round)
        steps = np.array([by_round[k][0].env_steps for k in rounds])
        vals = np.array([np.mean([getattr(r, field) for r in by_round[k]]) for k in rounds])
        return steps, vals

    def curve(self, field: str = "eval_return") -> tuple[np.ndarray, np.ndarray]:
        return self._per_round(field)

    def best_return(self) -> float:
        """Best evaluation return of each agent over rounds, averaged over agents."""
        best: dict[int, float] = {}
        for r in self.rows:
            best[r.agent_id] = max(best.get(r.agent_id, -math.inf), r.eval_return)
        return float(np.mean([best[a] for a in sorted(best)]))

    def final_return(self) -> float:
        last = max(r.round for r in self.rows)
        return float(np.mean([r.eval_return for r in self.rows if r.round == last]))

    def steps_to_threshold(self, threshold: float) -> int | None:
        """Env steps per agent at the first round whose agent-averaged eval return reaches ``threshold``."""
        steps, vals = self.curve()
        hit = np.flatnonzero(vals >= threshold)
        return int(steps[hit[0]]) if hit.size else None


def load_runs(in_dir: str | Path) -> list[Run]:
    in_dir = Path(in_dir)
    runs = []
    for manifest_path in sorted(in_dir.glob("*/manifest.json")):
        m = json.loads(manifest_path.read_text())
        metrics = manifest_path.parent / "metrics.csv"
        rows = tuple(read_csv(metrics)) if metrics.exists() else ()
        runs.append(Run(m["strategy"], int(m["seed"]), m["config"]["env_kind"], m, rows, manifest_path.parent))
    if not runs:
        raise MissingRuns([])
    return runs


def expected_pairs(runs: Iterable[Run]) -> set[tuple[str, int]]:
    """Every (strategy, seed) some manifest's config asked for."""
    want = set()
    for run in runs:
        cfg = run.manifest["config"]
        strategies = [s.value for s in Strategy] if cfg["strategy"] == "all" else [run.strategy]
        want |= {(s, int(k)) for s in strategies for k in cfg["seeds"]}
    return want


def _check_complete(runs: Sequence[Run]) -> None:
    have = {(r.strategy, r.seed) for r in runs if r.rows}
    missing = sorted(expected_pairs(runs) - have)
    if missing:
        raise MissingRuns(missing)


def _stats(xs: Sequence[float]) -> dict[str, float]:
    return {"mean": float(np.mean(xs)), "std": float(np.std(xs))}


def summarize(runs: Sequence[Run], threshold: float = DEFAULT_THRESHOLD) -> list[dict]:
    """One entry per strategy, ordered by mean final return (best first)."""
    _check_complete(runs)
    by_strategy: dict[str, list[Run]] = {}
    for r in runs:
        by_strategy.setdefault(r.strategy, []).append(r)
    table = []
    for strategy, group in by_strategy.items():
        group = sorted(group, key=lambda r: r.seed)
        hits = [r.steps_to_threshold(threshold) for r in group]
        reached = [h for h in hits if h is not None]
        table.append({
            "strategy": strategy,
            "env_kind": group[0].env_kind,
            "seeds": [r.seed for r in group],
            "best_return": _stats([r.best_return() for r in group]),
            "final_return": _stats([r.final_return() for r in group]),
            "per_seed_best": [r.best_return() for r in group],
            "per_seed_final": [r.final_return() for r in group],
            "threshold": threshold,
            "steps_to_threshold": hits,
            "steps_to_threshold_mean": float(np.mean(reached)) if len(reached) == len(hits) else None,
            "seeds_reaching_threshold": len(reached),
        })
    table.sort(key=lambda e: (-e["final_return"]["mean"], e["strategy"]))
    return table


def format_table(table: Sequence[dict]) -> str:
    lines = [f"{'strategy':<16} {'best return':>20} {'final return':>20} {'steps to thr':>14}"]
    for e in table:
        b, f = e["best_return"], e["final_return"]
        thr = e["steps_to_threshold_mean"]
        lines.append(
            f"{e['strategy']:<16} {b['mean']:>10.2f} ± {b['std']:<7.2f} {f['mean']:>10.2f} ± {f['std']:<7.2f} "
            f"{('%d' % thr) if thr is not None else 'not reached':>14}"
        )
    return "\n".join(lines)


def report(in_dir: str | Path, threshold: float = DEFAULT_THRESHOLD) -> list[dict]:
    """Write ``summary.json`` into ``in_dir`` and return the table."""
    table = summarize(load_runs(in_dir), threshold)
    Path(in_dir, "summary.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


# --- plots -------------------------------------------------------------------


def band(curves: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise mean, mean - std and mean + std across seeds."""
    a = np.stack(curves)
    m, s = a.mean(axis=0), a.std(axis=0)
    return m, m - s, m + s


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fedpon"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(plt, fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot(in_dir: str | Path) -> list[Path]:
    """Learning curves and observation-statistic series per environment kind, as SVG."""
    runs = [r for r in load_runs(in_dir) if r.rows]
    plt = _figure()
    out = []
    kinds = sorted({r.env_kind for r in runs})
    panels = [
        ("learning_curve", "eval_return", "evaluation return"),
        ("norm_obs_mean", "norm_obs_mean_abs", "|mean of normalized obs|"),
        ("norm_obs_var", "norm_obs_var", "variance of normalized obs"),
    ]
    for kind in kinds:
        group = [r for r in runs if r.env_kind == kind]
        for stem, field, label in panels:
            fig, ax = plt.subplots(figsize=(6, 4))
            for strategy in sorted({r.strategy for r in group}):
                members = sorted((r for r in group if r.strategy == strategy), key=lambda r: r.seed)
                curves = [r.curve(field) for r in members]
                n = min(len(c[0]) for c in curves)
                steps = curves[0][0][:n]
                mean, lo, hi = band([c[1][:n] for c in curves])
                (line,) = ax.plot(steps, mean, label=strategy)
                ax.fill_between(steps, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
            ax.set_xlabel("environment steps per agent")
            ax.set_ylabel(label)
            ax.set_title(kind)
            ax.legend()
            fig.tight_layout()
            path = Path(in_dir) / f"{stem}_{kind}.svg"
            _save(plt, fig, path)
            out.append(path)
    return out
