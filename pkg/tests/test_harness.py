import json

import numpy as np
import pytest

from fedpon import envs
from fedpon.fed import Strategy
from fedpon.harness import (
    COLUMNS,
    ExperimentConfig,
    MetricsRow,
    MissingRuns,
    evaluate,
    evaluate_population,
    plot,
    read_csv,
    report,
    run,
    scaled_point_mass,
    write_csv,
)
from fedpon.harness import cli
from fedpon.harness.metrics import check_rows
from fedpon.harness.report import band, load_runs
from fedpon.harness.runner import config_from_manifest, run_id
from fedpon.nn import build_mlp
from fedpon.nn.params import stack
from fedpon.ppo import PpoConfig
from fedpon.runstats import RunningStats, summarize_batch, update

TINY_PPO = PpoConfig(rollout_steps=200, batch_size=50, local_epochs=2)


def tiny(tmp_path, **kw):
    base = dict(ppo=TINY_PPO, hidden=(8,), rounds=2, seeds=(0,), eval_episodes=2, output_dir=str(tmp_path / "runs"))
    base.update(kw)
    return scaled_point_mass((1.0, 5.0), **base)


# --- config ------------------------------------------------------------------


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.n_agents == 3 and cfg.seeds == (0, 1, 2, 3, 4) and cfg.epsilon == 1e-8


@pytest.mark.parametrize(
    "kw",
    [
        {"n_agents": 0},
        {"rounds": 0},
        {"seeds": ()},
        {"seeds": (1, 1)},
        {"strategy": "FedProx"},
        {"morphology_ranges": {"obs_scale": (5.0, 1.0)}},
        {"morphology_ranges": {"pole_length": (0.5, 1.0)}},
        {"morphologies": ({"obs_scale": 1.0},)},
        {"epsilon": 0.0},
        {"eval_episodes": 0},
        {"aggregate_every": 0},
    ],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_config_json_roundtrip(tmp_path):
    cfg = tiny(tmp_path, strategy="all", aggregate_every=2)
    cfg.dump(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ValueError, match="unknown config fields"):
        ExperimentConfig.from_dict({"roundz": 3})


def test_overrides_leave_other_fields():
    cfg = ExperimentConfig(rounds=7).with_overrides(seeds=[3], strategy=None)
    assert cfg.seeds == (3,) and cfg.rounds == 7 and cfg.strategy == "FedAvgPon"


def test_epsilon_reaches_ppo():
    assert ExperimentConfig(epsilon=1e-5).ppo_config().epsilon == 1e-5


def test_sampled_morphologies_depend_only_on_seed():
    cfg = ExperimentConfig(morphology_ranges={"obs_scale": (2.0, 3.0)})
    a = cfg.morphologies_for(4)
    assert a == cfg.with_overrides(strategy="Independent").morphologies_for(4)
    assert a != cfg.morphologies_for(5)
    assert all(2.0 <= m.params["obs_scale"] <= 3.0 for m in a)


# --- metrics -----------------------------------------------------------------


def test_columns_extend_the_fixed_schema():
    fixed = ("run_id", "seed", "strategy", "round", "agent_id", "env_steps", "mean_return", "policy_loss",
             "value_loss", "approx_kl", "clip_fraction", "obs_mean_l2", "obs_var_l2", "policy_w_norms",
             "value_w_norms")
    assert COLUMNS[: len(fixed)] == fixed


def row(**kw):
    base = dict(run_id="r", seed=0, strategy="FedAvgPon", round=0, agent_id=0, env_steps=10, mean_return=float("nan"),
                policy_loss=0.1, value_loss=0.2, approx_kl=1e-3, clip_fraction=0.0, obs_mean_l2=1.0, obs_var_l2=2.0,
                policy_w_norms=(1.5, 0.1), value_w_norms=(2.0,), eval_return=-3.25, entropy=2.8,
                norm_obs_mean_abs=0.1, norm_obs_var=1.0, raw_obs_var=3.0)
    base.update(kw)
    return MetricsRow(**base)


def test_csv_roundtrip(tmp_path):
    rows = [row(), row(agent_id=1, env_steps=10, mean_return=-7.5, eval_return=1 / 3)]
    write_csv(rows, tmp_path / "m.csv")
    back = read_csv(tmp_path / "m.csv")
    assert back[1] == rows[1]
    assert np.isnan(back[0].mean_return) and back[0].policy_w_norms == (1.5, 0.1)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(COLUMNS)


def test_header_required(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        read_csv(tmp_path / "m.csv")


def test_check_rows():
    check_rows([row(), row(round=1, env_steps=20)])
    with pytest.raises(ValueError, match="duplicate"):
        check_rows([row(), row()])
    with pytest.raises(ValueError, match="increasing"):
        check_rows([row(), row(round=1, env_steps=10)])


# --- evaluation ----------------------------------------------------------------


def stats_for(morph, seed=0):
    rng = np.random.default_rng(seed)
    return update(RunningStats.empty(morph.obs_dim), summarize_batch(rng.normal(size=(50, morph.obs_dim))))


def test_evaluation_freezes_stats_and_is_deterministic():
    morph = envs.fixed_morphologies("ScaledPointMass", [{"obs_scale": 5.0}])[0]
    policy, _ = build_mlp(4, 2, (8,), seed=1)
    s = stats_for(morph)
    snapshot = RunningStats(s.count, s.mean.copy(), s.var.copy())
    seq = np.random.SeedSequence(9)
    first = evaluate(policy, s, morph, 3, seq)
    assert evaluate(policy, s, morph, 3, seq) == first
    assert s.equals(snapshot)
    assert evaluate(policy, s, morph, 3, 10) != first


def test_random_pendulum_baseline_is_negative():
    morph = envs.sample_morphologies("HeteroPendulum", 1, seed=0)[0]
    policy, _ = build_mlp(3, 1, (8,), seed=0)
    assert evaluate(policy, None, morph, 2, 0) < 0
    assert evaluate(policy, None, morph, 2, 0, stochastic=True) < 0


def test_population_matches_single_evaluations():
    morphs = envs.fixed_morphologies("ScaledPointMass", [{"obs_scale": k} for k in (1.0, 5.0, 10.0)])
    pols = [build_mlp(4, 2, (8,), seed=i)[0] for i in range(3)]
    stats = [stats_for(m, i) for i, m in enumerate(morphs)]
    seeds = [11, 12, 13]
    batch = evaluate_population(stack(pols), stats, morphs, 2, seeds)
    single = [evaluate(p, s, m, 2, k) for p, s, m, k in zip(pols, stats, morphs, seeds)]
    assert batch.tolist() == single


def test_evaluation_errors():
    morph = envs.fixed_morphologies("ScaledPointMass", [{"obs_scale": 1.0}])[0]
    policy, _ = build_mlp(4, 2, (8,), seed=0)
    with pytest.raises(ValueError):
        evaluate(policy, None, morph, 0, 0)
    with pytest.raises(Exception, match="normalize before any update"):
        evaluate(policy, RunningStats.empty(4), morph, 1, 0)


# --- runs ----------------------------------------------------------------------


def test_single_round_single_agent_has_one_row(tmp_path):
    cfg = scaled_point_mass((3.0,), ppo=TINY_PPO, hidden=(8,), rounds=1, seeds=(0,), eval_episodes=1,
                            strategy="Independent", output_dir=str(tmp_path))
    (art,) = run(cfg)
    assert len(read_csv(art.metrics)) == 1
    assert art.path.name == "Independent__seed0"


def test_run_is_byte_identical(tmp_path):
    a = run(tiny(tmp_path / "a"))[0]
    b = run(tiny(tmp_path / "b"))[0]
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    m_a, m_b = json.loads(a.manifest.read_text()), json.loads(b.manifest.read_text())
    m_a["config"].pop("output_dir"), m_b["config"].pop("output_dir")
    assert m_a == m_b


def test_rows_are_well_formed(tmp_path):
    (art,) = run(tiny(tmp_path, rounds=3))
    rows = read_csv(art.metrics)
    check_rows(rows)
    assert len(rows) == 3 * 2
    assert [r.env_steps for r in rows if r.agent_id == 1] == [200, 400, 600]
    assert not list(art.path.parent.glob(".*partial"))


def test_sweep_pairs_morphologies_and_init(tmp_path):
    cfg = ExperimentConfig(n_agents=2, strategy="all", ppo=TINY_PPO, hidden=(8,), rounds=1, seeds=(0,),
                           eval_episodes=1, output_dir=str(tmp_path))
    arts = run(cfg)
    assert sorted(a.strategy for a in arts) == sorted(Strategy)
    manifests = [json.loads(a.manifest.read_text()) for a in arts]
    for m in manifests[1:]:
        assert m["morphologies"] == manifests[0]["morphologies"]
        assert m["initial_params_sha256"] == manifests[0]["initial_params_sha256"]


def test_seed_results_do_not_depend_on_the_batch(tmp_path):
    together = {a.seed: a for a in run(tiny(tmp_path / "ab", seeds=(0, 1)))}
    alone = run(tiny(tmp_path / "b", seeds=(1,)))[0]
    assert together[1].metrics.read_bytes() == alone.metrics.read_bytes()


def test_manifest_replays_the_run(tmp_path):
    (art,) = run(tiny(tmp_path, strategy="FedAvgSharedOn"))
    cfg = config_from_manifest(art.manifest).with_overrides(output_dir=str(tmp_path / "replay"))
    (again,) = run(cfg)
    assert again.metrics.read_bytes() == art.metrics.read_bytes()


def test_rerun_replaces_previous_artifacts(tmp_path):
    cfg = tiny(tmp_path, rounds=1)
    (art,) = run(cfg)
    (art.path / "stale.txt").write_text("x")
    run(cfg)
    assert not (art.path / "stale.txt").exists()


# --- report ----------------------------------------------------------------------


def fake_run(root, strategy, seed, evals, steps=100, seeds=(0, 1), cfg_strategy=None):
    """evals[round][agent] -> eval_return."""
    path = root / run_id(strategy, seed)
    path.mkdir(parents=True)
    rows = [row(run_id=path.name, seed=seed, strategy=strategy, round=r, agent_id=a, env_steps=steps * (r + 1),
                eval_return=float(v)) for r, per_agent in enumerate(evals) for a, v in enumerate(per_agent)]
    write_csv(rows, path / "metrics.csv")
    cfg = {"env_kind": "ScaledPointMass", "strategy": cfg_strategy or strategy, "seeds": list(seeds)}
    (path / "manifest.json").write_text(json.dumps({"strategy": strategy, "seed": seed, "config": cfg}))


def test_report_by_hand(tmp_path):
    # seed 0: best per agent (-10, -4) -> -7, final (-12 + -4) / 2 = -8
    fake_run(tmp_path, "FedAvgPon", 0, [[-30, -5], [-10, -6], [-12, -4]])
    # seed 1: best per agent (-20, -2) -> -11, final (-20 + -30) / 2 = -25
    fake_run(tmp_path, "FedAvgPon", 1, [[-20, -2], [-40, -50], [-20, -30]])
    (e,) = report(tmp_path, threshold=-16)
    assert e["per_seed_best"] == [-7.0, -11.0]
    assert e["best_return"] == {"mean": -9.0, "std": 2.0}
    assert e["final_return"] == {"mean": -16.5, "std": 8.5}
    # agent-averaged curves: seed 0 (-17.5, -8, -8), seed 1 (-11, -45, -25)
    assert e["steps_to_threshold"] == [200, 100]
    assert e["steps_to_threshold_mean"] == 150.0
    assert json.loads((tmp_path / "summary.json").read_text()) == [e]


def test_single_seed_has_zero_std(tmp_path):
    fake_run(tmp_path, "Independent", 3, [[-1, -2]], seeds=(3,))
    (e,) = report(tmp_path)
    assert e["best_return"]["std"] == 0.0 and e["final_return"]["std"] == 0.0
    assert e["steps_to_threshold"] == [100]


def test_unreached_threshold(tmp_path):
    fake_run(tmp_path, "Independent", 0, [[-50, -50]], seeds=(0,))
    (e,) = report(tmp_path)
    assert e["steps_to_threshold"] == [None] and e["steps_to_threshold_mean"] is None


def test_report_orders_by_final_return(tmp_path):
    for s, v in (("Independent", -30), ("FedAvgPon", -5), ("FedAvgNoNorm", -10)):
        fake_run(tmp_path, s, 0, [[v]], seeds=(0,))
    assert [e["strategy"] for e in report(tmp_path)] == ["FedAvgPon", "FedAvgNoNorm", "Independent"]


def test_missing_runs_are_listed(tmp_path):
    fake_run(tmp_path, "FedAvgPon", 0, [[-1]], seeds=(0, 1), cfg_strategy="all")
    with pytest.raises(MissingRuns) as err:
        report(tmp_path)
    assert ("FedAvgPon", 1) in err.value.missing and ("FedAvgNoNorm", 0) in err.value.missing
    assert len(err.value.missing) == 7
    with pytest.raises(MissingRuns):
        report(tmp_path / "empty")


def test_report_is_deterministic(tmp_path):
    fake_run(tmp_path, "FedAvgPon", 0, [[-3, -1]], seeds=(0,))
    report(tmp_path)
    first = (tmp_path / "summary.json").read_bytes()
    report(tmp_path)
    assert (tmp_path / "summary.json").read_bytes() == first


# --- plots -----------------------------------------------------------------------


def test_band_is_pointwise_mean_and_std():
    m, lo, hi = band([np.array([0.0, 2.0]), np.array([2.0, 6.0])])
    assert m.tolist() == [1.0, 4.0] and lo.tolist() == [0.0, 2.0] and hi.tolist() == [2.0, 6.0]
    m, lo, hi = band([np.array([1.0, 3.0])])
    assert lo.tolist() == hi.tolist() == m.tolist()


def test_plot_is_deterministic(tmp_path):
    fake_run(tmp_path, "FedAvgPon", 0, [[-3, -1], [-2, -1]], seeds=(0, 1))
    fake_run(tmp_path, "FedAvgPon", 1, [[-5, -1], [-1, -1]], seeds=(0, 1))
    first = {p.name: p.read_bytes() for p in plot(tmp_path)}
    assert sorted(first) == ["learning_curve_ScaledPointMass.svg", "norm_obs_mean_ScaledPointMass.svg",
                             "norm_obs_var_ScaledPointMass.svg"]
    assert all(b.startswith(b"<?xml") for b in first.values())
    second = {p.name: p.read_bytes() for p in plot(tmp_path)}
    assert first == second


def test_loaded_runs_expose_curves(tmp_path):
    fake_run(tmp_path, "FedAvgPon", 0, [[-3, -1], [-2, -2]], seeds=(0,))
    (r,) = load_runs(tmp_path)
    steps, vals = r.curve()
    assert steps.tolist() == [100, 200] and vals.tolist() == [-2.0, -2.0]


# --- CLI -------------------------------------------------------------------------


def test_cli_run_report_plot_diagnose(tmp_path, capsys):
    tiny(tmp_path).dump(tmp_path / "c.json")
    out = tmp_path / "cli"
    assert cli.main(["run", "--config", str(tmp_path / "c.json"), "--strategy", "FedAvgNoNorm", "--seed", "2",
                     "--rounds", "1", "--out", str(out)]) == 0
    assert (out / "FedAvgNoNorm__seed2" / "metrics.csv").exists()
    assert cli.main(["report", "--in", str(out)]) == 0
    assert "FedAvgNoNorm" in capsys.readouterr().out
    assert cli.main(["plot", "--in", str(out)]) == 0
    assert cli.main(["diagnose", "--in", str(out)]) == 0
    assert json.loads((out / "diagnosis" / "obs_summary.json").read_text())["FedAvgNoNorm__seed2"]


def test_cli_norm_imbalance(capsys):
    assert cli.main(["norm-imbalance", "--ratio", "2", "--steps", "500"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["predicted_ratio"] == 0.5 and 0.25 <= rep["norm_ratio"] <= 1.0


def test_cli_reports_errors(tmp_path, capsys):
    assert cli.main(["report", "--in", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
