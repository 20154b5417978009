import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpon import envs, fed, ppo
from fedpon.fed import FedOptions, Strategy
from fedpon.nn import ParamVector, build_mlp
from fedpon.ppo import OptState, PpoConfig
from fedpon.runstats import RunningStats, merge_average, normalize, summarize_batch, update
from fedpon.seeding import Stream, generator

SMALL = PpoConfig(rollout_steps=128, batch_size=32, local_epochs=2)
LAYOUT = build_mlp(4, 2, hidden=(8,))[0].layout


def random_params(rng, n):
    return [ParamVector(LAYOUT, rng.normal(size=LAYOUT.total_len) * rng.uniform(0.1, 100)) for _ in range(n)]


def pointmass_agents(ks=(1.0, 5.0, 10.0), seed=0, stream_ids=None):
    morphs = envs.fixed_morphologies("ScaledPointMass", [{"obs_scale": k} for k in ks])
    p, v = build_mlp(4, 2, hidden=(16, 16), seed=generator(seed, 0, Stream.INIT))
    return fed.make_agents(morphs, p, v, seed, stream_ids)


# --- aggregation algebra ------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_idempotent_on_identical_inputs(seed, n):
    p = random_params(np.random.default_rng(seed), 1)[0]
    assert fed.aggregate_fedavg([p] * n).equals(p)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetric_pair_averages_to_zero(seed):
    p = random_params(np.random.default_rng(seed), 1)[0]
    neg = ParamVector(LAYOUT, -p.flat)
    assert np.all(fed.aggregate_fedavg([p, neg]).flat == 0.0)
    assert np.all(fed.aggregate_fedavg([neg, p]).flat == 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.randoms())
def test_permutation_invariant(seed, n, rnd):
    ps = random_params(np.random.default_rng(seed), n)
    shuffled = list(ps)
    rnd.shuffle(shuffled)
    assert fed.aggregate_fedavg(ps).equals(fed.aggregate_fedavg(shuffled))


def test_three_random_against_flat_oracle():
    ps = random_params(np.random.default_rng(5), 3)
    expected = (ps[0].flatten() + ps[1].flatten() + ps[2].flatten()) / 3
    np.testing.assert_allclose(fed.aggregate_fedavg(ps).flatten(), expected, rtol=1e-13, atol=1e-13)


def test_log_std_is_averaged():
    a, b = (ParamVector(LAYOUT, np.zeros(LAYOUT.total_len)) for _ in range(2))
    a.flat[-2:] = [1.0, -1.0]
    b.flat[-2:] = [3.0, 1.0]
    assert fed.aggregate_fedavg([a, b]).block("log_std").tolist() == [2.0, 0.0]


def test_aggregate_errors():
    with pytest.raises(ValueError):
        fed.aggregate_fedavg([])
    other = build_mlp(3, 2, hidden=(8,))[0]
    with pytest.raises(ValueError):
        fed.aggregate_fedavg([random_params(np.random.default_rng(0), 1)[0], other])


# --- broadcast ---------------------------------------------------------------


def test_broadcast_gives_consensus_and_keeps_pon_stats():
    agents = pointmass_agents()
    rng = np.random.default_rng(0)
    for a in agents:
        a.stats = update(a.stats, summarize_batch(rng.normal(size=(5, 4))))
        a.opt = OptState(a.opt.policy.__class__(a.opt.policy.m + 1, a.opt.policy.v + 1, 7), a.opt.value)
    before = [a.stats for a in agents]
    g = (ParamVector(agents[0].policy.layout, rng.normal(size=agents[0].policy.total_len)), agents[0].value.copy())
    fed.broadcast(g, agents, Strategy.FEDAVG_PON)
    assert all(a.policy.equals(g[0]) and a.value.equals(g[1]) for a in agents)
    assert all(a.stats is s for a, s in zip(agents, before))
    assert all(a.opt.policy.t == 0 and np.all(a.opt.policy.m == 0) for a in agents)
    assert agents[0].policy.flat is not agents[1].policy.flat


def test_broadcast_shared_on_overwrites_stats():
    agents = pointmass_agents()
    for i, a in enumerate(agents):
        a.stats = RunningStats(10, np.full(4, float(2 * i)), np.full(4, 1.0 + i))
    fed.broadcast((agents[0].policy, agents[0].value), agents, Strategy.FEDAVG_SHARED_ON)
    for a in agents:
        assert a.stats.count == 30 and a.stats.mean.tolist() == [2.0] * 4 and a.stats.var.tolist() == [2.0] * 4


def test_broadcast_independent_is_noop():
    agents = pointmass_agents()
    before = [(a.policy.copy(), a.value.copy()) for a in agents]
    g = (ParamVector(agents[0].policy.layout, np.zeros(agents[0].policy.total_len)), agents[0].value)
    fed.broadcast(g, agents, Strategy.INDEPENDENT)
    assert all(a.policy.equals(p) and a.value.equals(v) for a, (p, v) in zip(agents, before))


def test_broadcast_keeps_optimizer_when_asked():
    agents = pointmass_agents()
    agents[0].opt = OptState(agents[0].opt.policy.__class__(agents[0].opt.policy.m + 1, agents[0].opt.policy.v, 3), agents[0].opt.value)
    fed.broadcast((agents[0].policy, agents[0].value), agents, Strategy.FEDAVG_NO_NORM, reset_optimizer=False)
    assert agents[0].opt.policy.t == 3


def test_broadcast_shape_mismatch():
    agents = pointmass_agents()
    other = build_mlp(3, 2)
    with pytest.raises(ValueError):
        fed.broadcast(other, agents, Strategy.FEDAVG_PON)


# --- shared normalization ----------------------------------------------------


def test_shared_normalization_mismatch():
    a = RunningStats(100, np.array([0.0]), np.array([1.0]))
    b = RunningStats(100, np.array([2.0]), np.array([1.0]))
    shared = merge_average([a, b])
    out = fed.normalize_shared(shared, np.array([0.0]), 1e-8)
    np.testing.assert_allclose(out, [(0.0 - 1.0) / np.sqrt(1.0 + 1e-8)], rtol=1e-15)
    assert out[0] != 0.0


def test_shared_matches_formula():
    s = RunningStats(7, np.array([1.5, -2.0]), np.array([4.0, 0.25]))
    x = np.array([3.5, -1.0])
    np.testing.assert_allclose(fed.normalize_shared(s, x, 1e-8), (x - s.mean) / np.sqrt(s.var + 1e-8), rtol=1e-15)


def test_homogeneous_agents_agree_statistically():
    rng = np.random.default_rng(1)
    streams = [rng.normal(2.0, 3.0, size=(20000, 1)) for _ in range(3)]
    local = [update(RunningStats.empty(1), summarize_batch(s)) for s in streams]
    shared = merge_average(local)
    x = np.array([4.0])
    for s in local:
        np.testing.assert_allclose(fed.normalize_shared(shared, x), normalize(s, x), atol=0.05)


# --- rounds ------------------------------------------------------------------


def test_round_bookkeeping():
    agents = pointmass_agents()
    for r in range(2):
        rec = fed.run_round(agents, Strategy.FEDAVG_PON, SMALL, r)
        assert rec.round == r and rec.aggregated
        assert [a.env_steps for a in rec.agents] == [SMALL.rollout_steps * (r + 1)] * 3
        assert len(rec.agents) == 3 and all(len(a.policy_w_norms) == 3 for a in rec.agents)


def test_consensus_after_every_aggregation():
    agents = pointmass_agents()
    for r in range(2):
        fed.run_round(agents, Strategy.FEDAVG_SHARED_ON, SMALL, r)
        assert all(a.policy.equals(agents[0].policy) and a.value.equals(agents[0].value) for a in agents)
        assert all(a.stats.equals(agents[0].stats) for a in agents)


def test_shared_count_is_the_federation_sample_total():
    agents = pointmass_agents()
    for r in range(3):
        fed.run_round(agents, Strategy.FEDAVG_SHARED_ON, SMALL, r)
        assert [a.stats.count for a in agents] == [3 * SMALL.rollout_steps * (r + 1)] * 3


def test_cadence_aggregates_every_e_rounds():
    agents = pointmass_agents()
    opts = FedOptions(aggregate_every=2)
    rec = fed.run_round(agents, Strategy.FEDAVG_NO_NORM, SMALL, 0, opts)
    assert not rec.aggregated and not agents[0].policy.equals(agents[1].policy)
    rec = fed.run_round(agents, Strategy.FEDAVG_NO_NORM, SMALL, 1, opts)
    assert rec.aggregated and agents[0].policy.equals(agents[1].policy)


def test_pon_stats_replay_bit_exactly():
    agents = pointmass_agents()
    replay = [RunningStats.empty(4) for _ in agents]
    for r in range(3):
        before = [a.stats for a in agents]
        raws = _round_capturing_raw(agents, r)
        for i, raw in enumerate(raws):
            for row in raw:
                replay[i] = update(replay[i], summarize_batch(row[None, :]))
            assert replay[i].equals(agents[i].stats)
            assert agents[i].stats.count == before[i].count + SMALL.rollout_steps


def _round_capturing_raw(agents, r):
    captured = {}
    real = ppo.collect_population

    def spy(*args, **kwargs):
        out = real(*args, **kwargs)
        captured["raw"] = out[0].raw_obs.copy()
        return out

    fed.collect_population = spy
    try:
        fed.run_round(agents, Strategy.FEDAVG_PON, SMALL, r)
    finally:
        fed.collect_population = real
    return captured["raw"]


def test_no_norm_leaves_stats_empty():
    agents = pointmass_agents()
    fed.run_round(agents, Strategy.FEDAVG_NO_NORM, SMALL, 0)
    assert all(a.stats.count == 0 for a in agents)


def test_independent_single_agent_is_plain_ppo_loop():
    agents = pointmass_agents(ks=(5.0,), seed=3)
    a0 = agents[0]
    policy, value = a0.policy.copy(), a0.value.copy()
    stats, opt = RunningStats.empty(4), OptState.fresh(policy, value)
    env = envs.VecEnv([a0.morphology], [generator(3, 0, Stream.ENV_RESET)])
    act_rng, shuf_rng = generator(3, 0, Stream.ACTION), generator(3, 0, Stream.SHUFFLE)
    opts = FedOptions(normalize_independent=True)
    for r in range(3):
        fed.run_round(agents, Strategy.INDEPENDENT, SMALL, r, opts)
        traj, stats = ppo.collect_rollout(policy, value, stats, env, SMALL.rollout_steps, act_rng, SMALL)
        policy, value, opt, _ = ppo.ppo_update(policy, value, opt, traj, SMALL, shuf_rng)
        assert a0.policy.equals(policy) and a0.value.equals(value) and a0.stats.equals(stats)


def test_identical_replicas_average_to_themselves():
    agents = pointmass_agents(ks=(4.0, 4.0, 4.0), stream_ids=(0, 0, 0))
    for r in range(2):
        fed.run_round(agents, Strategy.FEDAVG_NO_NORM, SMALL, r)
    solo = pointmass_agents(ks=(4.0,))
    for r in range(2):
        fed.run_round(solo, Strategy.FEDAVG_NO_NORM, SMALL, r)
    assert all(a.policy.equals(solo[0].policy) and a.value.equals(solo[0].value) for a in agents)


def test_lockstep_groups_match_separate_runs():
    together = [pointmass_agents(seed=s) for s in (0, 1)]
    apart = [pointmass_agents(seed=s) for s in (0, 1)]
    for r in range(2):
        joint = fed.run_round_lockstep(together, Strategy.FEDAVG_SHARED_ON, SMALL, r)
        alone = [fed.run_round(g, Strategy.FEDAVG_SHARED_ON, SMALL, r) for g in apart]
        for rj, ra in zip(joint, alone):
            for x, y in zip(rj.agents, ra.agents):
                assert x.losses == y.losses and np.array_equal(x.norm_obs_mean, y.norm_obs_mean)
    for gt, ga in zip(together, apart):
        for x, y in zip(gt, ga):
            assert x.policy.equals(y.policy) and x.stats.equals(y.stats)


def test_agent_slot_validation():
    agents = pointmass_agents()
    with pytest.raises(ValueError):
        fed.AgentSlot(0, agents[0].policy, agents[0].value, RunningStats.empty(3), agents[0].opt, agents[0].env,
                      agents[0].action_rng, agents[0].shuffle_rng)
    with pytest.raises(ValueError):
        FedOptions(aggregate_every=0)
