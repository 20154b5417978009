"""Fixtures and oracles shared by the unit and acceptance suites."""

import numpy as np

from fedpon import ppo
from fedpon.nn import ParamVector, build_mlp
from fedpon.nn.network import GraphParams, log_prob_batch, mlp_forward, policy_log_std


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b):
    # entries far below the gradient's scale are dominated by difference noise
    floor = 1e-3 * max(1.0, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def ppo_fixture(seed, n=4, obs_dim=3, act_dim=2, hidden=(8, 8), margin=0.02):
    """Small nets and an n-transition batch whose ratios avoid the clip kinks."""
    rng = np.random.default_rng(seed)
    policy, value = build_mlp(obs_dim, act_dim, hidden, seed=seed)
    policy = ParamVector(policy.layout, policy.flat + 0.3 * rng.normal(size=policy.total_len))
    value = ParamVector(value.layout, value.flat + 0.3 * rng.normal(size=value.total_len))
    obs = rng.normal(size=(n, obs_dim))
    actions = rng.normal(size=(n, act_dim))
    logp = log_prob_batch(mlp_forward(policy.layers, obs), policy_log_std(policy), actions)
    cfg = ppo.PpoConfig(entropy_coef=0.01)
    # ratios spread over both sides of the clip range, never within `margin` of a kink
    bands = [(0.5, 1 - cfg.clip - margin), (1 - cfg.clip + margin, 1 + cfg.clip - margin), (1 + cfg.clip + margin, 1.6)]
    ratios = np.array([rng.uniform(*bands[i % 3]) for i in range(n)])
    old = logp - np.log(ratios)
    adv = rng.normal(size=n)
    adv[np.abs(adv) < 0.1] = 0.5
    returns = rng.normal(size=n)
    return policy, value, obs, actions, old, adv, returns, cfg


def total_loss(policy, value, obs, actions, old, adv, returns, cfg):
    loss, _ = ppo.ppo_loss(GraphParams(policy), GraphParams(value), obs, actions, old, adv, returns, cfg)
    return float(loss.value)


def ppo_gradient_error(seed):
    """Max relative error of the analytic PPO gradient against central differences."""
    policy, value, obs, actions, old, adv, returns, cfg = ppo_fixture(seed)
    _, gp, gv, _ = ppo.loss_and_grads(policy, value, obs, actions, old, adv, returns, cfg)
    fp = fd_grad(lambda f: total_loss(ParamVector(policy.layout, f), value, obs, actions, old, adv, returns, cfg), policy.flat)
    fv = fd_grad(lambda f: total_loss(policy, ParamVector(value.layout, f), obs, actions, old, adv, returns, cfg), value.flat)
    return max(max_rel_err(gp.flat, fp), max_rel_err(gv.flat, fv))

