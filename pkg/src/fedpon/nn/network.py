"""Tanh MLP actor-critic.

Every routine accepts either single parameters (``W`` is ``(in, out)``,
observations ``(B, in)``) or a stack with a leading agent axis (``W`` is
``(n, in, out)``, observations ``(n, B, in)``). Each agent's slice of a stacked
computation is bit-identical to running that agent alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .params import Layout, ParamVector

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD = "log_std"


@dataclass(frozen=True)
class PolicyOutput:
    mean: np.ndarray
    std: np.ndarray


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    """Orthogonal matrix of shape (fan_in, fan_out) scaled by ``gain``."""
    big, small = max(fan_in, fan_out), min(fan_in, fan_out)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q


def build_mlp(
    obs_dim: int,
    act_dim: int,
    hidden: Sequence[int] = (64, 64),
    seed: int | np.random.SeedSequence | np.random.Generator = 0,
) -> tuple[ParamVector, ParamVector]:
    """Policy (Gaussian mean + state-independent log_std) and value networks."""
    if obs_dim < 1 or act_dim < 1:
        raise ValueError("obs_dim and act_dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def net(out_dim: int, head_gain: float) -> list[tuple[np.ndarray, np.ndarray]]:
        sizes = [obs_dim, *hidden]
        layers = [(orthogonal(rng, i, o, np.sqrt(2.0)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])]
        layers.append((orthogonal(rng, sizes[-1], out_dim, head_gain), np.zeros(out_dim)))
        return layers

    policy = ParamVector.from_parts(net(act_dim, 0.01), {LOG_STD: np.zeros(act_dim)})
    value = ParamVector.from_parts(net(1, 1.0))
    return policy, value


def mlp_forward(layers: Sequence[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    h = x
    last = len(layers) - 1
    for k, (W, b) in enumerate(layers):
        h = np.matmul(h, W) + b[..., None, :]
        if k < last:
            h = np.tanh(h)
    return h


def policy_mean(params: ParamVector, obs: np.ndarray) -> np.ndarray:
    """Gaussian mean for a batch of observations, shape (..., B, act_dim)."""
    return mlp_forward(params.layers, obs)


def policy_log_std(params: ParamVector) -> np.ndarray:
    return params.block(LOG_STD)


def value_batch(params: ParamVector, obs: np.ndarray) -> np.ndarray:
    """State values for a batch, shape (..., B)."""
    return mlp_forward(params.layers, obs)[..., 0]


def _check_obs(params: ParamVector, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    fan_in = params.layout.layer_shapes[0][0]
    if obs.shape != (fan_in,):
        raise ValueError(f"observation shape {obs.shape} does not match network input ({fan_in},)")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    return obs


def forward_policy(params: ParamVector, obs: np.ndarray) -> PolicyOutput:
    obs = _check_obs(params, obs)
    mean = policy_mean(params, obs[None, :])[0]
    return PolicyOutput(mean, np.exp(policy_log_std(params)))


def forward_value(params: ParamVector, obs: np.ndarray) -> float:
    obs = _check_obs(params, obs)
    return float(value_batch(params, obs[None, :])[0])


def gaussian_log_prob(out: PolicyOutput, action: np.ndarray) -> float:
    action = np.asarray(action, dtype=np.float64)
    return float(log_prob_batch(out.mean, np.log(out.std), action))


def log_prob_batch(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the last axis.

    ``log_std`` broadcasts against ``mean`` with a batch axis inserted, so a
    stacked ``(n, act)`` log_std pairs with ``(n, B, act)`` means.
    """
    if np.ndim(log_std) >= 2 and np.ndim(mean) == np.ndim(log_std) + 1:
        log_std = log_std[..., None, :]
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * (z * z) - log_std - 0.5 * LOG_2PI, axis=-1)


# --- differentiable versions -------------------------------------------------


class GraphParams:
    """Autodiff leaves for every block of a ParamVector."""

    def __init__(self, params: ParamVector):
        self.params = params
        self.leaves = [ad.leaf(b) for b in params.blocks()]
        names = [n for n, _, _ in params.layout.slices()]
        self.by_name = dict(zip(names, self.leaves))
        self.layers = [(self.by_name[f"W{k}"], self.by_name[f"b{k}"]) for k in range(len(params.layout.layer_shapes))]

    def grad_vector(self) -> ParamVector:
        lead = self.params.lead_shape
        parts = [
            (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)).reshape(lead + (-1,))
            for leaf in self.leaves
        ]
        return ParamVector(self.params.layout, np.concatenate(parts, axis=-1))


def mlp_graph(gp: GraphParams, x: np.ndarray | ad.Tensor) -> ad.Tensor:
    h = ad.as_tensor(x)
    last = len(gp.layers) - 1
    for k, (W, b) in enumerate(gp.layers):
        h = ad.affine(h, W, b)
        if k < last:
            h = ad.tanh(h)
    return h


def log_prob_graph(gp: GraphParams, obs: np.ndarray, action: np.ndarray) -> ad.Tensor:
    mean = mlp_graph(gp, obs)
    log_std = gp.by_name[LOG_STD]
    log_std = ad.reshape(log_std, log_std.shape[:-1] + (1, log_std.shape[-1]))
    z = (ad.as_tensor(action) - mean) * ad.exp(-log_std)
    return ad.sum(-0.5 * ad.square(z) - log_std - 0.5 * LOG_2PI, axis=-1)


def entropy_graph(gp: GraphParams) -> ad.Tensor:
    """Gaussian entropy per agent (state-independent std)."""
    return ad.sum(gp.by_name[LOG_STD] + 0.5 * (LOG_2PI + 1.0), axis=-1)


def value_graph(gp: GraphParams, obs: np.ndarray) -> ad.Tensor:
    out = mlp_graph(gp, obs)
    return ad.reshape(out, out.shape[:-1])


def layout_for(obs_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64)) -> tuple[Layout, Layout]:
    sizes = [obs_dim, *hidden]
    shapes = tuple(zip(sizes, sizes[1:]))
    return (
        Layout(shapes + ((sizes[-1], act_dim),), ((LOG_STD, act_dim),)),
        Layout(shapes + ((sizes[-1], 1),)),
    )
