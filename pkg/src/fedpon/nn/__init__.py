from .network import (
    PolicyOutput,
    build_mlp,
    forward_policy,
    forward_value,
    gaussian_log_prob,
)
from .optim import AdamState, adam_step
from .params import GradVector, Layout, ParamVector, stack, unflatten, unstack

__all__ = [
    "AdamState",
    "GradVector",
    "Layout",
    "ParamVector",
    "PolicyOutput",
    "adam_step",
    "build_mlp",
    "forward_policy",
    "forward_value",
    "gaussian_log_prob",
    "stack",
    "unflatten",
    "unstack",
]
