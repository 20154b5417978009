"""Flat, layer-indexed parameter storage.

A ``ParamVector`` owns one contiguous float64 buffer; layers and extra
parameters are views into it. The buffer may carry leading axes (one per
agent when a population is trained in lockstep), in which case every view
carries the same leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Layout:
    layer_shapes: tuple[tuple[int, int], ...]  # (fan_in, fan_out) per affine layer
    extra_shapes: tuple[tuple[str, int], ...] = ()

    @property
    def total_len(self) -> int:
        n = sum(i * o + o for i, o in self.layer_shapes)
        return n + sum(size for _, size in self.extra_shapes)

    def slices(self) -> list[tuple[str, slice, tuple[int, ...]]]:
        """(name, flat slice, shape) for every block, in storage order."""
        out = []
        off = 0
        for k, (i, o) in enumerate(self.layer_shapes):
            out.append((f"W{k}", slice(off, off + i * o), (i, o)))
            off += i * o
            out.append((f"b{k}", slice(off, off + o), (o,)))
            off += o
        for name, size in self.extra_shapes:
            out.append((name, slice(off, off + size), (size,)))
            off += size
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer_shapes": [list(s) for s in self.layer_shapes],
            "extra_shapes": [[name, size] for name, size in self.extra_shapes],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Layout":
        return cls(
            tuple((int(i), int(o)) for i, o in d["layer_shapes"]),
            tuple((str(n), int(s)) for n, s in d.get("extra_shapes", [])),
        )


class ParamVector:
    """All weights and biases of one network (or a stack of them)."""

    __slots__ = ("layout", "flat")

    def __init__(self, layout: Layout, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape[-1] != layout.total_len:
            raise ValueError(f"flat length {flat.shape[-1]} != layout total_len {layout.total_len}")
        self.layout = layout
        self.flat = flat

    @classmethod
    def from_parts(
        cls,
        layers: Sequence[tuple[np.ndarray, np.ndarray]],
        extra: dict[str, np.ndarray] | None = None,
    ) -> "ParamVector":
        extra = extra or {}
        shapes = tuple((int(W.shape[-2]), int(W.shape[-1])) for W, _ in layers)
        layout = Layout(shapes, tuple((k, int(np.shape(v)[-1])) for k, v in extra.items()))
        lead = np.shape(layers[0][0])[:-2] if layers else np.shape(next(iter(extra.values())))[:-1]
        parts = []
        for W, b in layers:
            parts.append(np.reshape(W, lead + (-1,)))
            parts.append(np.reshape(b, lead + (-1,)))
        for v in extra.values():
            parts.append(np.reshape(v, lead + (-1,)))
        return cls(layout, np.concatenate(parts, axis=-1))

    @property
    def lead_shape(self) -> tuple[int, ...]:
        return self.flat.shape[:-1]

    @property
    def total_len(self) -> int:
        return self.layout.total_len

    def block(self, name: str) -> np.ndarray:
        for n, sl, shape in self.layout.slices():
            if n == name:
                return self.flat[..., sl].reshape(self.lead_shape + shape)
        raise KeyError(name)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        blocks = {n: self.flat[..., sl].reshape(self.lead_shape + shape) for n, sl, shape in self.layout.slices()}
        return [(blocks[f"W{k}"], blocks[f"b{k}"]) for k in range(len(self.layout.layer_shapes))]

    @property
    def extra(self) -> dict[str, np.ndarray]:
        return {name: self.block(name) for name, _ in self.layout.extra_shapes}

    def blocks(self) -> list[np.ndarray]:
        return [self.flat[..., sl].reshape(self.lead_shape + shape) for _, sl, shape in self.layout.slices()]

    def weight_norms(self) -> np.ndarray:
        """Euclidean norm of each layer's flattened weight matrix, shape (*lead, n_layers)."""
        return np.stack([np.sqrt(np.sum(W * W, axis=(-2, -1))) for W, _ in self.layers], axis=-1)

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout, np.zeros_like(self.flat))

    def same_shape(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.flat.shape == other.flat.shape

    def equals(self, other: "ParamVector") -> bool:
        return self.same_shape(other) and np.array_equal(self.flat, other.flat)

    def to_dict(self) -> dict[str, Any]:
        if self.lead_shape:
            raise ValueError("only single (unstacked) ParamVectors serialize")
        return {
            "layout": self.layout.to_dict(),
            "layers": [[W.tolist(), b.tolist()] for W, b in self.layers],
            "extra": {k: v.tolist() for k, v in self.extra.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ParamVector":
        layout = Layout.from_dict(d["layout"])
        pv = cls.from_parts(
            [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in d["layers"]],
            {k: np.array(v, dtype=np.float64) for k, v in d.get("extra", {}).items()},
        )
        if pv.layout != layout:
            raise ValueError("serialized layout does not match its layers")
        return pv

    def __repr__(self) -> str:
        return f"ParamVector(layers={list(self.layout.layer_shapes)}, lead={self.lead_shape}, len={self.total_len})"


# gradients share the container
GradVector = ParamVector


def unflatten(layout: Layout, flat: np.ndarray) -> ParamVector:
    return ParamVector(layout, np.array(flat, dtype=np.float64, copy=True))


def stack(params: Iterable[ParamVector]) -> ParamVector:
    params = list(params)
    if not params:
        raise ValueError("cannot stack an empty list")
    layout = params[0].layout
    for p in params:
        if p.layout != layout or p.lead_shape:
            raise ValueError("stack requires unstacked ParamVectors with identical layouts")
    return ParamVector(layout, np.stack([p.flat for p in params]))


def unstack(stacked: ParamVector) -> list[ParamVector]:
    return [ParamVector(stacked.layout, stacked.flat[i].copy()) for i in range(stacked.flat.shape[0])]
