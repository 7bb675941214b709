"""Hardware-independent FLOPs accounting for gated models.

Counts are 2 x multiply-accumulates. The always-executed part of a model
(stem, gates, classifier) is tracked apart from the gated blocks so that
percentage increments only see what an input can actually change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import torch

CONDITIONAL_SKIPPING = "conditional_skipping"
EARLY_TERMINATION = "early_termination"


@dataclass(frozen=True)
class LayerShape:
    """Dimensions of one convolution or dense layer.

    For ``kind="dense"`` only ``c_in``/``c_out`` are used (as d_in/d_out).
    """

    kind: str
    c_in: int
    c_out: int
    h_out: int = 1
    w_out: int = 1
    kernel: int = 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "h_out": self.h_out,
            "w_out": self.w_out,
            "kernel": self.kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerShape":
        return cls(**d)


def conv(c_in: int, c_out: int, h_out: int, w_out: int, kernel: int = 3) -> LayerShape:
    return LayerShape("conv", c_in, c_out, h_out, w_out, kernel)


def dense(d_in: int, d_out: int) -> LayerShape:
    return LayerShape("dense", d_in, d_out)


def layer_flops(layer: LayerShape) -> float:
    if layer.kind == "conv":
        dims = (layer.kernel, layer.c_in, layer.c_out, layer.h_out, layer.w_out)
        if min(dims) <= 0:
            raise ValueError(f"non-positive convolution dimension in {layer}")
        k = layer.kernel
        return float(2 * k * k * layer.c_in * layer.c_out * layer.h_out * layer.w_out)
    if layer.kind == "dense":
        if layer.c_in <= 0 or layer.c_out <= 0:
            raise ValueError(f"non-positive dense dimension in {layer}")
        return float(2 * layer.c_in * layer.c_out)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def block_flops(layer_shape: Union[LayerShape, Iterable[LayerShape]]) -> float:
    """FLOPs of a single layer, or the sum over a block's layers."""
    if isinstance(layer_shape, LayerShape):
        return layer_flops(layer_shape)
    return float(sum(layer_flops(layer) for layer in layer_shape))


@dataclass(frozen=True)
class CostProfile:
    block_weights: tuple
    stem_flops: float
    mechanism: str = CONDITIONAL_SKIPPING
    total: float = field(init=False)

    def __post_init__(self):
        weights = tuple(float(w) for w in self.block_weights)
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ValueError("block weights must be finite and non-negative")
        if self.stem_flops < 0:
            raise ValueError("stem_flops must be non-negative")
        object.__setattr__(self, "block_weights", weights)
        object.__setattr__(self, "stem_flops", float(self.stem_flops))
        object.__setattr__(self, "total", float(self.stem_flops) + math.fsum(weights))

    @property
    def num_blocks(self) -> int:
        return len(self.block_weights)

    def scaled(self, factor: float) -> "CostProfile":
        return CostProfile(
            tuple(w * factor for w in self.block_weights),
            self.stem_flops * factor,
            self.mechanism,
        )

    def to_dict(self) -> dict:
        return {
            "block_weights": list(self.block_weights),
            "stem_flops": self.stem_flops,
            "mechanism": self.mechanism,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostProfile":
        return cls(tuple(d["block_weights"]), d["stem_flops"], d.get("mechanism", CONDITIONAL_SKIPPING))


def hard_cost(trace, profile: CostProfile) -> float:
    """Activated FLOPs: fixed cost plus the weight of every activated block.

    ``trace`` is a BlockTrace or a plain sequence of booleans. For early
    termination the trace's activated flags already mark the executed prefix.
    """
    activated: Sequence[bool] = getattr(trace, "activated", trace)
    if len(activated) != profile.num_blocks:
        raise ValueError(
            f"trace has {len(activated)} blocks, profile has {profile.num_blocks}"
        )
    return profile.stem_flops + math.fsum(
        w for w, on in zip(profile.block_weights, activated) if on
    )


def _as_tensor(values, like=None) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(values, dtype=dtype)


def activation_probs(gate_scores, thresholds, temperature: float, mechanism: str = CONDITIONAL_SKIPPING):
    """Differentiable probability that each block is executed.

    Skipping: sigmoid((B_i - tau_i) / T). Early exit: block i runs only if no
    earlier exit fired, so the probability is a running product of
    (1 - sigmoid) over the preceding exits.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = _as_tensor(gate_scores)
    taus = _as_tensor(thresholds, scores).to(scores.dtype)
    fire = torch.sigmoid((scores - taus) / temperature)
    if mechanism == CONDITIONAL_SKIPPING:
        return fire
    if mechanism == EARLY_TERMINATION:
        stay = 1.0 - fire[..., :-1]
        ones = torch.ones_like(fire[..., :1])
        return torch.cumprod(torch.cat([ones, stay], dim=-1), dim=-1)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def soft_cost(gate_scores, thresholds, profile: CostProfile, temperature: float = 0.1):
    """Smooth surrogate of :func:`hard_cost` over gate scores.

    Accepts a single score vector or a batch (last dim = blocks); returns a
    tensor so gradients reach the gate scores.
    """
    probs = activation_probs(gate_scores, thresholds, temperature, profile.mechanism)
    weights = torch.as_tensor(profile.block_weights, dtype=probs.dtype, device=probs.device)
    if probs.shape[-1] != weights.shape[0]:
        raise ValueError("gate score length does not match the profile")
    return profile.stem_flops + (probs * weights).sum(-1)


def normalized_cost(cost, profile: CostProfile):
    span = profile.total - profile.stem_flops
    if span <= 0:
        raise ValueError("degenerate profile: total equals stem_flops")
    return (cost - profile.stem_flops) / span
