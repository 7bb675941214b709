"""Perturbation budgets and the projection shared by every test generator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

L2 = "L2"
LINF = "Linf"


@dataclass(frozen=True)
class PerturbationBudget:
    norm_order: str = LINF
    epsilon: float = 0.03

    def __post_init__(self):
        if self.norm_order not in (L2, LINF):
            raise ValueError(f"norm_order must be {L2!r} or {LINF!r}, got {self.norm_order!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {"norm_order": self.norm_order, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationBudget":
        return cls(d["norm_order"], float(d["epsilon"]))


def batch_norms(delta: torch.Tensor, norm_order: str) -> torch.Tensor:
    """Per-sample p-norm of a (B, ...) tensor."""
    flat = delta.flatten(1)
    if norm_order == L2:
        return flat.norm(p=2, dim=1)
    if norm_order == LINF:
        return flat.abs().amax(dim=1)
    raise ValueError(f"unknown norm order {norm_order!r}")


def clip_sample(x: torch.Tensor, x_perturbed: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Project ``x_perturbed - x`` onto the budget ball, then clamp into [0, 1].

    Works on single samples or batches (first dim = batch when 4-D) and is
    differentiable almost everywhere.
    """
    if x.shape != x_perturbed.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_perturbed.shape)}")
    single = x.dim() == 3
    if single:
        x, x_perturbed = x.unsqueeze(0), x_perturbed.unsqueeze(0)
    delta = x_perturbed - x
    eps = budget.epsilon
    if budget.norm_order == LINF:
        inside = delta.abs() <= eps
        projected = x + delta.clamp(-eps, eps)
    else:
        norms = batch_norms(delta.double(), L2).view(-1, *([1] * (delta.dim() - 1)))
        inside = norms <= eps
        # land strictly inside: float32 rounding of x + delta can add up to
        # about sqrt(D) ulps to the norm, and that must not push a point out
        slack = math.sqrt(delta[0].numel()) * torch.finfo(torch.float32).eps
        radius = max(eps - max(eps * 1e-5, slack), 0.5 * eps)
        projected = x + delta * (radius / norms.clamp_min(1e-12)).to(delta.dtype)
    # keeping in-budget entries verbatim makes the operator bit-exactly idempotent
    out = torch.where(inside, x_perturbed, projected).clamp(0.0, 1.0)
    return out[0] if single else out
