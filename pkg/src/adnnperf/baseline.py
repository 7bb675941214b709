"""Per-sample iterative baseline: projected gradient ascent on the soft cost.

Each seed gets its own optimisation loop, so generation time scales with
``max_iterations``. This is the reference point the one-shot generator is
compared against.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import torch

from .budget import L2, LINF, PerturbationBudget, batch_norms, clip_sample
from .flops import hard_cost, normalized_cost, soft_cost

logger = logging.getLogger(__name__)


@dataclass
class IterConfig:
    max_iterations: int = 300
    balance_weight: float = 1e-6
    step_size: Optional[float] = None  # defaults to epsilon / 10
    temperature: float = 0.1
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be >= 0")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.budget.epsilon / 10

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "balance_weight": self.balance_weight,
            "step_size": self.step,
            "temperature": self.temperature,
            "budget": self.budget.to_dict(),
        }


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    seconds: float
    best_cost: float
    cost_history: list  # best-so-far hard cost after each iteration
    iterations: int
    warning: Optional[str] = None


def iterative_attack(model, x: torch.Tensor, config: IterConfig) -> AttackResult:
    """Maximise soft_cost(x + d) - balance_weight * ||d||_p for one input.

    Linf uses sign-gradient steps, L2 normalised-gradient steps; every
    iterate is projected with :func:`clip_sample`. The best iterate by hard
    cost is returned (the seed itself counts as iterate zero).
    """
    budget = config.budget
    profile = model.profile
    taus = model.thresholds
    model.eval()
    x = x.detach().reshape(1, *model.spec.input_shape)
    start = time.perf_counter()

    with torch.no_grad():
        _, scores, executed = model.gated_forward(x)
    best_x = x.clone()
    best_cost = hard_cost(executed[0].bool().tolist(), profile)
    history = []
    warning = None
    x_cur = x.clone()
    for _ in range(config.max_iterations):
        x_var = x_cur.clone().requires_grad_(True)
        _, scores, _ = model.gated_forward(x_var)
        cost = normalized_cost(soft_cost(scores, taus, profile, config.temperature), profile).sum()
        penalty = batch_norms(x_var - x, budget.norm_order).sum()
        objective = cost - config.balance_weight * penalty
        (grad,) = torch.autograd.grad(objective, x_var)
        if not torch.isfinite(grad).all():
            warning = "non-finite gradient; returning best iterate so far"
            logger.warning(warning)
            break
        with torch.no_grad():
            if budget.norm_order == LINF:
                step = config.step * grad.sign()
            else:
                step = config.step * grad / grad.flatten().norm().clamp_min(1e-12)
            x_cur = clip_sample(x, x_cur + step, budget)
            _, _, executed = model.gated_forward(x_cur)
            cost_now = hard_cost(executed[0].bool().tolist(), profile)
        if cost_now > best_cost:
            best_cost, best_x = cost_now, x_cur.clone()
        history.append(best_cost)
    seconds = time.perf_counter() - start
    return AttackResult(best_x[0], seconds, best_cost, history, len(history), warning)


def run_baseline(model, seeds, config: IterConfig, time_budget: Optional[float] = None, seed_ids=None, labels=None):
    """Attack every seed in turn and collect a test suite.

    With ``time_budget`` (seconds), seeds are processed until the wall clock
    runs out; the remaining seeds are not attacked and are left out of the
    suite. ``meta["attempted"]`` records how many were finished.
    """
    from .metrics import build_suite

    seeds = torch.as_tensor(seeds)
    ids = list(range(len(seeds))) if seed_ids is None else list(seed_ids)
    start = time.perf_counter()
    advs, times, kept = [], [], []
    warnings = 0
    for i, x in enumerate(seeds):
        if time_budget is not None and time.perf_counter() - start >= time_budget:
            break
        res = iterative_attack(model, x, config)
        warnings += res.warning is not None
        advs.append(res.x_adv)
        times.append(res.seconds)
        kept.append(i)
    gen = torch.stack(advs) if advs else torch.empty(0, *seeds.shape[1:])
    suite = build_suite(
        model,
        seeds[kept] if kept else torch.empty(0, *seeds.shape[1:]),
        gen,
        times,
        config.budget,
        "iterative_baseline",
        [ids[i] for i in kept],
        None if labels is None else [int(labels[i]) for i in kept],
        {"config": config.to_dict(), "attempted": len(kept), "requested": len(seeds), "warnings": warnings},
    )
    return suite
