import pytest
import torch

from adnnperf.baseline import IterConfig, iterative_attack, run_baseline
from adnnperf.budget import L2, LINF, PerturbationBudget, batch_norms
from adnnperf.flops import hard_cost
from adnnperf.adnn import forward_with_trace
from adnnperf.metrics import budget_violations


def test_config_validation():
    with pytest.raises(ValueError):
        IterConfig(max_iterations=0)
    assert IterConfig(budget=PerturbationBudget(LINF, 0.05)).step == pytest.approx(0.005)


@pytest.mark.parametrize("budget", [PerturbationBudget(LINF, 0.05), PerturbationBudget(L2, 1.0)])
def test_attack_never_worse_than_seed_and_in_budget(skip_model, inputs, budget):
    for x in inputs[:4]:
        res = iterative_attack(skip_model, x, IterConfig(max_iterations=10, budget=budget))
        _, trace = forward_with_trace(skip_model, x)
        assert res.best_cost >= hard_cost(trace, skip_model.profile)
        assert float(batch_norms((res.x_adv - x).unsqueeze(0), budget.norm_order)) <= budget.epsilon + 1e-6
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1
        assert res.cost_history == sorted(res.cost_history)
        assert res.iterations == 10


def test_reported_cost_matches_trace(skip_model, inputs):
    res = iterative_attack(skip_model, inputs[0], IterConfig(max_iterations=5))
    _, trace = forward_with_trace(skip_model, res.x_adv)
    assert hard_cost(trace, skip_model.profile) == res.best_cost


def test_run_baseline_suite(skip_model, inputs):
    suite = run_baseline(skip_model, inputs[:3], IterConfig(max_iterations=3), seed_ids=[7, 8, 9], labels=[0, 1, 2])
    assert suite.producer == "iterative_baseline"
    assert suite.seed_ids == [7, 8, 9]
    assert budget_violations(suite) == 0
    assert suite.meta["attempted"] == 3


def test_time_budget_truncates(skip_model, inputs):
    suite = run_baseline(skip_model, inputs, IterConfig(max_iterations=3), time_budget=0.0)
    assert len(suite) == 0
    assert suite.meta["requested"] == len(inputs)
