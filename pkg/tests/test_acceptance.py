"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` (or
``python tests/test_acceptance.py``); the lines are printed in the
"acceptance criteria" section of the terminal summary.

Every criterion trains or loads what it needs from the shared fixtures
below. Training happens once per session, single-threaded, with fixed
seeds.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from adnnperf import gan, metrics, mitigation
from adnnperf.adnn import AdnnTrainConfig, build_model, reference_spec, train_adnn
from adnnperf.baseline import IterConfig, run_baseline
from adnnperf.budget import L2, PerturbationBudget, batch_norms
from adnnperf.data import synthetic_dataset
from adnnperf.flops import CONDITIONAL_SKIPPING, EARLY_TERMINATION, CostProfile, hard_cost, soft_cost
from adnnperf.pipeline import ExperimentConfig, run_pipeline

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

RESULTS = []

BUDGET = PerturbationBudget(L2, 10.0)
GAN_CONFIG = dict(alpha=10.0, learning_rate=1e-3, max_epochs=10, temperature=0.4, budget=BUDGET)
HELDOUT = 200
TEST_ID_BASE = 1_000_000


def record(name, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def world():
    torch.set_num_threads(1)
    ds = synthetic_dataset(n_train=3000, n_test=1200)
    model, acc = train_adnn(build_model(reference_spec(CONDITIONAL_SKIPPING), 0), ds, AdnnTrainConfig(epochs=12))
    t0 = time.perf_counter()
    generator, _, history = gan.train(model, ds.x_train[:2000], gan.TrainConfig(**GAN_CONFIG))
    train_seconds = time.perf_counter() - t0
    ids = [TEST_ID_BASE + i for i in range(HELDOUT)]
    x, y = ds.x_test[:HELDOUT], ds.y_test[:HELDOUT]
    generated, times = gan.generate_samples(generator, x, BUDGET)
    suite = metrics.build_suite(model, x, generated, times, BUDGET, "deepperform", ids, y)
    return {
        "ds": ds,
        "model": model,
        "accuracy": acc,
        "generator": generator,
        "history": history,
        "train_seconds": train_seconds,
        "suite": suite,
        "gen_seconds": train_seconds + sum(times),
    }


@pytest.fixture(scope="module")
def baseline_suite(world):
    # matched seeds: the first 20 held-out inputs, full 300-iteration budget
    n = 20
    cfg = IterConfig(max_iterations=300, budget=BUDGET)
    return run_baseline(world["model"], world["suite"].seeds[:n], cfg, seed_ids=world["suite"].seed_ids[:n])


def brute_force_cost(activated, weights, stem):
    total = stem
    for i in range(len(weights)):
        if activated[i]:
            total = total + weights[i]
    return total


def test_cost_oracle_equivalence():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    mismatches = 0
    for mech in (CONDITIONAL_SKIPPING, EARLY_TERMINATION):
        profile = reference_spec(mech).cost_profile()
        n = profile.num_blocks
        for _ in range(1000):
            if mech == EARLY_TERMINATION:
                k = int(rng.integers(0, n))
                trace = [i <= k for i in range(n)]
            else:
                trace = [bool(v) for v in rng.integers(0, 2, size=n)]
            if hard_cost(trace, profile) != brute_force_cost(trace, profile.block_weights, profile.stem_flops):
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = record("cost oracle equivalence", mismatches == 0 and elapsed < 1.0, f"{mismatches} mismatches over 2x1000 traces in {elapsed:.3f}s (need 0, <1s)")
    assert ok


def test_budget_soundness(world, baseline_suite):
    t0 = time.perf_counter()
    extra = synthetic_dataset(n_train=10_000, n_test=1, seed=11).x_train
    g = world["generator"]
    violations, count = 0, 0
    with torch.no_grad():
        for i in range(0, len(extra), 500):
            x = extra[i : i + 500]
            x_bar = gan.perturb(g, x, BUDGET)
            norms = batch_norms((x_bar - x).double(), BUDGET.norm_order)
            bad = (norms > BUDGET.epsilon + 1e-6) | (x_bar < 0).flatten(1).any(1) | (x_bar > 1).flatten(1).any(1)
            violations += int(bad.sum())
            count += len(x)
    violations += metrics.budget_violations(baseline_suite) + metrics.budget_violations(world["suite"])
    count += len(baseline_suite) + len(world["suite"])
    elapsed = time.perf_counter() - t0
    ok = record("budget soundness", violations == 0 and count >= 10_000 and elapsed < 60, f"{violations} violations over {count} samples in {elapsed:.1f}s (need 0 over >=10000, <60s)")
    assert ok


def test_soft_hard_consistency():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_gap, worst_rel = 0.0, 0.0
    for mech in (CONDITIONAL_SKIPPING, EARLY_TERMINATION):
        profile = reference_spec(mech).cost_profile()
        n = profile.num_blocks
        for _ in range(1000):
            taus = rng.uniform(0.2, 0.8, size=n)
            side = rng.choice([-1.0, 1.0], size=n)
            scores = np.clip(taus + side * rng.uniform(0.1, 0.2, size=n), 0, 1)
            if mech == EARLY_TERMINATION:
                fired = scores > taus
                k = int(np.argmax(fired)) if fired.any() else n - 1
                trace = [i <= k for i in range(n)]
            else:
                trace = list(scores > taus)
            soft = float(soft_cost(torch.tensor(scores, dtype=torch.float64), taus.tolist(), profile, 1e-3))
            worst_gap = max(worst_gap, abs(soft - hard_cost(trace, profile)) / profile.total)
        for _ in range(50):
            taus = rng.uniform(0.3, 0.7, size=n).tolist()
            s = torch.tensor(rng.uniform(0.2, 0.8, size=n), dtype=torch.float64, requires_grad=True)
            (grad,) = torch.autograd.grad(soft_cost(s, taus, profile, 0.1), s)
            h = 1e-6
            fd = torch.zeros(n, dtype=torch.float64)
            for i in range(n):
                e = torch.zeros(n, dtype=torch.float64)
                e[i] = h
                fd[i] = (soft_cost(s.detach() + e, taus, profile, 0.1) - soft_cost(s.detach() - e, taus, profile, 0.1)) / (2 * h)
            worst_rel = max(worst_rel, float((grad - fd).norm() / fd.norm()))
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 1e-3 and worst_rel < 1e-4 and elapsed < 60
    record(
        "soft/hard consistency",
        ok,
        f"max |soft-hard|/total {worst_gap:.2e} (<=1e-3), max gradient rel. error {worst_rel:.2e} over 100 points (<1e-4), {elapsed:.1f}s",
    )
    assert ok


def test_desk_scale_effectiveness(world):
    incs = [metrics.i_flops(e) for e in world["suite"].entries]
    mean, mx = float(np.mean(incs)), float(np.max(incs))
    epochs = len(world["history"].epochs)
    minutes = world["gen_seconds"] / 60
    ok = mean >= 15 and mx >= 40 and epochs <= 30 and minutes <= 20
    record(
        "desk-scale effectiveness",
        ok,
        f"mean I-FLOPs {mean:.2f}% (>=15), max {mx:.2f}% (>=40) over {len(incs)} held-out seeds; "
        f"{epochs} epochs (<=30), {minutes:.1f} min (<=20); model accuracy {world['accuracy']:.3f}",
    )
    assert ok


def test_efficiency_shape(world, baseline_suite):
    rep = metrics.overhead_report(world["suite"], baseline_suite, world["train_seconds"])
    ratio = rep["gan_per_sample"] / rep["baseline_per_sample"]
    ok = ratio <= 0.1 and rep["crossover_n"] is not None
    crossover = "none" if rep["crossover_n"] is None else f"{rep['crossover_n']:.0f} samples"
    record(
        "efficiency shape",
        ok,
        f"GAN {rep['gan_per_sample'] * 1e3:.2f} ms/sample vs 300-iteration baseline {rep['baseline_per_sample']:.3f} s/sample "
        f"(ratio {ratio:.4f}, need <=0.1); total-cost crossover at {crossover}",
    )
    assert ok


def test_equal_time_validity(world):
    model, g, ds = world["model"], world["generator"], world["ds"]
    x = ds.x_test[HELDOUT : HELDOUT + 1000]
    ids = [TEST_ID_BASE + HELDOUT + i for i in range(len(x))]
    t0 = time.perf_counter()
    generated, times = gan.generate_samples(g, x, BUDGET)
    budget_seconds = time.perf_counter() - t0
    gan_suite = metrics.build_suite(model, x, generated, times, BUDGET, "deepperform", ids)
    base = run_baseline(model, x, IterConfig(max_iterations=300, budget=BUDGET), time_budget=budget_seconds, seed_ids=ids)
    eta_gan, eta_base = metrics.degradation_success(gan_suite), metrics.degradation_success(base)
    ok = eta_gan > eta_base
    record("equal-time validity", ok, f"in {budget_seconds:.2f}s: GAN eta {eta_gan}/{len(gan_suite)} vs baseline eta {eta_base}/{len(base)} (need GAN > baseline)")
    assert ok


def test_coverage(world, baseline_suite):
    model = world["model"]
    n = len(baseline_suite)
    gan_matched = metrics.build_suite(
        model, world["suite"].seeds[:n], world["suite"].generated[:n], [0.0] * n, BUDGET, "deepperform", world["suite"].seed_ids[:n]
    )
    cg, cb = metrics.block_coverage(gan_matched, model), metrics.block_coverage(baseline_suite, model)
    union = metrics.block_coverage(gan_matched.union(baseline_suite), model)
    ok = 0 <= cb <= 1 and 0 <= cg <= 1 and union >= max(cg, cb) and cg >= cb
    record("coverage", ok, f"GAN {cg:.3f} vs baseline {cb:.3f} on {n} matched seeds (need GAN >= baseline); union {union:.3f} >= both")
    assert ok


def test_threshold_sensitivity(world):
    rows = metrics.threshold_sweep(world["model"], world["suite"])
    maxima = [r["max_i_flops"] for r in rows]
    ratio = max(maxima) / min(maxima) if min(maxima) > 0 else math.inf
    ok = ratio < 3
    detail = ", ".join(f"tau {r['tau']}: {r['max_i_flops']:.1f}%" for r in rows)
    record("threshold sensitivity", ok, f"max I-FLOPs {detail}; largest/smallest {ratio:.2f} (need <3)")
    assert ok


def test_flops_latency_correlation(world):
    model, suite = world["model"], world["suite"]
    xs = torch.cat([suite.seeds[:100], suite.generated[:100]])
    costs, lat = [], []
    samples = [[] for _ in xs]
    for _ in range(15):  # interleave inputs so drift spreads evenly
        for i, x in enumerate(xs):
            samples[i] += metrics.measure_latency(model, x, repeats=1, warmup=1)
    for i, x in enumerate(xs):
        _, trace = model.trace_one(x.unsqueeze(0))
        costs.append(hard_cost(trace, model.profile))
        lat.append(statistics.median(samples[i]))
    r = metrics.pcc(costs, lat)
    affine_ok = metrics.pcc([1, 2, 3], [5, 7, 9]) == 1.0 and metrics.pcc([1, 2, 3], [3, 2, 1]) == -1.0
    ok = r > 0.5 and affine_ok
    record("FLOPs-latency correlation", ok, f"PCC {r:.3f} over {len(xs)} inputs (need >0.5); affine inputs give +-1 exactly: {affine_ok}")
    assert ok


def test_mitigations(world):
    model, ds, g = world["model"], world["ds"], world["generator"]
    t0 = time.perf_counter()

    # retraining on (seed, generated) pairs from training inputs
    x, y = ds.x_train[:2000], ds.y_train[:2000]
    gen_train, times = gan.generate_samples(g, x, BUDGET)
    paired = metrics.build_suite(model, x, gen_train, times, BUDGET, "deepperform", list(range(2000)), y)
    retrained, rep = mitigation.retrain_adnn(model, paired, beta=1e-3, epochs=20, heldout=(ds.x_test, ds.y_test))
    before = float(np.mean([metrics.i_flops(e) for e in world["suite"].entries]))
    fresh, _, _ = gan.train(retrained, x, gan.TrainConfig(**GAN_CONFIG))
    held = world["suite"]
    regen, rtimes = gan.generate_samples(fresh, held.seeds, BUDGET)
    after_suite = metrics.build_suite(retrained, held.seeds, regen, rtimes, BUDGET, "deepperform", held.seed_ids)
    after = float(np.mean([metrics.i_flops(e) for e in after_suite.entries]))
    drop = (before - after) / before

    # detector: 1000 + 1000 training pairs, held-out suite disjoint by seed id
    det = mitigation.train_detector(
        mitigation.extract_features(model, paired.seeds[:1000]),
        mitigation.extract_features(model, paired.generated[:1000]),
        rng_seed=0,
        signature=mitigation.feature_signature(model),
    )
    res = mitigation.evaluate_detector(det, model, held, train_seed_ids=paired.seed_ids[:1000], timing_samples=200)
    overhead = res["extra_latency_seconds"] / res["inference_latency_seconds"]
    minutes = (time.perf_counter() - t0) / 60

    ok_retrain = drop >= 0.30
    ok_detect = res["auc"] >= 0.9 and overhead < 0.10
    ok = ok_retrain and ok_detect and minutes <= 20
    record(
        "mitigations",
        ok,
        f"regenerated-attack mean I-FLOPs {before:.2f}% -> {after:.2f}% ({drop * 100:.1f}% drop, need >=30%), "
        f"accuracy {rep.accuracy_before:.3f} -> {rep.accuracy_after:.3f}; detector AUC {res['auc']:.4f} (>=0.9), "
        f"overhead {overhead * 100:.1f}% of inference (<10%); {minutes:.1f} min (<=20)",
    )
    assert ok


def test_determinism(tmp_path):
    torch.set_num_threads(1)

    def run(name):
        cfg = ExperimentConfig.from_dict(
            {
                "dataset": {"kind": "synthetic", "n_train": 600, "n_test": 150},
                "budget": BUDGET.to_dict(),
                "adnn_train": {"epochs": 2},
                "gan_train": {"alpha": 10.0, "learning_rate": 1e-3, "max_epochs": 2},
                "generator_train_size": 400,
                "seed_count": 100,
                "output_dir": str(tmp_path / name),
            }
        )
        out = run_pipeline(cfg)
        suite = metrics.load_suite(out / "suite_deepperform")
        return (
            metrics.degradation_success(suite),
            metrics.block_coverage(suite),
            float(np.mean([metrics.i_flops(e) for e in suite.entries])),
        )

    a, b = run("first"), run("second")
    ok = a == b
    record("determinism", ok, f"run 1 (eta, coverage, mean I-FLOPs) = {a}; run 2 = {b} (need bit-identical)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
