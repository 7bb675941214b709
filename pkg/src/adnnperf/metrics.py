"""Measurement: test suites, degradation metrics, coverage, correlation, sweeps.

Every number in a :class:`MetricsReport` is recomputable from a persisted
:class:`TestSuite`; latency is the one exception and is measured on demand.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .adnn import BlockTrace, forward_with_trace, set_thresholds
from .budget import PerturbationBudget, batch_norms
from .flops import CostProfile, hard_cost

PRODUCERS = ("deepperform", "iterative_baseline")
SUITE_FORMAT = 1


@dataclass
class SuiteEntry:
    seed_id: int
    seed: torch.Tensor
    generated: torch.Tensor
    seed_trace: BlockTrace
    generated_trace: BlockTrace
    seed_cost: float
    generated_cost: float
    gen_time_seconds: float
    label: Optional[int] = None


@dataclass
class TestSuite:
    entries: list
    budget: PerturbationBudget
    producer: str
    profile: CostProfile
    meta: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.entries)

    @property
    def seeds(self) -> torch.Tensor:
        return torch.stack([e.seed for e in self.entries])

    @property
    def generated(self) -> torch.Tensor:
        return torch.stack([e.generated for e in self.entries])

    @property
    def seed_ids(self) -> list:
        return [e.seed_id for e in self.entries]

    def union(self, other: "TestSuite") -> "TestSuite":
        return TestSuite(self.entries + other.entries, self.budget, self.producer, self.profile, dict(self.meta))


def _batched_traces(model, x: torch.Tensor, batch_size: int = 256) -> list:
    traces = []
    for i in range(0, len(x), batch_size):
        _, t = forward_with_trace(model, x[i : i + batch_size])
        traces.extend(t)
    return traces


def build_suite(model, seeds, generated, times, budget, producer, seed_ids=None, labels=None, meta=None) -> TestSuite:
    """Trace both sides of every (seed, generated) pair and record costs."""
    if producer not in PRODUCERS:
        raise ValueError(f"unknown producer {producer!r}")
    seeds = torch.as_tensor(seeds)
    generated = torch.as_tensor(generated)
    n = len(seeds)
    seed_ids = list(range(n)) if seed_ids is None else [int(i) for i in seed_ids]
    labels = [None] * n if labels is None else [int(v) for v in labels]
    profile = model.profile
    entries = []
    if n:
        seed_traces = _batched_traces(model, seeds)
        gen_traces = _batched_traces(model, generated)
        for i in range(n):
            entries.append(
                SuiteEntry(
                    seed_ids[i],
                    seeds[i],
                    generated[i],
                    seed_traces[i],
                    gen_traces[i],
                    hard_cost(seed_traces[i], profile),
                    hard_cost(gen_traces[i], profile),
                    float(times[i]),
                    labels[i],
                )
            )
    return TestSuite(entries, budget, producer, profile, dict(meta or {}))


def retrace(suite: TestSuite, model) -> TestSuite:
    """The same sample pairs re-evaluated under ``model`` (e.g. new thresholds)."""
    return build_suite(
        model,
        suite.seeds if len(suite) else [],
        suite.generated if len(suite) else [],
        [e.gen_time_seconds for e in suite.entries],
        suite.budget,
        suite.producer,
        suite.seed_ids,
        [e.label for e in suite.entries] if suite.entries and suite.entries[0].label is not None else None,
        suite.meta,
    )


# ---------------------------------------------------------------- metrics


def percent_increase(before: float, after: float) -> float:
    if before <= 0:
        raise ValueError("baseline value must be positive")
    return (after - before) / before * 100.0


def i_flops(entry: SuiteEntry) -> float:
    return percent_increase(entry.seed_cost, entry.generated_cost)


def degradation_success(suite: TestSuite) -> int:
    """Number of pairs whose generated sample costs strictly more than its seed."""
    return sum(1 for e in suite.entries if e.generated_cost > e.seed_cost)


def block_coverage(suite: TestSuite, model=None) -> float:
    """Fraction of gated blocks activated by at least one generated sample."""
    if not suite.entries:
        return 0.0
    n = model.num_blocks if model is not None else suite.profile.num_blocks
    covered = set()
    for e in suite.entries:
        covered.update(i for i, on in enumerate(e.generated_trace.activated) if on)
    return len(covered) / n


def coverage_raw(suite: TestSuite, model=None) -> float:
    """Sum of activated-block indicators over all samples divided by N, unnormalised by suite size."""
    n = model.num_blocks if model is not None else suite.profile.num_blocks
    return sum(e.generated_trace.num_activated for e in suite.entries) / n


def pcc(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pcc needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise ValueError("pcc needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("pcc undefined for zero-variance input")
    r = float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
    # rounding in the two norms leaves exact linear relations a few ulps short of +-1
    return math.copysign(1.0, r) if abs(abs(r) - 1.0) <= 1e-12 else r


def perturbation_norms(suite: TestSuite, norm_order: Optional[str] = None) -> np.ndarray:
    if not suite.entries:
        return np.zeros(0)
    order = norm_order or suite.budget.norm_order
    return batch_norms((suite.generated - suite.seeds).double(), order).numpy()


def budget_violations(suite: TestSuite, slack: float = 1e-6) -> int:
    if not suite.entries:
        return 0
    norms = perturbation_norms(suite)
    gen = suite.generated
    out_of_range = ((gen < 0) | (gen > 1)).flatten(1).any(dim=1).numpy()
    return int(np.sum((norms > suite.budget.epsilon + slack) | out_of_range))


# ---------------------------------------------------------------- latency


def measure_latency(model, x: torch.Tensor, repeats: int = 10, warmup: int = 2) -> list:
    """Raw wall-clock samples of single-input inference (warm-up discarded)."""
    x = model.check_input(torch.as_tensor(x, dtype=torch.float32))
    model.eval()
    for _ in range(warmup):
        model.trace_one(x)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.trace_one(x)
        samples.append(time.perf_counter() - t0)
    return samples


@dataclass
class LatencyResult:
    percent: float
    seed_median: float
    generated_median: float
    seed_samples: list
    generated_samples: list
    reliable: bool


def _dispersion(samples) -> float:
    med = statistics.median(samples)
    q1, q3 = np.percentile(samples, [25, 75])
    return float((q3 - q1) / med) if med > 0 else math.inf


def i_latency(model, entry: SuiteEntry, repeats: int = 10, warmup: int = 2, max_dispersion: float = 0.5) -> LatencyResult:
    """Percentage increase of median latency; noisy timings are flagged, not rejected."""
    if repeats < 10:
        raise ValueError("latency needs at least 10 repeats")
    # interleave the two sides so drift hits both equally
    seed_samples, gen_samples = [], []
    for _ in range(repeats):
        seed_samples += measure_latency(model, entry.seed, 1, warmup)
        gen_samples += measure_latency(model, entry.generated, 1, warmup)
    s_med, g_med = statistics.median(seed_samples), statistics.median(gen_samples)
    reliable = max(_dispersion(seed_samples), _dispersion(gen_samples)) <= max_dispersion
    return LatencyResult(percent_increase(s_med, g_med), s_med, g_med, seed_samples, gen_samples, reliable)


# ---------------------------------------------------------------- tables


def efficiency_distribution(suite: TestSuite, bins: int = 20, value_range: Optional[tuple] = None) -> dict:
    """Histogram densities of seed vs generated costs over shared bin edges."""
    seed = np.array([e.seed_cost for e in suite.entries], dtype=np.float64)
    gen = np.array([e.generated_cost for e in suite.entries], dtype=np.float64)
    if value_range is None:
        value_range = (suite.profile.stem_flops, suite.profile.total)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    seed_counts, _ = np.histogram(seed, bins=edges)
    gen_counts, _ = np.histogram(gen, bins=edges)
    n = max(len(seed), 1)
    return {
        "edges": edges.tolist(),
        "seed_counts": seed_counts.tolist(),
        "generated_counts": gen_counts.tolist(),
        "seed_density": (seed_counts / n).tolist(),
        "generated_density": (gen_counts / n).tolist(),
        "seed_mean": float(seed.mean()) if len(seed) else 0.0,
        "generated_mean": float(gen.mean()) if len(gen) else 0.0,
    }


def threshold_sweep(model, suite_or_generator, taus_list: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7), seeds=None) -> list:
    """Max/mean I-FLOPs of one fixed set of generated samples under each threshold.

    Pass either a TestSuite, or a generator plus ``seeds`` (the generator is
    run once and the same samples are reused for every threshold).
    """
    if isinstance(suite_or_generator, TestSuite):
        suite = suite_or_generator
    else:
        from .gan import generate

        suite = generate(suite_or_generator, seeds, model=model)
    rows = []
    for tau in taus_list:
        swept = retrace(suite, set_thresholds(model, [tau] * model.num_blocks))
        incs = [i_flops(e) for e in swept.entries]
        rows.append(
            {
                "tau": float(tau),
                "max_i_flops": max(incs),
                "mean_i_flops": float(np.mean(incs)),
                "eta": degradation_success(swept),
            }
        )
    return rows


def mean_gen_time(suite: TestSuite) -> float:
    return float(np.mean([e.gen_time_seconds for e in suite.entries]))


def overhead_report(gan_suite: TestSuite, baseline_suite: TestSuite, training_time: float, ns: Sequence[int] = (0, 1, 10, 100, 1000, 10000)) -> dict:
    """Online per-sample cost and total-cost lines ``training_time + n * per_sample``."""
    g = mean_gen_time(gan_suite)
    b = mean_gen_time(baseline_suite)
    crossover = training_time / (b - g) if b > g else None
    curve = [{"n": int(n), "gan_total": training_time + n * g, "baseline_total": n * b} for n in ns]
    return {
        "gan_per_sample": g,
        "baseline_per_sample": b,
        "speedup": b / g if g > 0 else math.inf,
        "training_time": training_time,
        "crossover_n": crossover,
        "curve": curve,
    }


# ---------------------------------------------------------------- report


REPORT_COLUMNS = (
    "producer",
    "n",
    "mean_i_flops",
    "max_i_flops",
    "mean_i_latency",
    "max_i_latency",
    "i_energy",
    "eta",
    "coverage",
    "coverage_raw",
    "norm_order",
    "epsilon",
    "mean_norm",
    "max_norm",
    "budget_violations",
    "mean_gen_time",
)

REPORT_SCHEMA = {
    "producer": "which generator produced the suite (deepperform | iterative_baseline)",
    "n": "number of (seed, generated) pairs",
    "mean_i_flops": "mean percentage FLOPs increase over seeds; FLOPs include the always-on stem",
    "max_i_flops": "maximum percentage FLOPs increase",
    "mean_i_latency": "mean percentage increase of median host latency (blank if not measured)",
    "max_i_latency": "maximum percentage latency increase (blank if not measured)",
    "i_energy": "reserved; energy is not measured (always 'unavailable')",
    "eta": "pairs whose generated FLOPs strictly exceed the seed's",
    "coverage": "fraction of gated blocks activated by at least one generated sample",
    "coverage_raw": "sum of activated-block counts over samples divided by N",
    "norm_order": "perturbation norm (L2 | Linf)",
    "epsilon": "perturbation radius",
    "mean_norm": "mean perturbation norm",
    "max_norm": "max perturbation norm",
    "budget_violations": "samples outside the budget ball or [0,1]",
    "mean_gen_time": "mean wall-clock seconds to produce one sample",
}


@dataclass
class MetricsReport:
    producer: str
    n: int
    mean_i_flops: float
    max_i_flops: float
    eta: int
    coverage: float
    coverage_raw: float
    norm_order: str
    epsilon: float
    mean_norm: float
    max_norm: float
    budget_violations: int
    mean_gen_time: float
    mean_i_latency: Optional[float] = None
    max_i_latency: Optional[float] = None
    i_energy: str = "unavailable"
    sweep: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        return {k: ("" if d[k] is None else d[k]) for k in REPORT_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def compute_report(suite: TestSuite, model=None, latency: Optional[list] = None, provenance: Optional[dict] = None) -> MetricsReport:
    incs = [i_flops(e) for e in suite.entries] or [0.0]
    norms = perturbation_norms(suite)
    return MetricsReport(
        producer=suite.producer,
        n=len(suite),
        mean_i_flops=float(np.mean(incs)),
        max_i_flops=float(np.max(incs)),
        eta=degradation_success(suite),
        coverage=block_coverage(suite, model),
        coverage_raw=coverage_raw(suite, model),
        norm_order=suite.budget.norm_order,
        epsilon=suite.budget.epsilon,
        mean_norm=float(norms.mean()) if len(norms) else 0.0,
        max_norm=float(norms.max()) if len(norms) else 0.0,
        budget_violations=budget_violations(suite),
        mean_gen_time=mean_gen_time(suite) if suite.entries else 0.0,
        mean_i_latency=None if not latency else float(np.mean(latency)),
        max_i_latency=None if not latency else float(np.max(latency)),
        provenance=dict(provenance or suite.meta),
    )


def reports_to_csv(reports: Sequence[MetricsReport], header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def distribution_rows(dist: dict) -> list:
    rows = []
    edges = dist["edges"]
    for i in range(len(edges) - 1):
        rows.append(
            {
                "bin_low": edges[i],
                "bin_high": edges[i + 1],
                "seed_density": dist["seed_density"][i],
                "generated_density": dist["generated_density"][i],
            }
        )
    return rows


# ---------------------------------------------------------------- persistence


def save_suite(suite: TestSuite, directory) -> Path:
    """Manifest JSON plus ``seeds.npy`` / ``generated.npy`` arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seeds = suite.seeds.numpy() if suite.entries else np.zeros((0,), np.float32)
    gen = suite.generated.numpy() if suite.entries else np.zeros((0,), np.float32)
    np.save(directory / "seeds.npy", seeds)
    np.save(directory / "generated.npy", gen)
    manifest = {
        "format": SUITE_FORMAT,
        "producer": suite.producer,
        "budget": suite.budget.to_dict(),
        "profile": suite.profile.to_dict(),
        "meta": suite.meta,
        "arrays_sha256": hashlib.sha256(seeds.tobytes() + gen.tobytes()).hexdigest(),
        "entries": [
            {
                "seed_id": e.seed_id,
                "label": e.label,
                "seed_trace": e.seed_trace.to_dict(),
                "generated_trace": e.generated_trace.to_dict(),
                "seed_cost": e.seed_cost,
                "generated_cost": e.generated_cost,
                "gen_time_seconds": e.gen_time_seconds,
            }
            for e in suite.entries
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_suite(directory) -> TestSuite:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    seeds = np.load(directory / "seeds.npy")
    gen = np.load(directory / "generated.npy")
    if hashlib.sha256(seeds.tobytes() + gen.tobytes()).hexdigest() != manifest["arrays_sha256"]:
        raise ValueError(f"{directory}: arrays do not match the manifest checksum")
    entries = []
    for i, m in enumerate(manifest["entries"]):
        entries.append(
            SuiteEntry(
                m["seed_id"],
                torch.from_numpy(seeds[i].copy()),
                torch.from_numpy(gen[i].copy()),
                BlockTrace.from_dict(m["seed_trace"]),
                BlockTrace.from_dict(m["generated_trace"]),
                m["seed_cost"],
                m["generated_cost"],
                m["gen_time_seconds"],
                m["label"],
            )
        )
    return TestSuite(
        entries,
        PerturbationBudget.from_dict(manifest["budget"]),
        manifest["producer"],
        CostProfile.from_dict(manifest["profile"]),
        manifest.get("meta", {}),
    )
