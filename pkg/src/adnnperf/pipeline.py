"""Experiment configuration, staged pipeline, and artifact bookkeeping.

Layout of an output directory::

    config.json                 resolved configuration and its hash
    adnn.pt                     trained subject model
    generator.pt                trained generator
    suite_deepperform/          generated suite (manifest + arrays)
    suite_iterative_baseline/   optional baseline suite
    metrics.json                evaluation results
    report.csv                  summary table (first line is a timestamp comment)
    report.schema.json          column documentation
    distribution.csv            plot data: seed vs generated cost histogram
    .lock                       present while a writer holds the directory

Every artifact has a ``<name>.meta.json`` sidecar recording the config hash; loading an artifact whose hash differs
from the current config is refused.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import gan, metrics
from .adnn import (
    AdnnTrainConfig,
    build_model,
    load_model,
    mean_activated_fraction,
    reference_spec,
    save_model,
    train_adnn,
)
from .budget import PerturbationBudget
from .data import ingest_dataset

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ADNNPERF_OUTPUT_ROOT"
STAGES = ("train-adnn", "train-generator", "generate", "evaluate", "report")
REQUIRED_KEYS = ("dataset", "budget")
TRAIN_ID_OFFSET = 0
TEST_ID_OFFSET = 1_000_000  # seed ids for test-split inputs


class ConfigError(ValueError):
    """Invalid or incomplete configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ArtifactMismatch(ValueError):
    pass


class LockedError(RuntimeError):
    pass


@dataclass
class SubjectConfig:
    mechanism: str = "conditional_skipping"
    num_blocks: int = 8
    channels: int = 16
    threshold: float = 0.5
    stem_blocks: int = 3
    checkpoint: Optional[str] = None  # load instead of training when set


@dataclass
class ExperimentConfig:
    dataset: dict
    budget: PerturbationBudget
    subject: SubjectConfig = field(default_factory=SubjectConfig)
    adnn_train: AdnnTrainConfig = field(default_factory=AdnnTrainConfig)
    gan_train: gan.TrainConfig = field(default_factory=gan.TrainConfig)
    generator_train_size: int = 2000
    seed_count: int = 1000
    rng_seed: int = 0
    output_dir: str = "run"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        missing = [k for k in REQUIRED_KEYS if k not in raw]
        if missing:
            raise ConfigError(f"missing required config key: {missing[0]}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        d = dict(raw)
        try:
            budget = PerturbationBudget.from_dict(d.pop("budget"))
            subject = SubjectConfig(**d.pop("subject", {}))
            adnn_train = AdnnTrainConfig(**d.pop("adnn_train", {}))
            gan_raw = dict(d.pop("gan_train", {}))
            if "budget" in gan_raw:
                raise ConfigError("set the perturbation budget at top level, not inside gan_train")
            gan_train = gan.TrainConfig(**gan_raw, budget=budget)
            cfg = cls(budget=budget, subject=subject, adnn_train=adnn_train, gan_train=gan_train, **d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(cfg.dataset, dict) or "kind" not in cfg.dataset:
            raise ConfigError("missing required config key: dataset.kind")
        if cfg.seed_count < 1 or cfg.generator_train_size < 1:
            raise ConfigError("seed_count and generator_train_size must be positive")
        if cfg.subject.checkpoint and not Path(cfg.subject.checkpoint).exists():
            raise ConfigError(f"subject checkpoint {cfg.subject.checkpoint} does not exist")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        gan_d = self.gan_train.to_dict()
        gan_d.pop("budget")
        return {
            "dataset": dict(self.dataset),
            "budget": self.budget.to_dict(),
            "subject": dataclasses.asdict(self.subject),
            "adnn_train": dataclasses.asdict(self.adnn_train),
            "gan_train": gan_d,
            "generator_train_size": self.generator_train_size,
            "seed_count": self.seed_count,
            "rng_seed": self.rng_seed,
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_output(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


# ---------------------------------------------------------------- artifacts


class Workspace:
    """One output directory bound to one config hash."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = config.resolved_output()
        self.hash = config.config_hash()
        self._dataset = None

    def path(self, name: str) -> Path:
        return self.root / name

    # sidecar hash bookkeeping
    def _meta_path(self, name: str) -> Path:
        return self.root / f"{name}.meta.json"

    def mark(self, name: str, **extra) -> None:
        meta = {"config_hash": self.hash, "artifact": name, **extra}
        self._meta_path(name).write_text(json.dumps(meta, sort_keys=True, indent=1))

    def has(self, name: str) -> bool:
        """True when the artifact exists and was produced by this config."""
        p = self.path(name)
        if not p.exists():
            return False
        self.check(name)
        return True

    def check(self, name: str) -> None:
        meta_path = self._meta_path(name)
        if not meta_path.exists():
            raise ArtifactMismatch(f"{self.path(name)} has no config-hash sidecar")
        found = json.loads(meta_path.read_text()).get("config_hash")
        if found != self.hash:
            raise ArtifactMismatch(
                f"{self.path(name)} was produced by config {found}, current config is {self.hash}"
            )

    def require(self, name: str, producer_stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p} (run the {producer_stage} stage first)")
        self.check(name)
        return p

    # locking
    def lock(self) -> "_Lock":
        return _Lock(self.root / ".lock")

    def write_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.path("config.json")
        if cfg_path.exists():
            old = json.loads(cfg_path.read_text()).get("config_hash")
            if old != self.hash:
                logger.warning("output directory held config %s; artifacts from it will be refused", old)
        cfg_path.write_text(json.dumps({"config_hash": self.hash, "config": self.config.to_dict()}, indent=1, sort_keys=True))

    # shared inputs
    def dataset(self):
        if self._dataset is None:
            self._dataset = ingest_dataset(self.config.dataset)
            if self.config.subject.checkpoint is None:
                spec = self.spec()
                if spec.input_shape != self._dataset.input_shape:
                    raise ConfigError(
                        f"dataset shape {self._dataset.input_shape} does not match model input {spec.input_shape}"
                    )
        return self._dataset

    def spec(self):
        s = self.config.subject
        ds_shape = self._dataset.input_shape if self._dataset is not None else None
        kwargs = {}
        if ds_shape is not None:
            kwargs["input_shape"] = ds_shape
        elif self.config.dataset.get("kind") == "synthetic":
            kwargs["input_shape"] = (
                self.config.dataset.get("channels", 3),
                self.config.dataset.get("image_size", 32),
                self.config.dataset.get("image_size", 32),
            )
        return reference_spec(
            s.mechanism,
            num_blocks=s.num_blocks,
            channels=s.channels,
            num_classes=self.config.dataset.get("num_classes", 10),
            threshold=s.threshold,
            stem_blocks=s.stem_blocks,
            **kwargs,
        )

    def model(self):
        return load_model(self.require("adnn.pt", "train-adnn"))

    def generator(self):
        path = self.path("generator.pt")
        if not path.exists():
            raise FileNotFoundError(f"generator checkpoint {path} does not exist (train it with train-generator)")
        self.check("generator.pt")
        return gan.load_generator(path)

    def suite(self, producer: str = "deepperform"):
        name = f"suite_{producer}"
        p = self.require(name, "generate" if producer == "deepperform" else "baseline")
        suite = metrics.load_suite(p)
        return suite

    def save_suite(self, suite, producer: str) -> Path:
        name = f"suite_{producer}"
        suite.meta = {**suite.meta, "config_hash": self.hash}
        out = metrics.save_suite(suite, self.path(name))
        self.mark(name, producer=producer, n=len(suite))
        return out

    def test_seeds(self, count: Optional[int] = None, offset: int = 0):
        ds = self.dataset()
        n = min(count or self.config.seed_count, len(ds.x_test) - offset)
        idx = np.arange(offset, offset + n)
        return ds.x_test[idx], ds.y_test[idx], [TEST_ID_OFFSET + int(i) for i in idx]

    def train_seeds(self, count: Optional[int] = None):
        ds = self.dataset()
        n = min(count or self.config.generator_train_size, len(ds.x_train))
        return ds.x_train[:n], ds.y_train[:n], [TRAIN_ID_OFFSET + i for i in range(n)]


class _Lock:
    def __init__(self, path: Path):
        self.path = path
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{self.path.parent} is locked by another writer (remove {self.path} if stale)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------- stages


def stage_train_adnn(ws: Workspace) -> None:
    cfg = ws.config
    if cfg.subject.checkpoint:
        model = load_model(cfg.subject.checkpoint)
        acc = None
    else:
        ds = ws.dataset()
        torch.manual_seed(cfg.rng_seed)
        model = build_model(ws.spec(), cfg.rng_seed)
        train_cfg = dataclasses.replace(cfg.adnn_train, rng_seed=cfg.rng_seed)
        model, acc = train_adnn(model, ds, train_cfg)
    save_model(model, ws.path("adnn.pt"))
    frac = mean_activated_fraction(model, ws.dataset().x_test)
    ws.mark("adnn.pt", accuracy=acc, activated_fraction=frac, spec_hash=model.spec.spec_hash())


def stage_train_generator(ws: Workspace) -> None:
    cfg = ws.config
    model = ws.model()
    x, _, _ = ws.train_seeds()
    gcfg = dataclasses.replace(cfg.gan_train, rng_seed=cfg.rng_seed)
    generator, discriminator, history = gan.train(model, x, gcfg)
    save_generator_with_history(ws, generator, discriminator, gcfg, history)


def save_generator_with_history(ws: Workspace, generator, discriminator, gcfg, history) -> None:
    gan.save_generator(generator, discriminator, gcfg, ws.path("generator.pt"), {"config_hash": ws.hash})
    ws.path("generator_history.csv").write_text(history.to_csv())
    ws.mark("generator.pt", training_seconds=history.seconds, best_epoch=history.best_epoch, stopped_early=history.stopped_early)


def generator_training_seconds(ws: Workspace) -> float:
    meta = json.loads(ws._meta_path("generator.pt").read_text())
    return float(meta.get("training_seconds", 0.0))


def generate_suite(ws: Workspace, generator, model, seeds, labels, seed_ids):
    generated, times = gan.generate_samples(generator, seeds, ws.config.budget)
    return metrics.build_suite(
        model, seeds, generated, times, ws.config.budget, "deepperform", seed_ids, labels,
        {"config_hash": ws.hash},
    )


def stage_generate(ws: Workspace) -> None:
    model = ws.model()
    generator, _, _, _ = ws.generator()
    seeds, labels, ids = ws.test_seeds()
    ws.save_suite(generate_suite(ws, generator, model, seeds, labels, ids), "deepperform")


def stage_evaluate(ws: Workspace) -> None:
    model = ws.model()
    suites = [ws.suite("deepperform")]
    if ws.path("suite_iterative_baseline").exists():
        suites.append(ws.suite("iterative_baseline"))
    results = {}
    for s in suites:
        rep = metrics.compute_report(s, model, provenance={"config_hash": ws.hash})
        rep.sweep = metrics.threshold_sweep(model, s)
        results[s.producer] = json.loads(rep.to_json())
    ws.path("metrics.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    ws.mark("metrics.json")


def stage_report(ws: Workspace) -> None:
    ws.require("metrics.json", "evaluate")
    suites = [ws.suite("deepperform")]
    if ws.path("suite_iterative_baseline").exists():
        suites.append(ws.suite("iterative_baseline"))
    write_report(ws.root, suites, ws.hash)
    ws.mark("report.csv")


def write_report(directory, suites, config_hash: str = "") -> Path:
    """report.csv, report.schema.json and distribution.csv from persisted suites.

    Apart from the timestamp comment on the first line, the output depends
    only on the suites.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    reports = [metrics.compute_report(s) for s in suites]
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    header = f"generated {stamp} config {config_hash}"
    (directory / "report.csv").write_text(metrics.reports_to_csv(reports, header))
    (directory / "report.schema.json").write_text(json.dumps({"columns": metrics.REPORT_SCHEMA}, indent=1, sort_keys=True))
    rows = []
    for s in suites:
        for r in metrics.distribution_rows(metrics.efficiency_distribution(s)):
            rows.append({"producer": s.producer, **r})
    (directory / "distribution.csv").write_text(metrics.rows_to_csv(rows))
    return directory / "report.csv"


STAGE_FUNCS = {
    "train-adnn": (stage_train_adnn, "adnn.pt"),
    "train-generator": (stage_train_generator, "generator.pt"),
    "generate": (stage_generate, "suite_deepperform"),
    "evaluate": (stage_evaluate, "metrics.json"),
    "report": (stage_report, "report.csv"),
}


def run_stage(ws: Workspace, stage: str, force: bool = False) -> bool:
    """Run one stage unless its artifact already exists. Returns True if it ran."""
    func, artifact = STAGE_FUNCS[stage]
    if not force and ws.has(artifact):
        logger.info("stage %s: up to date", stage)
        return False
    logger.info("stage %s: running", stage)
    t0 = time.perf_counter()
    try:
        func(ws)
    except (ConfigError, LockedError):
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    logger.info("stage %s: done in %.1fs", stage, time.perf_counter() - t0)
    return True


def run_pipeline(config: ExperimentConfig, stages=STAGES, force: bool = False) -> Path:
    """Run the stages in order, skipping ones whose artifacts are present.

    A downstream stage is re-run whenever an upstream stage re-ran.
    """
    ws = Workspace(config)
    ws.write_config()
    ran = []
    with ws.lock():
        dirty = force
        for stage in stages:
            dirty = run_stage(ws, stage, force=dirty) or dirty
            if dirty:
                ran.append(stage)
    (ws.root / "stages.json").write_text(json.dumps({"last_run": ran}, indent=1))
    return ws.root
