"""Defences: performance-aware retraining and a first-layer linear detector."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score
from sklearn.svm import LinearSVC

from .adnn import EarlyExitModel, evaluate_accuracy
from .flops import normalized_cost, soft_cost
from .metrics import TestSuite, i_flops, retrace

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- retraining


@dataclass
class RetrainReport:
    i_flops_before: float
    i_flops_after: float
    accuracy_before: Optional[float]
    accuracy_after: Optional[float]
    epochs: int
    beta: float
    losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _soft_costs(model, x, temperature):
    if isinstance(model, EarlyExitModel):
        all_logits = model.exit_logits(x)
        scores = F.softmax(all_logits, dim=-1).amax(dim=-1)
        taus = torch.as_tensor(model.thresholds, dtype=scores.dtype)
        fired = scores.detach() > taus
        n = model.num_blocks
        exit_index = torch.where(fired.any(1), fired.to(torch.int64).argmax(1), torch.full_like(fired[:, 0], n - 1, dtype=torch.int64))
        logits = all_logits[torch.arange(len(x)), exit_index]
    else:
        logits, scores, _ = model.gated_forward(x, straight_through=True)
    cost = normalized_cost(soft_cost(scores, model.thresholds, model.profile, temperature), model.profile)
    return logits, cost


def _mean_i_flops(suite: TestSuite) -> float:
    return float(np.mean([i_flops(e) for e in suite.entries])) if suite.entries else 0.0


def retrain_adnn(
    model,
    paired_suite: TestSuite,
    beta: float = 1.0,
    epochs: int = 5,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
    temperature: float = 0.1,
    heldout: Optional[tuple] = None,
    rng_seed: int = 0,
    freeze_norm_stats: bool = True,
    detach_seed_cost: bool = False,
):
    """Fine-tune a copy of ``model`` so perturbed inputs cost what their seeds cost.

    Minimises MSE(cost(x'), cost(x)) + beta * (CE(f(x), y) + CE(f(x'), y)),
    with costs from the soft surrogate. The seed-side cost is a fixed
    target, so the model cannot close the gap by making seeds expensive.
    ``heldout`` is an optional ``(x, y)`` pair for before/after accuracy.
    """
    if not paired_suite.entries or any(e.label is None for e in paired_suite.entries):
        raise ValueError("retraining needs a non-empty suite whose entries carry labels")
    seeds = paired_suite.seeds
    generated = paired_suite.generated
    labels = torch.tensor([e.label for e in paired_suite.entries], dtype=torch.int64)

    acc_before = evaluate_accuracy(model, *heldout) if heldout is not None else None
    before = _mean_i_flops(paired_suite)

    new = copy.deepcopy(model)
    for p in new.parameters():
        p.requires_grad_(True)
    torch.manual_seed(rng_seed)
    gen = torch.Generator().manual_seed(rng_seed)
    opt = torch.optim.Adam(new.parameters(), lr=learning_rate)
    losses = []
    for epoch in range(epochs):
        new.train()
        if freeze_norm_stats:
            for mod in new.modules():
                if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
                    mod.eval()
        order = torch.randperm(len(seeds), generator=gen)
        total = 0.0
        for b, i in enumerate(range(0, len(seeds), batch_size)):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            x, x_adv, y = seeds[idx], generated[idx], labels[idx]
            logits, cost = _soft_costs(new, x, temperature)
            logits_adv, cost_adv = _soft_costs(new, x_adv, temperature)
            target = cost.detach() if detach_seed_cost else cost
            loss = F.mse_loss(cost_adv, target) + beta * (
                F.cross_entropy(logits, y) + F.cross_entropy(logits_adv, y)
            )
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite retraining loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total)
        logger.info("retrain epoch %d loss %.4f", epoch, total)
    new.eval()

    after = _mean_i_flops(retrace(paired_suite, new))
    acc_after = evaluate_accuracy(new, *heldout) if heldout is not None else None
    return new, RetrainReport(before, after, acc_before, acc_after, epochs, beta, losses)


# ---------------------------------------------------------------- detector


def extract_features(model, x) -> torch.Tensor:
    """Flattened activation of the first convolution, one row per input."""
    x = model.check_input(torch.as_tensor(x, dtype=torch.float32))
    with torch.no_grad():
        return model.first_stage(x).flatten(1)


def feature_signature(model) -> str:
    """Identifies the feature extractor: first-stage output shape plus its weights."""
    c, h, w = model.spec.input_shape
    with torch.no_grad():
        shape = tuple(model.first_stage(torch.zeros(1, c, h, w)).shape[1:])
    digest = hashlib.sha256(repr(shape).encode())
    for t in (model.stem.weight, model.stem.bias):
        digest.update(t.detach().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class DetectorModel:
    weights: np.ndarray
    bias: float
    threshold: float
    feature_dim: int
    signature: str
    metadata: dict = field(default_factory=dict)

    def decision(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 1:
            f = f[None]
        if f.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {f.shape[1]}")
        return f @ self.weights + self.bias

    def predict(self, features) -> np.ndarray:
        return self.decision(features) > self.threshold

    def score_inputs(self, model, x) -> np.ndarray:
        if feature_signature(model) != self.signature:
            raise ValueError("detector was trained on a different model's features")
        return self.decision(extract_features(model, x).numpy())

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            weights=self.weights,
            bias=self.bias,
            threshold=self.threshold,
            feature_dim=self.feature_dim,
            signature=self.signature,
            metadata=json.dumps(self.metadata),
        )

    @classmethod
    def load(cls, path) -> "DetectorModel":
        blob = np.load(path, allow_pickle=False)
        return cls(
            blob["weights"],
            float(blob["bias"]),
            float(blob["threshold"]),
            int(blob["feature_dim"]),
            str(blob["signature"]),
            json.loads(str(blob["metadata"])),
        )


def train_detector(features_benign, features_attack, rng_seed: int = 0, C: float = 1.0, signature: str = "") -> DetectorModel:
    """Hinge-loss, L2-regularised linear classifier (attack = positive class).

    Features are standardised for the solver and the scaling is folded back
    into the weights, so the score stays affine in the raw features.
    """
    xb = np.asarray(features_benign, dtype=np.float64)
    xa = np.asarray(features_attack, dtype=np.float64)
    if len(xb) == 0 or len(xa) == 0:
        raise ValueError("detector training needs both benign and attack samples")
    x = np.concatenate([xb, xa])
    y = np.concatenate([np.zeros(len(xb)), np.ones(len(xa))])
    mu = x.mean(0)
    sd = x.std(0)
    sd[sd == 0] = 1.0
    svm = LinearSVC(loss="hinge", C=C, dual=True, max_iter=20000, random_state=rng_seed)
    svm.fit((x - mu) / sd, y)
    w = svm.coef_[0] / sd
    b = float(svm.intercept_[0] - np.sum(svm.coef_[0] * mu / sd))
    train_acc = float(np.mean(((x @ w + b) > 0) == (y == 1)))
    return DetectorModel(
        w,
        b,
        0.0,
        x.shape[1],
        signature,
        {"n_benign": len(xb), "n_attack": len(xa), "C": C, "train_accuracy": train_acc, "rng_seed": rng_seed},
    )


def auc(labels, scores) -> float:
    return float(roc_auc_score(np.asarray(labels), np.asarray(scores)))


def evaluate_detector(detector: DetectorModel, model, heldout_suite: TestSuite, train_seed_ids=None, timing_samples: int = 50) -> dict:
    """AUC on held-out (seed = benign, generated = attack) pairs plus per-input overhead."""
    if train_seed_ids is not None:
        overlap = set(train_seed_ids) & set(heldout_suite.seed_ids)
        if overlap:
            raise ValueError(f"held-out suite shares {len(overlap)} seed ids with detector training data")
    benign = detector.score_inputs(model, heldout_suite.seeds)
    attack = detector.score_inputs(model, heldout_suite.generated)
    labels = np.concatenate([np.zeros(len(benign)), np.ones(len(attack))])
    scores = np.concatenate([benign, attack])

    extra, full = [], []
    for x in heldout_suite.seeds[:timing_samples]:
        x = x.unsqueeze(0)
        t0 = time.perf_counter()
        detector.decision(extract_features(model, x).numpy())
        extra.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        model.trace_one(x)
        full.append(time.perf_counter() - t0)
    return {
        "auc": auc(labels, scores),
        "accuracy": float(np.mean((scores > detector.threshold) == (labels == 1))),
        "extra_latency_seconds": statistics.median(extra),
        "inference_latency_seconds": statistics.median(full),
    }
