"""Small reference adaptive networks with instrumented gates.

Two mechanisms are supported:

* conditional skipping: a residual block runs only if its gate score is
  strictly above the block threshold, otherwise the block is an identity;
* early termination: after each block an exit head scores its own max
  softmax confidence and inference stops at the first exit above threshold.

Batched evaluation (:meth:`AdnnModel.gated_forward`) masks blocks so it
stays differentiable. Single-input tracing actually skips work, which is
what latency measurements need.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flops import (
    CONDITIONAL_SKIPPING,
    EARLY_TERMINATION,
    CostProfile,
    activation_probs,
    LayerShape,
    block_flops,
    conv,
    dense,
    normalized_cost,
    soft_cost,
)

logger = logging.getLogger(__name__)

MECHANISMS = (CONDITIONAL_SKIPPING, EARLY_TERMINATION)
GATE_SPREAD = 2.0


class ConfigurationError(ValueError):
    """An AdnnSpec that cannot be turned into a model."""


@dataclass(frozen=True)
class BlockSpec:
    index: int
    flops_weight: float
    threshold: float
    layer_shape: tuple

    def __post_init__(self):
        if self.index < 0:
            raise ConfigurationError("block index must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold {self.threshold} outside [0, 1]")
        expected = block_flops(self.layer_shape)
        if self.flops_weight != expected:
            raise ConfigurationError(
                f"block {self.index}: flops_weight {self.flops_weight} != {expected} "
                "counted from its layers"
            )

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "flops_weight": self.flops_weight,
            "threshold": self.threshold,
            "layer_shape": [layer.to_dict() for layer in self.layer_shape],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        layers = tuple(LayerShape.from_dict(x) for x in d["layer_shape"])
        return cls(d["index"], float(d["flops_weight"]), float(d["threshold"]), layers)


@dataclass(frozen=True)
class AdnnSpec:
    mechanism: str
    blocks: tuple
    num_classes: int
    input_shape: tuple
    stem_stride: int = 2
    stem_blocks: int = 3  # ungated residual blocks before the first gate

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if not self.blocks:
            raise ConfigurationError("an AdnnSpec needs at least one block")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if [b.index for b in self.blocks] != list(range(len(self.blocks))):
            raise ConfigurationError("block indices must be 0..N-1 without gaps")
        if self.stem_blocks < 0:
            raise ConfigurationError("stem_blocks must be >= 0")
        if len(self.input_shape) != 3:
            raise ConfigurationError("input_shape must be (channels, height, width)")
        _, h, w = self.input_shape
        first = self.blocks[0].layer_shape[0]
        if h % self.stem_stride or w % self.stem_stride or (
            h // self.stem_stride,
            w // self.stem_stride,
        ) != (first.h_out, first.w_out):
            raise ConfigurationError(
                f"input_shape {self.input_shape} does not match first block "
                f"spatial size {(first.h_out, first.w_out)} at stem stride {self.stem_stride}"
            )
        width = first.c_in
        for b in self.blocks:
            convs = [layer for layer in b.layer_shape if layer.kind == "conv"]
            if len(convs) != 2 or any(
                (c.c_in, c.c_out, c.h_out, c.w_out) != (width, width, first.h_out, first.w_out)
                for c in convs
            ):
                raise ConfigurationError(f"block {b.index} must be two {width}-channel convolutions")
            heads = [layer for layer in b.layer_shape if layer.kind == "dense"]
            if self.mechanism == EARLY_TERMINATION and (
                len(heads) != 1 or (heads[0].c_in, heads[0].c_out) != (width, self.num_classes)
            ):
                raise ConfigurationError(f"block {b.index} needs an exit head with {self.num_classes} outputs")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.blocks[0].layer_shape[0].c_in

    @property
    def feature_hw(self) -> tuple:
        first = self.blocks[0].layer_shape[0]
        return first.h_out, first.w_out

    @property
    def thresholds(self) -> list:
        return [b.threshold for b in self.blocks]

    def stem_layers(self) -> list:
        h, w = self.feature_hw
        layers = [conv(self.input_shape[0], self.width, h, w)]
        for _ in range(self.stem_blocks):
            layers += [conv(self.width, self.width, h, w), conv(self.width, self.width, h, w)]
        if self.mechanism == CONDITIONAL_SKIPPING:
            layers += [dense(self.width, 1) for _ in self.blocks]  # gates
            layers.append(dense(self.width, self.num_classes))  # classifier
        return layers

    def cost_profile(self) -> CostProfile:
        return CostProfile(
            tuple(b.flops_weight for b in self.blocks),
            block_flops(self.stem_layers()),
            self.mechanism,
        )

    def with_thresholds(self, taus: Sequence[float]) -> "AdnnSpec":
        if len(taus) != self.num_blocks:
            raise ValueError(f"expected {self.num_blocks} thresholds, got {len(taus)}")
        blocks = tuple(
            BlockSpec(b.index, b.flops_weight, float(t), b.layer_shape)
            for b, t in zip(self.blocks, taus)
        )
        return AdnnSpec(self.mechanism, blocks, self.num_classes, self.input_shape, self.stem_stride, self.stem_blocks)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "blocks": [b.to_dict() for b in self.blocks],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "stem_stride": self.stem_stride,
            "stem_blocks": self.stem_blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdnnSpec":
        return cls(
            d["mechanism"],
            tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            int(d["num_classes"]),
            tuple(d["input_shape"]),
            int(d.get("stem_stride", 2)),
            int(d.get("stem_blocks", 3)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AdnnSpec":
        return cls.from_dict(json.loads(text))

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def reference_spec(
    mechanism: str = CONDITIONAL_SKIPPING,
    num_blocks: int = 8,
    channels: int = 16,
    input_shape: tuple = (3, 32, 32),
    num_classes: int = 10,
    threshold: float = 0.5,
    stem_stride: int = 2,
    stem_blocks: int = 3,
) -> AdnnSpec:
    """The default desk-scale subject: N residual blocks of constant width."""
    h, w = input_shape[1] // stem_stride, input_shape[2] // stem_stride
    blocks = []
    for i in range(num_blocks):
        layers = [conv(channels, channels, h, w), conv(channels, channels, h, w)]
        if mechanism == EARLY_TERMINATION:
            layers.append(dense(channels, num_classes))
        layers = tuple(layers)
        blocks.append(BlockSpec(i, block_flops(layers), threshold, layers))
    return AdnnSpec(mechanism, tuple(blocks), num_classes, tuple(input_shape), stem_stride, stem_blocks)


@dataclass
class BlockTrace:
    gate_scores: list
    activated: list
    logits: list
    exit_index: Optional[int] = None
    flops: float = 0.0  # counted by the model while executing

    def to_dict(self) -> dict:
        return {
            "gate_scores": list(self.gate_scores),
            "activated": list(self.activated),
            "logits": list(self.logits),
            "exit_index": self.exit_index,
            "flops": self.flops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockTrace":
        return cls(d["gate_scores"], d["activated"], d["logits"], d.get("exit_index"), d.get("flops", 0.0))

    @property
    def num_activated(self) -> int:
        return sum(bool(a) for a in self.activated)


class ResidualBranch(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


class Gate(nn.Module):
    """Pooled block input -> dense -> batch-normalised logit -> sigmoid.

    Normalising the logit keeps gate scores spread over [0, 1] across
    inputs instead of collapsing onto one side of the threshold; ``spread``
    is the initial scale of the normalised logit.
    """

    def __init__(self, channels: int, spread: float = GATE_SPREAD):
        super().__init__()
        self.fc = nn.Linear(channels, 1)
        self.norm = nn.BatchNorm1d(1)
        with torch.no_grad():
            self.norm.weight.fill_(spread)

    def logit(self, h):
        return self.norm(self.fc(h.mean(dim=(2, 3)))).squeeze(-1)

    def forward(self, h):
        return torch.sigmoid(self.logit(h))


class ExitHead(nn.Module):
    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, h):
        return self.fc(h.mean(dim=(2, 3)))


class AdnnModel(nn.Module):
    """Common base: stem, residual blocks and per-block thresholds."""

    def __init__(self, spec: AdnnSpec):
        super().__init__()
        self.spec = spec
        c = spec.width
        self.stem = nn.Conv2d(spec.input_shape[0], c, 3, stride=spec.stem_stride, padding=1)
        self.stem_blocks = nn.ModuleList(ResidualBranch(c) for _ in range(spec.stem_blocks))
        self.blocks = nn.ModuleList(ResidualBranch(c) for _ in spec.blocks)
        self.profile = spec.cost_profile()
        self._fixed_flops = self.profile.stem_flops
        self._block_flops = list(self.profile.block_weights)

    @property
    def mechanism(self) -> str:
        return self.spec.mechanism

    @property
    def num_blocks(self) -> int:
        return self.spec.num_blocks

    @property
    def thresholds(self) -> list:
        return self.spec.thresholds

    def first_stage(self, x):
        """Output of the first convolution (the detector's feature map)."""
        return F.relu(self.stem(x))

    def stem_features(self, x):
        h = self.first_stage(x)
        for block in self.stem_blocks:
            h = h + block(h)
        return h

    def forward(self, x):
        return self.gated_forward(x)[0]

    def gated_forward(self, x, straight_through: bool = False):
        """Batched evaluation.

        Returns ``(logits, gate_scores, executed)``; ``executed`` is the 0/1
        mask of blocks that ran. With ``straight_through`` the hard gating
        decisions pass gradients on to the gate scores.
        """
        raise NotImplementedError

    def soft_cost(self, x, temperature: float = 0.1, normalized: bool = False):
        _, scores, _ = self.gated_forward(x)
        cost = soft_cost(scores, self.thresholds, self.profile, temperature)
        return normalized_cost(cost, self.profile) if normalized else cost

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ValueError(f"input shape {tuple(x.shape)} does not match {self.spec.input_shape}")
        return x

    @torch.no_grad()
    def trace_one(self, x: torch.Tensor):
        """Single-input inference that really skips unexecuted blocks."""
        raise NotImplementedError


class SkipNetModel(AdnnModel):
    def __init__(self, spec: AdnnSpec):
        super().__init__(spec)
        c = spec.width
        self.gates = nn.ModuleList(Gate(c) for _ in spec.blocks)
        self.classifier = nn.Linear(c, spec.num_classes)

    def gated_forward(self, x, straight_through: bool = False, return_logits: bool = False):
        h = self.stem_features(x)
        scores, masks, logits_z = [], [], []
        for block, gate, tau in zip(self.blocks, self.gates, self.thresholds):
            z = gate.logit(h)
            s = torch.sigmoid(z)
            m = (s > tau).to(h.dtype)
            if straight_through:
                m = m + s - s.detach()
            h = h + m.view(-1, 1, 1, 1) * block(h)
            scores.append(s)
            masks.append(m.detach())
            logits_z.append(z)
        logits = self.classifier(h.mean(dim=(2, 3)))
        out = (logits, torch.stack(scores, dim=1), torch.stack(masks, dim=1))
        if return_logits:
            out += (torch.stack(logits_z, dim=1),)
        return out

    @torch.no_grad()
    def trace_one(self, x):
        h = self.stem_features(x)
        flops = self._fixed_flops
        scores, activated = [], []
        for i, (block, gate, tau) in enumerate(zip(self.blocks, self.gates, self.thresholds)):
            s = float(gate(h))
            on = s > tau
            if on:
                h = h + block(h)
                flops += self._block_flops[i]
            scores.append(s)
            activated.append(on)
        logits = self.classifier(h.mean(dim=(2, 3)))
        return logits, BlockTrace(scores, activated, logits[0].tolist(), None, flops)


class EarlyExitModel(AdnnModel):
    def __init__(self, spec: AdnnSpec):
        super().__init__(spec)
        self.heads = nn.ModuleList(ExitHead(spec.width, spec.num_classes) for _ in spec.blocks)

    def exit_logits(self, x):
        """Logits of every exit head, computed without stopping: (B, N, K)."""
        h = self.stem_features(x)
        outs = []
        for block, head in zip(self.blocks, self.heads):
            h = h + block(h)
            outs.append(head(h))
        return torch.stack(outs, dim=1)

    def gated_forward(self, x, straight_through: bool = False):
        all_logits = self.exit_logits(x)
        conf = F.softmax(all_logits, dim=-1).amax(dim=-1)
        taus = torch.as_tensor(self.thresholds, dtype=conf.dtype, device=conf.device)
        fired = conf.detach() > taus
        n = self.num_blocks
        exit_index = torch.where(
            fired.any(dim=1), fired.to(torch.int64).argmax(dim=1), torch.full_like(fired[:, 0], n - 1, dtype=torch.int64)
        )
        idx = torch.arange(n, device=conf.device)
        executed = (idx.unsqueeze(0) <= exit_index.unsqueeze(1)).to(conf.dtype)
        logits = all_logits[torch.arange(x.shape[0]), exit_index]
        return logits, conf, executed

    @torch.no_grad()
    def trace_one(self, x):
        h = self.stem_features(x)
        flops = self._fixed_flops
        n = self.num_blocks
        scores = [0.0] * n
        activated = [False] * n
        logits = None
        exit_index = n - 1
        for i, (block, head, tau) in enumerate(zip(self.blocks, self.heads, self.thresholds)):
            h = h + block(h)
            logits = head(h)
            flops += self._block_flops[i]
            activated[i] = True
            scores[i] = float(F.softmax(logits, dim=-1).max())
            if scores[i] > tau:
                exit_index = i
                break
        return logits, BlockTrace(scores, activated, logits[0].tolist(), exit_index, flops)


def _seeded_init(model: nn.Module, rng_seed: int) -> None:
    gen = torch.Generator().manual_seed(int(rng_seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.copy_(torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen))
                module.weight.mul_(math.sqrt(3.0))  # kaiming-uniform gain for ReLU nets
                if module.bias is not None:
                    module.bias.copy_(torch.empty_like(module.bias).uniform_(-bound, bound, generator=gen))
    if isinstance(model, AdnnModel):
        # residual branches start small so deep identity stacks stay stable
        with torch.no_grad():
            for block in model.blocks:
                block.conv2.weight.mul_(0.1)


def build_skip_model(spec: AdnnSpec, rng_seed: int = 0) -> SkipNetModel:
    if spec.mechanism != CONDITIONAL_SKIPPING:
        raise ConfigurationError("build_skip_model needs a conditional_skipping spec")
    model = SkipNetModel(spec)
    _seeded_init(model, rng_seed)
    return model.eval()


def build_early_exit_model(spec: AdnnSpec, rng_seed: int = 0) -> EarlyExitModel:
    if spec.mechanism != EARLY_TERMINATION:
        raise ConfigurationError("build_early_exit_model needs an early_termination spec")
    model = EarlyExitModel(spec)
    _seeded_init(model, rng_seed)
    return model.eval()


def build_model(spec: AdnnSpec, rng_seed: int = 0) -> AdnnModel:
    if spec.mechanism == CONDITIONAL_SKIPPING:
        return build_skip_model(spec, rng_seed)
    return build_early_exit_model(spec, rng_seed)


def forward_with_trace(model: AdnnModel, x):
    """Run ``model`` on one input (C,H,W) or a batch (B,C,H,W).

    A single input goes through the skipping path and returns
    ``(logits, BlockTrace)``; a batch returns ``(logits, [BlockTrace, ...])``
    built from the masked batched path.
    """
    x = torch.as_tensor(x, dtype=torch.float32)
    single = x.dim() == 3
    x = model.check_input(x)
    was_training = model.training
    model.eval()
    try:
        if single:
            logits, trace = model.trace_one(x)
            return logits[0], trace
        with torch.no_grad():
            logits, scores, executed = model.gated_forward(x)
        traces = traces_from_batch(model, logits, scores, executed)
        return logits, traces
    finally:
        model.train(was_training)


def traces_from_batch(model: AdnnModel, logits, scores, executed) -> list:
    traces = []
    weights = model.profile.block_weights
    for b in range(logits.shape[0]):
        act = [bool(v) for v in executed[b].tolist()]
        sc = scores[b].tolist()
        exit_index = None
        if model.mechanism == EARLY_TERMINATION:
            exit_index = max(i for i, a in enumerate(act) if a)
            sc = [s if a else 0.0 for s, a in zip(sc, act)]
        flops = model.profile.stem_flops + math.fsum(w for w, a in zip(weights, act) if a)
        traces.append(BlockTrace(sc, act, logits[b].tolist(), exit_index, flops))
    return traces


def set_thresholds(model: AdnnModel, taus: Sequence[float]) -> AdnnModel:
    """Copy of ``model`` with new comparison thresholds; weights untouched."""
    taus = [float(t) for t in taus]
    if len(taus) != model.num_blocks:
        raise ValueError(f"expected {model.num_blocks} thresholds, got {len(taus)}")
    if any(not 0.0 <= t <= 1.0 for t in taus):
        raise ValueError(f"thresholds must lie in [0, 1]: {taus}")
    new = copy.deepcopy(model)
    new.spec = model.spec.with_thresholds(taus)
    return new


@dataclass
class AdnnTrainConfig:
    epochs: int = 15
    learning_rate: float = 2e-3
    batch_size: int = 64
    sparsity_weight: float = 0.1
    target_rate: float = 0.5
    temperature: float = 0.1
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _task_loss(model: AdnnModel, x, y, config: AdnnTrainConfig):
    if isinstance(model, EarlyExitModel):
        all_logits = model.exit_logits(x)
        conf = F.softmax(all_logits, dim=-1).amax(dim=-1)
        ce = sum(F.cross_entropy(all_logits[:, i], y) for i in range(model.num_blocks)) / model.num_blocks
        scores = conf
    else:
        logits, scores, executed = model.gated_forward(x, straight_through=True)
        ce = F.cross_entropy(logits, y)
    if isinstance(model, EarlyExitModel):
        cost = soft_cost(scores, model.thresholds, model.profile, config.temperature)
        sparsity = normalized_cost(cost, model.profile).mean()
    else:
        # per-gate target rate: every gate must pass only part of each batch,
        # which forces the decision to depend on the input.
        rates = (executed + scores - scores.detach()).mean(0)
        sparsity = ((rates - config.target_rate) ** 2).sum()
    return ce + config.sparsity_weight * sparsity


@torch.no_grad()
def evaluate_accuracy(model: AdnnModel, x, y, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(x), batch_size):
        logits = model(x[i : i + batch_size])
        correct += int((logits.argmax(1) == y[i : i + batch_size]).sum())
    return correct / max(len(x), 1)


@torch.no_grad()
def mean_activated_fraction(model: AdnnModel, x, batch_size: int = 256) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch_size):
        _, _, executed = model.gated_forward(x[i : i + batch_size])
        total += float(executed.sum())
    return total / (len(x) * model.num_blocks)


def train_adnn(model: AdnnModel, dataset, config: Optional[AdnnTrainConfig] = None):
    """Supervised training with a computation-sparsity penalty on the gates.

    ``dataset`` exposes ``x_train, y_train, x_test, y_test`` tensors.
    Returns ``(model, held_out_accuracy)``.
    """
    config = config or AdnnTrainConfig()
    if len(dataset.x_train) == 0:
        raise ValueError("empty training set")
    if tuple(dataset.x_train.shape[1:]) != model.spec.input_shape:
        raise ValueError("dataset does not match the model input shape")
    torch.manual_seed(config.rng_seed)
    gen = torch.Generator().manual_seed(config.rng_seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = len(dataset.x_train)
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = _task_loss(model, dataset.x_train[idx], dataset.y_train[idx], config)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite AdNN loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        logger.info("adnn epoch %d loss %.4f", epoch, loss.item())
    model.eval()
    return model, evaluate_accuracy(model, dataset.x_test, dataset.y_test)


def save_model(model: AdnnModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "spec": model.spec.to_dict(),
            "spec_hash": model.spec.spec_hash(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_model(path, spec: Optional[AdnnSpec] = None) -> AdnnModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    stored = AdnnSpec.from_dict(blob["spec"])
    if stored.spec_hash() != blob["spec_hash"]:
        raise ValueError(f"{path}: embedded spec does not match its hash")
    if spec is not None and spec.spec_hash() != blob["spec_hash"]:
        raise ValueError(f"{path}: checkpoint was built for a different AdnnSpec")
    model = build_model(stored)
    model.load_state_dict(blob["state_dict"])
    return model.eval()


def state_digest(model: nn.Module) -> str:
    """Hash of all parameters and buffers, for byte-identity checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
