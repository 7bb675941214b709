"""GAN-based performance test generation.

The generator maps a seed to a bounded perturbation; the discriminator
tries to tell seeds from perturbed samples; the frozen target model scores
how much computation a perturbed sample triggers. The generator is trained
on

    L = L_gan + alpha * L_adv + beta * L_per

and afterwards produces a test sample with a single forward pass.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .budget import PerturbationBudget, batch_norms, clip_sample
from .flops import normalized_cost, soft_cost

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_gan", "loss_adv", "loss_per", "total", "val_objective", "seconds")


def conv_block(c_in, c_out, kernel, stride, padding):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, padding, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder (2 conv blocks) -> 4 residual blocks -> mirrored decoder.

    The output is ``tanh(.) * epsilon``: already inside the ball for Linf;
    for L2 the projection in :func:`perturb` rescales it onto the sphere, so
    trained generators spend (almost) the whole budget.
    """

    def __init__(self, input_shape: tuple, budget: PerturbationBudget, width: int = 8, num_res: int = 4):
        super().__init__()
        c = input_shape[0]
        self.input_shape = tuple(input_shape)
        self.budget = budget
        self.width = width
        self.encoder = nn.Sequential(
            conv_block(c, width, 3, 1, 1),
            conv_block(width, 2 * width, 4, 2, 1),
        )
        self.res = nn.Sequential(*(ResBlock(2 * width) for _ in range(num_res)))
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, c, 3, 1, 1),
        )
        self.register_buffer("scale", torch.tensor(float(budget.epsilon)))

    def forward(self, x):
        return torch.tanh(self.decoder(self.res(self.encoder(x)))) * self.scale


class Discriminator(nn.Module):
    """Three conv blocks, flatten, one dense layer to a real-valued logit."""

    def __init__(self, input_shape: tuple, width: int = 16):
        super().__init__()
        c, h, w = input_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * width),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1, bias=False),
            nn.BatchNorm2d(4 * width),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.fc = nn.Linear(4 * width * (h // 8) * (w // 8), 1)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1)).squeeze(-1)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.001
    learning_rate: float = 1e-4
    max_epochs: int = 100
    early_stop_patience: int = 10
    batch_size: int = 64
    temperature: float = 0.1
    validation_fraction: float = 0.1
    generator_width: int = 8
    discriminator_width: int = 16
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.budget, dict):
            self.budget = PerturbationBudget.from_dict(self.budget)
        if min(self.alpha, self.beta, self.learning_rate) <= 0:
            raise ValueError("alpha, beta and learning_rate must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = self.budget.to_dict()
        return d


def gan_loss(d_real_scores, d_fake_scores):
    """mean log D(x) + mean log(1 - D(x_bar)) for discriminator logits.

    Uses log(sigmoid(s)) = -softplus(-s) and log(1 - sigmoid(s)) =
    -softplus(s), so saturated discriminators stay finite.
    """
    real = torch.as_tensor(d_real_scores, dtype=torch.float32)
    fake = torch.as_tensor(d_fake_scores, dtype=torch.float32)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("empty score batch")
    if real.numel() != fake.numel():
        raise ValueError("real and fake score batches differ in length")
    if torch.isnan(real).any() or torch.isnan(fake).any():
        raise FloatingPointError("NaN discriminator score")
    return -F.softplus(-real).mean() - F.softplus(fake).mean()


def adv_loss(generated_batch, model, profile=None, temperature: float = 0.1):
    """MSE between each sample's normalised soft cost and 1 (all blocks on)."""
    profile = profile or model.profile
    _, scores, _ = model.gated_forward(generated_batch)
    cost = normalized_cost(soft_cost(scores, model.thresholds, profile, temperature), profile)
    return cost_mse(cost)


def cost_mse(normalized_costs):
    costs = torch.as_tensor(normalized_costs, dtype=torch.float32)
    return ((1.0 - costs) ** 2).mean()


def per_loss(perturbation_batch, norm_order: str):
    """Mean per-sample p-norm of a (B, ...) perturbation batch."""
    delta = torch.as_tensor(perturbation_batch)
    if delta.dim() == 1:
        delta = delta.unsqueeze(0)
    return batch_norms(delta, norm_order).mean()


def perturb(generator: Generator, x, budget: PerturbationBudget):
    return clip_sample(x, x + generator(x), budget)


@dataclass
class StepLosses:
    loss_gan: float
    loss_adv: float
    loss_per: float
    total: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # StepLosses per generator update
    stopped_early: bool = False
    best_epoch: Optional[int] = None
    seconds: float = 0.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.epochs:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})
        text = buf.getvalue()
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        return text


def _frozen(model):
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    return flags


def _validation_objective(generator, model, x_val, config) -> float:
    generator.eval()
    with torch.no_grad():
        total, n = 0.0, 0
        for i in range(0, len(x_val), 256):
            x = x_val[i : i + 256]
            x_bar = perturb(generator, x, config.budget)
            l_adv = adv_loss(x_bar, model, temperature=config.temperature)
            l_per = per_loss(x_bar - x, config.budget.norm_order)
            total += (l_adv + config.beta * l_per).item() * len(x)
            n += len(x)
    return total / max(n, 1)


def train(model, train_x, config: Optional[TrainConfig] = None):
    """Train a generator/discriminator pair against a frozen target model.

    ``train_x`` is a (B, C, H, W) tensor of seeds in [0, 1]. Returns
    ``(generator, discriminator, history)``; the generator returned is the
    one with the best validation objective.
    """
    config = config or TrainConfig()
    if len(train_x) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(config.rng_seed)
    gen_rng = torch.Generator().manual_seed(config.rng_seed)
    input_shape = tuple(train_x.shape[1:])
    generator = Generator(input_shape, config.budget, config.generator_width)
    discriminator = Discriminator(input_shape, config.discriminator_width)

    order = torch.randperm(len(train_x), generator=gen_rng)
    n_val = int(len(train_x) * config.validation_fraction) if len(train_x) >= 10 else 0
    x_val, x_fit = train_x[order[:n_val]], train_x[order[n_val:]]

    model.eval()
    flags = _frozen(model)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    history = TrainHistory()
    best_val, best_state, stale = math.inf, None, 0
    start = time.perf_counter()
    try:
        for epoch in range(config.max_epochs):
            generator.train()
            discriminator.train()
            perm = torch.randperm(len(x_fit), generator=gen_rng)
            sums = {"loss_gan": 0.0, "loss_adv": 0.0, "loss_per": 0.0, "total": 0.0}
            batches = 0
            for b, i in enumerate(range(0, len(x_fit), config.batch_size)):
                x = x_fit[perm[i : i + config.batch_size]]
                if len(x) < 2:
                    continue
                x_bar = perturb(generator, x, config.budget)

                # discriminator ascends L_gan
                d_loss = -gan_loss(discriminator(x), discriminator(x_bar.detach()))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

                # generator descends the full objective
                l_gan = gan_loss(discriminator(x), discriminator(x_bar))
                l_adv = adv_loss(x_bar, model, temperature=config.temperature)
                l_per = per_loss(x_bar - x, config.budget.norm_order)
                total = l_gan + config.alpha * l_adv + config.beta * l_per
                if not torch.isfinite(total):
                    raise FloatingPointError(
                        f"non-finite generator loss at epoch {epoch}, batch {b}: "
                        f"gan={l_gan.item()} adv={l_adv.item()} per={l_per.item()}"
                    )
                opt_g.zero_grad()
                total.backward()
                opt_g.step()

                step = StepLosses(l_gan.item(), l_adv.item(), l_per.item(), total.item())
                history.steps.append(step)
                for k in sums:
                    sums[k] += getattr(step, k)
                batches += 1

            val = _validation_objective(generator, model, x_val, config) if n_val else sums["loss_adv"] / max(batches, 1)
            row = {k: v / max(batches, 1) for k, v in sums.items()}
            row.update(epoch=epoch, val_objective=val, seconds=time.perf_counter() - start)
            history.epochs.append(row)
            logger.info("gan epoch %d %s", epoch, row)
            if val < best_val:
                best_val, stale = val, 0
                best_state = {k: v.clone() for k, v in generator.state_dict().items()}
                history.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    history.stopped_early = True
                    break
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
    if best_state is not None:
        generator.load_state_dict(best_state)
    history.seconds = time.perf_counter() - start
    generator.eval()
    discriminator.eval()
    return generator, discriminator, history


@torch.no_grad()
def generate_samples(generator: Generator, seeds, budget: Optional[PerturbationBudget] = None):
    """One forward pass and clip per seed, timed individually.

    Returns ``(generated, seconds_per_sample)``.
    """
    budget = budget or generator.budget
    generator.eval()
    out, times = [], []
    for x in seeds:
        x = x.unsqueeze(0)
        t0 = time.perf_counter()
        x_bar = perturb(generator, x, budget)
        times.append(time.perf_counter() - t0)
        out.append(x_bar[0])
    return torch.stack(out), times


def generate(generator: Generator, seeds, budget: Optional[PerturbationBudget] = None, model=None, seed_ids=None):
    """Build a :class:`~adnnperf.metrics.TestSuite` from one-shot generation.

    ``model`` supplies traces and costs for both sides of each pair.
    """
    from .metrics import build_suite

    budget = budget or generator.budget
    generated, times = generate_samples(generator, seeds, budget)
    return build_suite(model, seeds, generated, times, budget, "deepperform", seed_ids)


def save_generator(generator: Generator, discriminator: Optional[Discriminator], config: TrainConfig, path, extra=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": config.to_dict(),
            "input_shape": list(generator.input_shape),
            "generator": generator.state_dict(),
            "discriminator": None if discriminator is None else discriminator.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_generator(path):
    """Returns ``(generator, discriminator, config, extra)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"generator checkpoint {path} does not exist (train it with train-generator)")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig(**{**blob["config"], "budget": PerturbationBudget.from_dict(blob["config"]["budget"])})
    shape = tuple(blob["input_shape"])
    generator = Generator(shape, config.budget, config.generator_width)
    generator.load_state_dict(blob["generator"])
    discriminator = None
    if blob["discriminator"] is not None:
        discriminator = Discriminator(shape, config.discriminator_width)
        discriminator.load_state_dict(blob["discriminator"])
        discriminator.eval()
    return generator.eval(), discriminator, config, blob.get("extra", {})
