import math

import pytest
import torch

from adnnperf import gan
from adnnperf.adnn import state_digest
from adnnperf.budget import L2, LINF, PerturbationBudget, batch_norms
from adnnperf.metrics import budget_violations

from conftest import tiny_model

SHAPE = (3, 8, 8)


def test_gan_loss_matches_direct_formula():
    r = torch.tensor([0.3, -1.2, 2.0])
    f = torch.tensor([-0.5, 0.7, 0.1])
    direct = torch.log(torch.sigmoid(r)).mean() + torch.log(1 - torch.sigmoid(f)).mean()
    assert float(gan.gan_loss(r, f)) == pytest.approx(float(direct), rel=1e-6)


def test_gan_loss_is_finite_for_extreme_logits():
    assert math.isfinite(float(gan.gan_loss(torch.tensor([-200.0]), torch.tensor([200.0]))))


def test_cost_mse_and_per_loss():
    assert float(gan.cost_mse(torch.ones(4))) == 0.0
    assert float(gan.cost_mse(torch.zeros(4))) == 1.0
    d = torch.zeros(2, *SHAPE)
    d[0, 0, 0, 0] = 3.0
    assert float(gan.per_loss(d, L2)) == pytest.approx(1.5)
    assert float(gan.per_loss(d, LINF)) == pytest.approx(1.5)


def test_adv_loss_range(skip_model, inputs):
    v = gan.adv_loss(inputs, skip_model).item()
    assert 0.0 <= v <= 1.0


@pytest.mark.parametrize("budget", [PerturbationBudget(LINF, 0.05), PerturbationBudget(L2, 0.5)])
def test_generator_output_in_budget(budget, inputs):
    g = gan.Generator(SHAPE, budget)
    x_bar = gan.perturb(g.eval(), inputs, budget)
    assert (batch_norms(x_bar - inputs, budget.norm_order) <= budget.epsilon + 1e-6).all()
    assert x_bar.min() >= 0 and x_bar.max() <= 1


def test_discriminator_shape(inputs):
    assert gan.Discriminator(SHAPE)(inputs).shape == (16,)


def test_config_validation():
    with pytest.raises(ValueError):
        gan.TrainConfig(alpha=0.0)
    with pytest.raises(ValueError):
        gan.TrainConfig(max_epochs=-1)


def _train(model, x, **kw):
    cfg = gan.TrainConfig(max_epochs=2, batch_size=16, learning_rate=1e-3, budget=PerturbationBudget(L2, 1.0), **kw)
    return gan.train(model, x, cfg)


def test_training_leaves_target_model_untouched(skip_model):
    x = torch.rand(40, *SHAPE, generator=torch.Generator().manual_seed(0))
    before = state_digest(skip_model)
    flags = [p.requires_grad for p in skip_model.parameters()]
    g, d, hist = _train(skip_model, x)
    assert state_digest(skip_model) == before
    assert [p.requires_grad for p in skip_model.parameters()] == flags
    assert len(hist.epochs) == 2
    assert hist.to_csv().splitlines()[0].split(",") == list(gan.HISTORY_COLUMNS)


def test_training_is_deterministic(skip_model):
    x = torch.rand(40, *SHAPE, generator=torch.Generator().manual_seed(0))
    g1, _, _ = _train(skip_model, x)
    g2, _, _ = _train(skip_model, x)
    assert state_digest(g1) == state_digest(g2)


def test_early_stopping_with_zero_patience(skip_model):
    x = torch.rand(40, *SHAPE, generator=torch.Generator().manual_seed(0))
    cfg = gan.TrainConfig(max_epochs=6, early_stop_patience=0, batch_size=16, budget=PerturbationBudget(L2, 1.0))
    _, _, hist = gan.train(skip_model, x, cfg)
    assert len(hist.epochs) <= 6


def test_generate_suite_and_checkpoint(tmp_path, skip_model, inputs):
    g, d, _ = _train(skip_model, inputs)
    suite = gan.generate(g, inputs, model=skip_model)
    assert suite.producer == "deepperform"
    assert budget_violations(suite) == 0
    gan.save_generator(g, d, gan.TrainConfig(budget=g.budget), tmp_path / "g.pt")
    g2, d2, cfg, _ = gan.load_generator(tmp_path / "g.pt")
    assert torch.equal(gan.perturb(g2, inputs, cfg.budget), gan.perturb(g.eval(), inputs, cfg.budget))


def test_missing_checkpoint_names_artifact(tmp_path):
    with pytest.raises(FileNotFoundError, match="g.pt"):
        gan.load_generator(tmp_path / "g.pt")


def test_ablation_without_adv_term_is_weaker():
    # alpha -> tiny: the generator is not pushed toward costly inputs
    from adnnperf.adnn import AdnnTrainConfig, train_adnn
    from adnnperf.data import synthetic_dataset

    ds = synthetic_dataset(num_classes=3, image_size=8, n_train=400, n_test=100)
    model, _ = train_adnn(tiny_model(), ds, AdnnTrainConfig(epochs=4))
    x = ds.x_train[:200]
    budget = PerturbationBudget(L2, 2.0)

    def mean_soft(alpha):
        cfg = gan.TrainConfig(alpha=alpha, max_epochs=4, batch_size=32, learning_rate=1e-3, budget=budget)
        g, _, _ = gan.train(model, x, cfg)
        with torch.no_grad():
            return float(model.soft_cost(gan.perturb(g, ds.x_test, budget), normalized=True).mean())

    assert mean_soft(10.0) > mean_soft(1e-6)
