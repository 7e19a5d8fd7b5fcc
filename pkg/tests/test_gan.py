import copy
import json
import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

import desk
import oracles
from unlearnable.data import DataError, make_synthetic
from unlearnable.gan import (GanTrainSpec, confounder_loss, discriminator_loss, discriminator_loss_from_probs,
                             hinge_loss, initial_confounder_loss, train_confoundergan)
from unlearnable.models import ArchSpec, TrainSpec, build_model, pretrain_classifier

# pinned from the independent scalar oracle in tests/oracles.py
DISC_EXAMPLE = -0.39526976328429736
CE_2_0 = 0.1269280110429727


class FixedProbs(nn.Module):
    """Discriminator stand-in returning preset probabilities, keyed by batch identity."""

    def __init__(self, table):
        super().__init__()
        self.table = table

    def forward(self, x):
        return self.table[int(x.flatten()[0])]


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(len(x), -1)


# -- discriminator loss ---------------------------------------------------------

def test_disc_loss_constant_half():
    d = FixedProbs({0: torch.full((3,), 0.5), 1: torch.full((3,), 0.5)})
    loss = discriminator_loss(d, torch.zeros(3, 1), torch.ones(3, 1))
    assert abs(float(loss) - 2 * math.log(0.5)) < 1e-6


def test_disc_loss_worked_example():
    assert abs(oracles.discriminator_objective([0.8, 0.9], [0.3, 0.1]) - DISC_EXAMPLE) < 1e-12
    assert abs(DISC_EXAMPLE - (-0.3953)) < 5e-5
    d = FixedProbs({0: torch.tensor([0.8, 0.9]), 1: torch.tensor([0.3, 0.1])})
    loss = discriminator_loss(d, torch.zeros(2, 1), torch.ones(2, 1))
    assert abs(float(loss) - DISC_EXAMPLE) < 1e-6


def test_disc_loss_perfect_discriminator_limit():
    loss = discriminator_loss_from_probs(torch.tensor([1.0, 1.0]), torch.tensor([0.0, 0.0]))
    assert torch.isfinite(loss) and -1e-6 < float(loss) <= 0


def test_disc_loss_shape_mismatch():
    d = build_model(ArchSpec("discriminator4", (3, 8, 8)), 0)
    with pytest.raises(ValueError):
        discriminator_loss(d, torch.rand(2, 3, 8, 8), torch.rand(3, 3, 8, 8))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_disc_loss_never_positive(p_real, p_fake):
    assert float(discriminator_loss_from_probs(torch.tensor(p_real), torch.tensor(p_fake))) <= 0


def test_disc_loss_real_network_is_finite():
    d = build_model(ArchSpec("discriminator4", (3, 8, 8)), 0)
    x = torch.rand(4, 3, 8, 8)
    with torch.no_grad():
        assert float(discriminator_loss(d, x, x)) < 0


# -- confounder loss ------------------------------------------------------------

def test_confounder_uniform_is_log_k():
    loss = confounder_loss(FixedLogits(torch.zeros(10)), torch.zeros(4, 3), torch.tensor([0, 3, 7, 9]))
    assert abs(float(loss) - math.log(10)) < 1e-6


def test_confounder_certain_is_zero():
    loss = confounder_loss(FixedLogits([100.0, -100.0]), torch.zeros(2, 3), torch.tensor([0, 0]))
    assert float(loss) < 1e-6


def test_confounder_closed_form_example():
    assert abs(oracles.softmax_cross_entropy([2.0, 0.0], 0) - CE_2_0) < 1e-12
    loss = confounder_loss(FixedLogits([2.0, 0.0]), torch.zeros(1, 3), torch.tensor([0]))
    assert abs(float(loss) - CE_2_0) < 1e-6


def test_confounder_sees_noise_not_image():
    seen = {}

    class Spy(nn.Module):
        def forward(self, x):
            seen["x"] = x
            return torch.zeros(len(x), 2)

    noise = torch.full((2, 3, 4, 4), 0.01)
    confounder_loss(Spy(), noise, torch.tensor([0, 1]))
    assert torch.equal(seen["x"], noise)


@pytest.mark.parametrize("labels", [[0, 2], [-1, 0]])
def test_confounder_label_out_of_range(labels):
    with pytest.raises(ValueError):
        confounder_loss(FixedLogits([0.0, 0.0]), torch.zeros(2, 3), torch.tensor(labels))


# -- hinge loss ----------------------------------------------------------------

def _with_norm(norm, numel=12):
    v = torch.ones(numel)
    return v / v.norm() * norm


def test_hinge_zero_noise():
    assert float(hinge_loss(torch.zeros(3, 12), 0.7)) == 0.0


def test_hinge_single():
    assert abs(float(hinge_loss(_with_norm(2.5)[None], 1.0)) - 1.5) < 1e-6


def test_hinge_batch():
    batch = torch.stack([_with_norm(0.5), _with_norm(3.0)])
    assert abs(float(hinge_loss(batch, 1.0)) - 1.0) < 1e-6


def test_hinge_rejects_nonpositive_c():
    with pytest.raises(ValueError):
        hinge_loss(torch.zeros(1, 3), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=6), st.floats(0.01, 10))
def test_hinge_matches_oracle_and_zero_iff_inside(norms, c):
    # one-element items make the L2 norm exact
    batch = torch.tensor(norms, dtype=torch.float64)[:, None]
    got = float(hinge_loss(batch, c))
    assert got >= 0
    assert abs(got - oracles.hinge(norms, c)) < 1e-9
    assert (got == 0) == all(n <= c for n in norms)


# -- training loop --------------------------------------------------------------

SHAPE = (3, 8, 8)


@pytest.fixture(scope="module")
def pool():
    return make_synthetic(2, 16, SHAPE, seed=0)


@pytest.fixture(scope="module")
def classifier(pool):
    return pretrain_classifier(pool, ArchSpec("smallcnn", SHAPE, 2), TrainSpec(epochs=3, batch_size=8))


def _spec(**kw):
    base = dict(epochs=1, batch_size=8, seed=0, generator_width=4, discriminator_width=4, epsilon=8 / 255)
    base.update(kw)
    return GanTrainSpec(**base)


def _params(m):
    return {k: v.clone() for k, v in m.module.named_parameters()}


def _equal(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def test_zero_epochs_returns_initialization(pool, classifier):
    gen, disc, curves = train_confoundergan(pool, classifier, _spec(epochs=0))
    init = build_model(ArchSpec("generator4x4", SHAPE, width=4), 0)
    assert _equal(_params(gen), _params(init))
    assert curves == []


def test_classifier_is_untouched(pool, classifier):
    before = copy.deepcopy(classifier.state())
    flags = [p.requires_grad for p in classifier.module.parameters()]
    train_confoundergan(pool, classifier, _spec(epochs=2))
    after = classifier.state()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert flags == [p.requires_grad for p in classifier.module.parameters()]


def test_zero_learning_rates_leave_parameters_identical(pool, classifier):
    zero = TrainSpec(lr=0.0, lr_schedule="constant", epochs=1)
    gen, disc, _ = train_confoundergan(pool, classifier, _spec(gen_train=zero, disc_train=zero))
    assert _equal(_params(gen), _params(build_model(ArchSpec("generator4x4", SHAPE, width=4), 0)))
    assert _equal(_params(disc), _params(build_model(ArchSpec("discriminator4", SHAPE, width=4), 1)))


def test_plain_confounder_step_matches_hand_rolled(pool, classifier):
    """alpha=0 and no adversarial term: one update is exactly an SGD step on the confounder loss."""
    lr, eps = 0.05, 8 / 255
    spec = _spec(alpha=0.0, use_generator_adversarial_term=False, batch_size=len(pool),
                 gen_train=TrainSpec(lr=lr, lr_schedule="constant", epochs=1), epsilon=eps)
    gen, _, _ = train_confoundergan(pool, classifier, spec)

    ref = build_model(ArchSpec("generator4x4", SHAPE, width=4), 0)
    ref.module.train()
    order = torch.randperm(len(pool), generator=torch.Generator().manual_seed(0))
    f = classifier.module.eval()
    loss = F.cross_entropy(f(eps * ref.module(pool.images[order])), pool.labels[order])
    grads = torch.autograd.grad(loss, list(ref.module.parameters()))
    expected = {k: p.detach() - lr * g for (k, p), g in zip(ref.module.named_parameters(), grads)}
    got = _params(gen)
    for k in expected:
        assert torch.allclose(got[k], expected[k], atol=1e-6, rtol=0), k


def test_curves_have_all_components(tmp_path, pool, classifier):
    result = train_confoundergan(pool, classifier, _spec(epochs=2))
    assert [row["epoch"] for row in result.curves] == [0, 1]
    for row in result.curves:
        assert set(row) == {"epoch", "l_dis", "l_confounder", "l_hinge", "l_gen_adv"}
        assert row["l_dis"] <= 0 and row["l_confounder"] >= 0 and row["l_hinge"] >= 0
    result.write_curves(tmp_path / "c.jsonl")
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == result.curves


def test_training_is_deterministic(pool, classifier):
    a = train_confoundergan(pool, classifier, _spec(epochs=2))
    b = train_confoundergan(pool, classifier, _spec(epochs=2))
    assert a.generator.digest() == b.generator.digest()
    assert a.curves == b.curves


def test_confounder_loss_decreases():
    cfg = desk.config(0)
    init = build_model(ArchSpec("generator4x4", cfg.image_shape, width=cfg.model.generator_width), 0)
    pool, f = desk.source(0), desk.classifier(0)
    before = initial_confounder_loss(init, f, pool, cfg.epsilon)
    assert initial_confounder_loss(desk.gan(0).generator, f, pool, cfg.epsilon) < before


def test_empty_dataset_rejected(pool, classifier):
    with pytest.raises(DataError):
        train_confoundergan(pool.subset([]), classifier, _spec())


def test_class_mismatch_rejected(classifier):
    with pytest.raises(DataError):
        train_confoundergan(make_synthetic(3, 2, SHAPE), classifier, _spec())


@pytest.mark.parametrize("kw", [dict(alpha=-1.0), dict(c=0.0), dict(epsilon=0.0), dict(epsilon=1.5)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        GanTrainSpec(**kw)


def test_default_c_is_half_the_max_norm():
    spec = GanTrainSpec(epsilon=8 / 255)
    assert abs(spec.budget.l2_bound((3, 32, 32)) - oracles.l2_bound_default(8 / 255, (3, 32, 32))) < 1e-12
