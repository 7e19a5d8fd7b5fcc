from collections import Counter

import pytest
import torch

from unlearnable.data import DataError, make_synthetic
from unlearnable.encrypt import PerturbationBudget
from unlearnable.evaluation import (DenoiserSpec, MixtureSpec, RunRecord, adaptive_denoiser_attack, append_records,
                                    compose_training_set, median, plot_curves, read_records, render_csv,
                                    render_markdown, train_victim, transferability_sweep)
from unlearnable.models import ArchSpec, TrainSpec, build_model

SHAPE = (3, 8, 8)


@pytest.fixture(scope="module")
def natural():
    return make_synthetic(2, 20, SHAPE, seed=0)


@pytest.fixture(scope="module")
def test_set():
    return make_synthetic(2, 10, SHAPE, seed=1000, prototype_seed=0)


@pytest.fixture(scope="module")
def encrypted(natural):
    return natural.derive((natural.images + 0.03).clamp(0, 1), "in_encrypted", "enc")


@pytest.mark.parametrize("p", [0.0, 0.25, 0.5, 1.0])
def test_mixture_counts_and_labels(natural, encrypted, p):
    parts = tuple((d, f) for d, f in ((encrypted, p), (natural, 1 - p)) if f > 0)
    mixed = compose_training_set(MixtureSpec(parts), seed=3)
    assert len(mixed) == len(natural)
    assert Counter(mixed.labels.tolist()) == Counter(natural.labels.tolist())
    n_enc = sum(any(torch.equal(x, e) for e in encrypted.images) for x in mixed.images)
    assert n_enc == round(p * len(natural))


def test_mixture_provenance(natural, encrypted):
    assert compose_training_set(MixtureSpec(((encrypted, 1.0),)), 0).provenance == "in_encrypted"
    assert compose_training_set(MixtureSpec(((encrypted, 0.5), (natural, 0.5))), 0).provenance == "mixture"


def test_mixture_is_seeded(natural, encrypted):
    spec = MixtureSpec(((encrypted, 0.5), (natural, 0.5)))
    a, b = compose_training_set(spec, 7), compose_training_set(spec, 7)
    assert torch.equal(a.images, b.images)


@pytest.mark.parametrize("parts", [(), "over", "negative"])
def test_mixture_rejects_bad_parts(natural, parts):
    with pytest.raises(DataError):
        if parts == "over":
            compose_training_set(MixtureSpec(((natural, 1.5),)), 0)
        elif parts == "negative":
            MixtureSpec(((natural, -0.1),))
        else:
            compose_training_set(MixtureSpec(()), 0)


def test_zero_epochs_reports_initial_accuracy(natural, test_set):
    arch = ArchSpec("smallcnn", SHAPE, 2)
    rec = train_victim(natural, test_set, arch, TrainSpec(epochs=0, seed=4))
    init = build_model(arch, 4)
    with torch.no_grad():
        expected = float((init.module.eval()(test_set.images).argmax(1) == test_set.labels).float().mean())
    assert rec.test_acc == [] and rec.final_test_acc == pytest.approx(expected)


def test_victim_rejects_non_natural_test_set(natural, encrypted):
    with pytest.raises(DataError):
        train_victim(natural, encrypted, ArchSpec("smallcnn", SHAPE, 2), TrainSpec(epochs=1))


def test_victim_record_fields(natural, test_set):
    rec = train_victim(natural, test_set, ArchSpec("smallcnn", SHAPE, 2), TrainSpec(epochs=2, batch_size=8),
                       augmentation="rhf")
    assert len(rec.train_acc) == len(rec.test_acc) == 2
    assert rec.final_test_acc == rec.test_acc[-1] and rec.max_test_acc == max(rec.test_acc)
    assert rec.method == "natural" and rec.augmentation == "rhf"


def test_empty_sweep(encrypted, test_set):
    assert transferability_sweep(encrypted, test_set, [], TrainSpec(epochs=1)) == []


def _record(**kw):
    base = dict(run_id="r", method="m", mixture="x", backbone="b", augmentation="none", train_acc=[0.5, 0.9],
                test_acc=[0.4, 0.6], final_test_acc=0.6, seed=0, wall_time=1.0)
    base.update(kw)
    return RunRecord(**base)


def test_records_round_trip(tmp_path):
    path = tmp_path / "results.jsonl"
    assert read_records(path) == []
    recs = [_record(), _record(run_id="s", method="n", extra={"k": 1})]
    append_records(path, recs[:1])
    append_records(path, recs[1:])
    assert read_records(path) == recs


def test_renderers(tmp_path):
    assert render_markdown([]).startswith("| backbone |")
    assert render_csv([]).count("\n") == 1
    plot_curves([], tmp_path / "empty.png")
    md = render_markdown([_record(), _record(final_test_acc=0.8), _record(method="n", backbone="c")])
    assert "| b | 70.0 |  |" in md and "| c |  | 60.0 |" in md
    plot_curves([_record()], tmp_path / "one.png")
    assert (tmp_path / "one.png").stat().st_size > 0


def test_median():
    assert median([3, 1, 2]) == 2 and median([1, 2, 3, 4]) == 2.5


def test_denoiser_attack_with_zero_noise_generator(natural, test_set):
    gen = build_model(ArchSpec("generator4x4", SHAPE, width=4), 0)
    last = [m for m in gen.module.modules() if isinstance(m, torch.nn.ConvTranspose2d)][-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    surrogate = make_synthetic(2, 10, SHAPE, seed=2000, prototype_seed=0)
    rec, denoiser = adaptive_denoiser_attack(gen, surrogate, natural, test_set, ArchSpec("smallcnn", SHAPE, 2),
                                             TrainSpec(epochs=1, batch_size=8), PerturbationBudget(8 / 255),
                                             DenoiserSpec(width=4, depth=2, epochs=2, batch_size=8))
    assert rec.method == "denoised" and 0 <= rec.final_test_acc <= 1
    assert denoiser.spec.arch_id == "dncnn_denoiser"
