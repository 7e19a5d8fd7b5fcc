"""ConfounderGAN: losses and the minibatch max-min training loop.

The generator maps an image to a bounded noise pattern. Three terms shape it:

* the discriminator term keeps ``x + noise`` indistinguishable from ``x``;
* the confounder term makes the fixed pretrained classifier read the *noise alone*
  as the image's label, which plants the noise -> label shortcut;
* the hinge term softly caps the noise L2 norm at ``c``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import Dataset, DataError
from .encrypt import PerturbationBudget
from .models import ArchSpec, ModelHandle, TrainSpec, TrainingDiverged, batches, build_model, predict_logits

log = logging.getLogger(__name__)

D_EPS = 1e-7


def _module(m):
    return m.module if isinstance(m, ModelHandle) else m


def discriminator_loss(disc, x_batch: torch.Tensor, x_enc_batch: torch.Tensor) -> torch.Tensor:
    """mean log D(x) + mean log(1 - D(x_enc)); the discriminator maximizes this."""
    if x_batch.shape != x_enc_batch.shape:
        raise ValueError("natural and encrypted batches must have the same shape")
    d = _module(disc)
    real = d(x_batch).clamp(D_EPS, 1 - D_EPS)
    fake = d(x_enc_batch).clamp(D_EPS, 1 - D_EPS)
    loss = torch.log(real).mean() + torch.log1p(-fake).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("discriminator loss is not finite")
    return loss


def discriminator_loss_from_probs(p_real: torch.Tensor, p_fake: torch.Tensor) -> torch.Tensor:
    p_real = p_real.clamp(D_EPS, 1 - D_EPS)
    p_fake = p_fake.clamp(D_EPS, 1 - D_EPS)
    return torch.log(p_real).mean() + torch.log1p(-p_fake).mean()


def confounder_loss(classifier, noise_batch: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the fixed classifier on the noise alone (not image + noise)."""
    f = _module(classifier)
    logits = f(noise_batch)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def hinge_loss(noise_batch: torch.Tensor, c: float) -> torch.Tensor:
    """mean over the batch of max(0, ||noise||_2 - c), norm over all elements of one item."""
    if c <= 0:
        raise ValueError("c must be positive")
    norms = noise_batch.flatten(1).norm(dim=1)
    return F.relu(norms - c).mean()


def generator_adversarial_loss(disc, x_enc_batch: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator side of the discriminator game: -mean log D(x_enc)."""
    p = _module(disc)(x_enc_batch).clamp(D_EPS, 1 - D_EPS)
    return -torch.log(p).mean()


@dataclass(frozen=True)
class GanTrainSpec:
    gen_train: TrainSpec = field(default_factory=lambda: TrainSpec(lr=0.025, momentum=0.9, lr_schedule="cosine", epochs=200))
    disc_train: TrainSpec = field(default_factory=lambda: TrainSpec(lr=0.025, momentum=0.9, lr_schedule="constant", epochs=200))
    alpha: float = 0.001
    c: float | None = None
    epsilon: float = 8 / 255
    epochs: int = 200
    use_generator_adversarial_term: bool = True
    adversarial_weight: float = 1.0
    batch_size: int = 128
    seed: int = 0
    generator_width: int | None = None
    discriminator_width: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.c is not None and self.c <= 0:
            raise ValueError("c must be positive")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.epsilon, self.c)


@dataclass
class GanResult:
    generator: ModelHandle
    discriminator: ModelHandle
    curves: list[dict]

    def __iter__(self):
        return iter((self.generator, self.discriminator, self.curves))

    def write_curves(self, path) -> None:
        Path(path).write_text("".join(json.dumps(row) + "\n" for row in self.curves))


def train_confoundergan(dataset: Dataset, classifier: ModelHandle, spec: GanTrainSpec) -> GanResult:
    """Alternate discriminator ascent and generator descent over minibatches.

    Per batch the discriminator is updated first on (x, x + G(x)), then the
    generator on confounder + alpha * hinge (+ the adversarial term when enabled).
    The classifier never receives updates.
    """
    if len(dataset) == 0:
        raise DataError("cannot train a generator on an empty dataset")
    if classifier.spec.class_count != dataset.class_count:
        raise DataError(f"classifier has {classifier.spec.class_count} classes, dataset {dataset.class_count}")
    shape = dataset.image_shape
    gen = build_model(ArchSpec("generator4x4", shape, width=spec.generator_width), spec.seed)
    disc = build_model(ArchSpec("discriminator4", shape, width=spec.discriminator_width), spec.seed + 1)
    c = spec.budget.l2_bound(shape)
    eps = spec.epsilon

    f = classifier.module
    f.eval()
    frozen = [p.requires_grad for p in f.parameters()]
    for p in f.parameters():
        p.requires_grad_(False)

    g_opt = spec.gen_train.make_optimizer(gen.module.parameters())
    d_opt = spec.disc_train.make_optimizer(disc.module.parameters())
    steps = spec.epochs * math.ceil(len(dataset) / spec.batch_size)
    g_sched = spec.gen_train.make_scheduler(g_opt, steps)
    d_sched = spec.disc_train.make_scheduler(d_opt, steps)
    rng = torch.Generator().manual_seed(spec.seed)
    curves: list[dict] = []
    try:
        for epoch in range(spec.epochs):
            gen.module.train()
            disc.module.train()
            sums = {"l_dis": 0.0, "l_confounder": 0.0, "l_hinge": 0.0, "l_gen_adv": 0.0}
            seen = 0
            for b, idx in enumerate(batches(len(dataset), spec.batch_size, rng)):
                x, t = dataset.images[idx], dataset.labels[idx]

                with torch.no_grad():
                    x_enc = (x + eps * gen.module(x)).clamp(0, 1)
                l_dis = discriminator_loss(disc, x, x_enc)
                d_opt.zero_grad()
                (-l_dis).backward()
                d_opt.step()

                noise = eps * gen.module(x)
                l_conf = confounder_loss(f, noise, t)
                l_hinge = hinge_loss(noise, c)
                g_loss = l_conf + spec.alpha * l_hinge
                l_adv = torch.zeros(())
                if spec.use_generator_adversarial_term:
                    l_adv = generator_adversarial_loss(disc, (x + noise).clamp(0, 1))
                    g_loss = g_loss + spec.adversarial_weight * l_adv
                if not torch.isfinite(g_loss):
                    raise TrainingDiverged(f"non-finite generator loss at epoch {epoch} batch {b}", epoch, b)
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()
                if g_sched is not None:
                    g_sched.step()
                if d_sched is not None:
                    d_sched.step()

                n = len(idx)
                seen += n
                sums["l_dis"] += l_dis.item() * n
                sums["l_confounder"] += l_conf.item() * n
                sums["l_hinge"] += l_hinge.item() * n
                sums["l_gen_adv"] += l_adv.item() * n
            row = {"epoch": epoch, **{k: v / seen for k, v in sums.items()}}
            curves.append(row)
            log.debug("gan epoch %d %s", epoch, row)
    finally:
        for p, r in zip(f.parameters(), frozen):
            p.requires_grad_(r)
    gen.meta.update(epoch=spec.epochs, epsilon=eps, c=c, classifier=classifier.digest())
    disc.meta.update(epoch=spec.epochs)
    gen.module.eval()
    disc.module.eval()
    return GanResult(gen, disc, curves)


def initial_confounder_loss(generator: ModelHandle, classifier: ModelHandle, dataset: Dataset, epsilon: float) -> float:
    with torch.no_grad():
        noise = epsilon * generator.module.eval()(dataset.images)
        return float(confounder_loss(classifier.module.eval(), noise, dataset.labels))


def noise_accuracy(generator: ModelHandle, classifier: ModelHandle, dataset: Dataset, epsilon: float) -> float:
    """Accuracy of the classifier on the pure noises G(x), scored against the images' labels."""
    with torch.no_grad():
        generator.module.eval()
        noise = torch.cat([epsilon * generator.module(dataset.images[idx]) for idx in batches(len(dataset), 512)])
    pred = predict_logits(classifier, noise).argmax(1)
    return float((pred == dataset.labels).float().mean())
