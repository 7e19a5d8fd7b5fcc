"""Sample-wise error-minimizing noise (bi-level) baseline."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import Dataset, DataError
from .models import ArchSpec, ModelHandle, batches, build_model, predict_logits

log = logging.getLogger(__name__)


class EmnNotConverged(UserWarning):
    pass


@dataclass(frozen=True)
class EmnSpec:
    inner_lr: float = 0.003
    inner_steps: int = 20
    outer_lr: float = 0.003
    outer_steps: int = 10
    outer_momentum: float = 0.9
    stop_train_error: float = 0.01
    epsilon: float = 8 / 255
    max_rounds: int = 100
    batch_size: int = 128
    signed: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise ValueError("inner_steps and outer_steps must be >= 1")
        if not 0 < self.stop_train_error < 1:
            raise ValueError("stop_train_error must lie in (0, 1)")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


def project(delta: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip into the epsilon box and keep x + delta inside [0, 1]."""
    delta = delta.clamp(-epsilon, epsilon)
    return (x + delta).clamp(0.0, 1.0) - x


def per_image_loss(model: ModelHandle, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    logits = predict_logits(model, images)
    return F.cross_entropy(logits, labels, reduction="none")


def inner_pass(model: ModelHandle, x: torch.Tensor, y: torch.Tensor, delta: torch.Tensor, spec: EmnSpec,
               on_step=None) -> torch.Tensor:
    """``inner_steps`` descent steps on each image's noise against the frozen model."""
    module = model.module
    module.eval()
    out = delta.clone()
    for idx in batches(len(x), spec.batch_size):
        xb, yb = x[idx], y[idx]
        d = out[idx].clone()
        for step in range(spec.inner_steps):
            d.requires_grad_(True)
            # sum, not mean: each image's step must not depend on its batch mates
            loss = F.cross_entropy(module(xb + d), yb, reduction="sum")
            (grad,) = torch.autograd.grad(loss, d)
            with torch.no_grad():
                direction = grad.sign() if spec.signed else grad
                d = project(d - spec.inner_lr * direction, xb, spec.epsilon)
            if on_step is not None:
                on_step(step, d)
        out[idx] = d.detach()
    return out


def outer_steps(model: ModelHandle, x: torch.Tensor, y: torch.Tensor, delta: torch.Tensor, spec: EmnSpec,
                opt: torch.optim.Optimizer, g: torch.Generator) -> None:
    module = model.module
    module.train()
    it = iter(())
    for _ in range(spec.outer_steps):
        idx = next(it, None)
        if idx is None:
            it = iter(batches(len(x), spec.batch_size, g))
            idx = next(it)
        loss = F.cross_entropy(module(x[idx] + delta[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    module.eval()


def train_error(model: ModelHandle, images: torch.Tensor, labels: torch.Tensor) -> float:
    pred = predict_logits(model, images).argmax(1)
    return float((pred != labels).float().mean())


def emn_generate(dataset: Dataset, source_spec: ArchSpec, spec: EmnSpec, source_model: ModelHandle | None = None):
    """Alternate noise minimization and source-model updates until the model "has learned" the data.

    Each round runs one inner pass (every image's noise takes ``inner_steps``
    projected steps minimizing its loss), then checks the source model's
    error on the perturbed set; if above ``stop_train_error`` the model takes
    ``outer_steps`` SGD steps on the perturbed data and the next round starts.

    Returns ``(encrypted_dataset, noise, info)``.
    """
    if len(dataset) == 0:
        raise DataError("cannot generate noise for an empty dataset")
    if source_spec.class_count != dataset.class_count:
        raise DataError(f"source model has {source_spec.class_count} classes, dataset {dataset.class_count}")
    model = source_model.clone() if source_model is not None else build_model(source_spec, spec.seed)
    x, y = dataset.images, dataset.labels
    delta = torch.zeros_like(x)
    opt = torch.optim.SGD(model.module.parameters(), lr=spec.outer_lr, momentum=spec.outer_momentum)
    g = torch.Generator().manual_seed(spec.seed)
    rounds = 0
    history = []
    converged = False
    while True:
        delta = inner_pass(model, x, y, delta, spec)
        err = train_error(model, x + delta, y)
        history.append(err)
        log.debug("emn round %d train error %.4f", rounds, err)
        if err <= spec.stop_train_error:
            converged = True
            break
        if rounds >= spec.max_rounds:
            warnings.warn(
                f"EMN stopped after {rounds} outer rounds with train error {err:.4f} > {spec.stop_train_error}",
                EmnNotConverged,
            )
            break
        outer_steps(model, x, y, delta, spec, opt, g)
        rounds += 1
    encrypted = dataset.derive((x + delta).clamp(0, 1), "emn", f"{dataset.name}-emn")
    info = {"outer_rounds": rounds, "converged": converged, "train_error": history[-1], "error_history": history,
            "source_digest": model.digest()}
    return encrypted, delta, info
