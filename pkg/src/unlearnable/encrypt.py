"""Generator-based encryption of images and datasets under a max-norm budget."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .data import Dataset, DataError, quantize, save_dataset
from .models import ModelHandle, batches


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationBudget:
    """Per-pixel max-norm bound ``epsilon`` and soft L2 bound ``c`` used by the hinge term."""

    epsilon: float = 8 / 255
    c: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise BudgetError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.c is not None and self.c <= 0:
            raise BudgetError("c must be positive")

    def l2_bound(self, image_shape) -> float:
        """``c`` if set, else half the largest L2 norm an epsilon-bounded noise can have."""
        if self.c is not None:
            return self.c
        return 0.5 * self.epsilon * math.sqrt(math.prod(image_shape))


def _check_shape(generator: ModelHandle, shape) -> None:
    if tuple(shape) != generator.spec.input_shape:
        raise BudgetError(f"image shape {tuple(shape)} does not match generator input shape {generator.spec.input_shape}")


def generate_noise(generator: ModelHandle | torch.nn.Module, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """epsilon * raw generator output; differentiable, used inside training."""
    module = generator.module if isinstance(generator, ModelHandle) else generator
    return epsilon * module(x)


@torch.no_grad()
def encrypt_image(generator: ModelHandle, x: torch.Tensor, budget: PerturbationBudget):
    """Encrypt one image (C, H, W) or a batch (N, C, H, W). Returns (x_enc, noise)."""
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    _check_shape(generator, batch.shape[1:])
    module = generator.module
    was_training = module.training
    module.eval()
    noise = budget.epsilon * module(batch)
    module.train(was_training)
    x_enc = (batch + noise).clamp(0.0, 1.0)
    if single:
        return x_enc[0], noise[0]
    return x_enc, noise


@torch.no_grad()
def encrypt_dataset(
    generator: ModelHandle,
    dataset: Dataset,
    budget: PerturbationBudget,
    provenance: str = "in_encrypted",
    batch_size: int = 256,
    quantized: bool = False,
) -> Dataset:
    if provenance not in ("in_encrypted", "out_encrypted"):
        raise DataError(f"encryption provenance must be in_encrypted or out_encrypted, got {provenance!r}")
    _check_shape(generator, dataset.image_shape)
    out = torch.empty_like(dataset.images)
    for idx in batches(len(dataset), batch_size):
        out[idx] = encrypt_image(generator, dataset.images[idx], budget)[0]
    if quantized:
        out = quantize(out)
    return dataset.derive(out, provenance, f"{dataset.name}-{provenance}")


def export_encrypted(dataset: Dataset, out_dir, manifest: dict) -> Path:
    """Write the image tree plus a ``manifest.json`` sidecar."""
    out_dir = Path(out_dir)
    save_dataset(dataset, out_dir / "images")
    manifest = dict(manifest, provenance=dataset.provenance, items=len(dataset), class_count=dataset.class_count)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
