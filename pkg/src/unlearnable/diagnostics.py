"""Gradient diagnostics (CAR, GCR) and noise visualization."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import Dataset, DataError
from .encrypt import PerturbationBudget, encrypt_image
from .models import ModelHandle, final_layer, predict_logits


class DiagnosticsError(ValueError):
    pass


def _check(natural: Dataset):
    if len(natural) == 0:
        raise DataError("diagnostics need at least one image")


def car(model: ModelHandle, natural: Dataset, generator: ModelHandle, budget: PerturbationBudget) -> float:
    """Fraction of images whose true-class softmax confidence strictly rises after encryption."""
    _check(natural)
    x_enc, _ = encrypt_image(generator, natural.images, budget)
    idx = torch.arange(len(natural))
    before = predict_logits(model, natural.images).softmax(1)[idx, natural.labels]
    after = predict_logits(model, x_enc).softmax(1)[idx, natural.labels]
    return float((after - before > 0).float().mean())


def _head_grad_norms(model: ModelHandle, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-image L2 norm of d CE / d W for the final layer's weight matrix."""
    module = model.module
    W = final_layer(model).weight
    was_training = module.training
    module.eval()
    norms = []
    for i in range(len(images)):
        loss = F.cross_entropy(module(images[i:i + 1]), labels[i:i + 1])
        (g,) = torch.autograd.grad(loss, W)
        norms.append(g.norm())
    module.train(was_training)
    return torch.stack(norms).detach()


def gcr(model: ModelHandle, natural: Dataset, generator: ModelHandle, budget: PerturbationBudget,
        return_details: bool = False):
    """Mean ratio of final-layer gradient norms, encrypted over natural.

    Items whose natural gradient norm is exactly zero are skipped and counted.
    """
    _check(natural)
    x_enc, _ = encrypt_image(generator, natural.images, budget)
    nat = _head_grad_norms(model, natural.images, natural.labels)
    enc = _head_grad_norms(model, x_enc, natural.labels)
    keep = nat > 0
    excluded = int((~keep).sum())
    if excluded == len(natural):
        raise DiagnosticsError("every item has a zero natural gradient; GCR is undefined")
    value = float((enc[keep] / nat[keep]).mean())
    if return_details:
        return {"gcr": value, "n": len(natural), "excluded": excluded}
    return value


def visualize_noise(noise: torch.Tensor) -> np.ndarray:
    """Affine map min -> 0 and max -> 255 as uint8; constant input maps to 128. (C,H,W) becomes (H,W,C)."""
    a = noise.detach().double().cpu()
    if not torch.isfinite(a).all():
        raise DiagnosticsError("noise contains non-finite values")
    lo, hi = a.min(), a.max()
    if hi == lo:
        out = torch.full_like(a, 128.0)
    else:
        out = torch.round((a - lo) / (hi - lo) * 255.0)
    out = out.to(torch.uint8).numpy()
    if out.ndim == 3:
        out = np.transpose(out, (1, 2, 0))
        if out.shape[2] == 1:
            out = out[:, :, 0]
    return out


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = (img.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def triptych_grid(images: torch.Tensor, noise: torch.Tensor, encrypted: torch.Tensor, path, gap: int = 2) -> Path:
    """Rows of original | noise | encrypted, written as one PNG."""
    n, c, h, w = images.shape
    rows = []
    for i in range(n):
        cells = [_to_uint8(images[i]), visualize_noise(noise[i]), _to_uint8(encrypted[i])]
        cells = [x if x.ndim == 3 else x[:, :, None] for x in cells]
        sep = np.full((h, gap, cells[0].shape[2]), 255, np.uint8)
        rows.append(np.concatenate([cells[0], sep, cells[1], sep, cells[2]], axis=1))
        rows.append(np.full((gap, rows[-1].shape[1], rows[-1].shape[2]), 255, np.uint8))
    grid = np.concatenate(rows[:-1], axis=0)
    if grid.shape[2] == 1:
        grid = grid[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


def diagnostic_report(model: ModelHandle, natural: Dataset, generator: ModelHandle, budget: PerturbationBudget,
                      path=None) -> dict:
    details = gcr(model, natural, generator, budget, return_details=True)
    report = {"car": car(model, natural, generator, budget), "gcr": details["gcr"], "n": details["n"],
              "excluded": details["excluded"], "checkpoint_digest": model.digest()}
    if path is not None:
        Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
