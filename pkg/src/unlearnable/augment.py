"""Online training-batch augmentations used by victim trainers.

Every policy maps ``(images, labels)`` to ``(images, targets)``. Targets are the
integer labels, except for mixup/cutmix which return soft label rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

AUGMENTATIONS = ("none", "rhf", "rc", "rhf_rc", "cutout", "mixup", "cutmix", "fa_fixed")


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    cutout_length: int = 16
    mix_concentration: float = 1.0
    # fa_fixed magnitudes: factors are drawn from [1 - m, 1 + m], rotation from [-deg, deg]
    contrast: float = 0.3
    brightness: float = 0.3
    sharpness: float = 0.5
    rotation_degrees: float = 15.0


def _uniform(g, lo, hi, n=None):
    shape = (n,) if n is not None else (1,)
    return lo + (hi - lo) * torch.rand(shape, generator=g)


def hflip(x, g):
    flip = torch.rand(len(x), generator=g) < 0.5
    out = x.clone()
    out[flip] = out[flip].flip(-1)
    return out


def random_crop(x, g, pad: int):
    if pad == 0:
        return x.clone()
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=g)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _box(h, w, length, g):
    cy = int(torch.randint(0, h, (1,), generator=g))
    cx = int(torch.randint(0, w, (1,), generator=g))
    y0, y1 = max(0, cy - length // 2), min(h, cy + length // 2)
    x0, x1 = max(0, cx - length // 2), min(w, cx + length // 2)
    return y0, y1, x0, x1


def cutout(x, g, length: int):
    out = x.clone()
    _, _, h, w = x.shape
    for i in range(len(x)):
        y0, y1, x0, x1 = _box(h, w, length, g)
        out[i, :, y0:y1, x0:x1] = 0.0
    return out


def _beta(g, concentration: float) -> float:
    # Beta(a, a) from two Gamma draws, sampled with the caller's generator
    a = torch.full((2,), float(concentration))
    gam = torch._standard_gamma(a, generator=g)
    return float(gam[0] / gam.sum())


def mixup(x, y, g, class_count: int, lam: float | None = None, concentration: float = 1.0):
    if lam is None:
        lam = _beta(g, concentration)
    perm = torch.randperm(len(x), generator=g)
    onehot = F.one_hot(y, class_count).float()
    return lam * x + (1 - lam) * x[perm], lam * onehot + (1 - lam) * onehot[perm]


def cutmix(x, y, g, class_count: int, lam: float | None = None, concentration: float = 1.0):
    if lam is None:
        lam = _beta(g, concentration)
    n, _, h, w = x.shape
    perm = torch.randperm(n, generator=g)
    cut = (1 - lam) ** 0.5
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy = int(torch.randint(0, h, (1,), generator=g))
    cx = int(torch.randint(0, w, (1,), generator=g))
    y0, y1 = max(0, cy - ch // 2), min(h, cy + (ch - ch // 2))
    x0, x1 = max(0, cx - cw // 2), min(w, cx + (cw - cw // 2))
    out = x.clone()
    out[:, :, y0:y1, x0:x1] = x[perm][:, :, y0:y1, x0:x1]
    # label weight follows the pasted area actually used
    kept = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    onehot = F.one_hot(y, class_count).float()
    return out, kept * onehot + (1 - kept) * onehot[perm]


def _sharpness(img, factor):
    if img.shape[0] not in (1, 3):
        return img
    return TF.adjust_sharpness(img, factor)


def fa_fixed(x, g, cfg: AugmentConfig):
    """Fixed policy: contrast, brightness, sharpness, rotation, then cutout."""
    n = len(x)
    c_f = _uniform(g, 1 - cfg.contrast, 1 + cfg.contrast, n)
    b_f = _uniform(g, 1 - cfg.brightness, 1 + cfg.brightness, n)
    s_f = _uniform(g, 1 - cfg.sharpness, 1 + cfg.sharpness, n)
    rot = _uniform(g, -cfg.rotation_degrees, cfg.rotation_degrees, n)
    out = []
    for i in range(n):
        img = x[i]
        if img.shape[0] in (1, 3):
            img = TF.adjust_contrast(img, float(c_f[i]))
        img = TF.adjust_brightness(img, float(b_f[i]))
        img = _sharpness(img, float(s_f[i]))
        img = TF.rotate(img, float(rot[i]))
        out.append(img)
    return cutout(torch.stack(out).clamp(0, 1), g, cfg.cutout_length)


def apply_augmentation(
    images: torch.Tensor,
    labels: torch.Tensor,
    name: str,
    seed: int | torch.Generator = 0,
    class_count: int | None = None,
    cfg: AugmentConfig = AugmentConfig(),
    lam: float | None = None,
):
    if name not in AUGMENTATIONS:
        raise AugmentationError(f"unknown augmentation {name!r}; expected one of {', '.join(AUGMENTATIONS)}")
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if name == "none":
        return images, labels
    if name == "rhf":
        return hflip(images, g), labels
    if name == "rc":
        return random_crop(images, g, cfg.pad), labels
    if name == "rhf_rc":
        return random_crop(hflip(images, g), g, cfg.pad), labels
    if name == "cutout":
        return cutout(images, g, cfg.cutout_length), labels
    if name == "fa_fixed":
        return fa_fixed(images, g, cfg), labels
    k = class_count if class_count is not None else int(labels.max()) + 1
    if name == "mixup":
        return mixup(images, labels, g, k, lam, cfg.mix_concentration)
    return cutmix(images, labels, g, k, lam, cfg.mix_concentration)


def augmenter(name: str, class_count: int, cfg: AugmentConfig = AugmentConfig()):
    """Bind a policy for use as ``fit_classifier(..., augment=...)``; None for 'none'."""
    if name not in AUGMENTATIONS:
        raise AugmentationError(f"unknown augmentation {name!r}")
    if name == "none":
        return None
    return lambda x, y, g: apply_augmentation(x, y, name, g, class_count, cfg)
