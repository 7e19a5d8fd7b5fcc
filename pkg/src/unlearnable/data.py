"""Labeled image datasets, synthetic data, splitting and class-wise baselines."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

PROVENANCES = ("natural", "in_encrypted", "out_encrypted", "patched", "class_noised", "emn", "denoised", "mixture")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# Class patch colors for the 25-class toy experiment, in class order.
DEFAULT_PATCH_COLORS = [
    (220, 0, 0), (230, 0, 0), (240, 0, 0), (250, 0, 0),
    (0, 220, 0), (0, 230, 0), (0, 240, 0), (0, 250, 0),
    (0, 0, 220), (0, 0, 230), (0, 0, 240), (0, 0, 250),
    (220, 220, 0), (230, 230, 0), (240, 240, 0), (250, 250, 0),
    (220, 0, 220), (230, 0, 230), (240, 0, 240), (250, 0, 250),
    (220, 0, 220), (230, 0, 230), (240, 0, 240), (250, 0, 250),
    (250, 250, 250),
]


class DataError(ValueError):
    """Raised for invalid dataset arguments or unreadable image trees."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: torch.Tensor
    label: int


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of images in [0, 1] with integer labels.

    ``images`` has shape (N, C, H, W) even when N is 0, so an empty dataset still
    knows its image shape.
    """

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    name: str = "dataset"
    provenance: str = "natural"
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels must be one integer per image")
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if len(self.images) and not torch.isfinite(self.images).all():
            raise DataError("images contain non-finite values")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return Dataset(
            self.images[idx].clone(), self.labels[idx].clone(), self.class_count,
            name or self.name, self.provenance, self.class_names,
        )

    def derive(self, images: torch.Tensor, provenance: str, name: str | None = None) -> "Dataset":
        """Same labels and class space, new pixels and provenance."""
        return Dataset(images, self.labels.clone(), self.class_count, name or self.name, provenance, self.class_names)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.contiguous().numpy().tobytes())
        h.update(self.labels.contiguous().numpy().tobytes())
        return h.hexdigest()

    def class_counts(self) -> list[int]:
        return torch.bincount(self.labels, minlength=self.class_count).tolist()


def concat(parts: Sequence[Dataset], name: str = "mixture", provenance: str = "mixture") -> Dataset:
    if not parts:
        raise DataError("nothing to concatenate")
    shape = parts[0].image_shape
    k = parts[0].class_count
    for p in parts[1:]:
        if p.image_shape != shape:
            raise DataError(f"image shape mismatch: {p.image_shape} vs {shape}")
        if p.class_count != k:
            raise DataError(f"class count mismatch: {p.class_count} vs {k}")
    return Dataset(
        torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]), k, name, provenance,
        parts[0].class_names,
    )


def _load_image(path: Path, image_size: tuple[int, int]) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size[1], image_size[0]):
                im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_dataset(root_path, image_size: tuple[int, int], name: str | None = None) -> Dataset:
    """Read ``root/<class_name>/<image>`` into a Dataset.

    Class indices follow the sorted class directory names; items are ordered
    lexicographically by path.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} has no class directories")
    files: list[tuple[Path, int]] = []
    for k, d in enumerate(class_dirs):
        found = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise DataError(f"class directory {d.name!r} contains no images")
        files.extend((p, k) for p in found)
    files.sort(key=lambda pk: str(pk[0]))
    images = torch.stack([_load_image(p, image_size) for p, _ in files])
    labels = torch.tensor([k for _, k in files], dtype=torch.long)
    return Dataset(images, labels, len(class_dirs), name or root.name, "natural", tuple(d.name for d in class_dirs))


def quantize(images: torch.Tensor) -> torch.Tensor:
    """Round to the nearest multiple of 1/255, as an 8-bit PNG round trip would."""
    return torch.round(images * 255.0) / 255.0


def save_dataset(dataset: Dataset, root_path) -> list[Path]:
    """Write a dataset as an image tree (8-bit PNG) mirroring the load_dataset layout."""
    root = Path(root_path)
    names = dataset.class_names or tuple(f"class_{k:03d}" for k in range(dataset.class_count))
    for n in names:
        (root / n).mkdir(parents=True, exist_ok=True)
    written = []
    width = max(5, len(str(len(dataset))))
    for i, item in enumerate(dataset):
        arr = torch.round(item.pixels * 255.0).clamp(0, 255).to(torch.uint8).permute(1, 2, 0).numpy()
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        path = root / names[item.label] / f"{i:0{width}d}.png"
        Image.fromarray(arr).save(path)
        written.append(path)
    return written


def make_synthetic(
    class_count: int,
    per_class: int,
    image_size: tuple[int, int, int] = (3, 16, 16),
    separation: float = 1.0,
    seed: int = 0,
    prototype_seed: int = 0,
    name: str = "synthetic",
    amplitude: float = 0.12,
    noise_std: float = 0.12,
    cast: float = 0.2,
) -> Dataset:
    """Colored-blob classification data.

    Each class owns a color and a preferred blob location (drawn from
    ``prototype_seed``, so datasets made with different ``seed`` share the same
    classes). Every image is a textured gray background with one soft blob of
    its class color at a jittered position; ``separation`` scales the blob
    contrast.
    """
    if class_count < 2:
        raise DataError("class_count must be at least 2")
    if per_class < 1:
        raise DataError("per_class must be at least 1")
    if separation <= 0:
        raise DataError("separation must be positive")
    c, h, w = image_size
    if min(c, h, w) < 1:
        raise DataError("image_size must be positive")

    proto = np.random.default_rng(prototype_seed)
    if c == 3:
        # evenly spaced hues in the plane orthogonal to gray, so color never encodes brightness
        u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
        v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
        angles = proto.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(class_count) / class_count
        colors = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
    else:
        colors = proto.uniform(-1.0, 1.0, size=(class_count, c))
        colors /= np.linalg.norm(colors, axis=1, keepdims=True) + 1e-12
    centers = proto.uniform(0.3, 0.7, size=(class_count, 2)) * np.array([h, w])

    rng = np.random.default_rng(seed)
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = 0.15 * min(h, w)
    jitter = rng.normal(0.0, 0.12 * min(h, w), size=(n, 2))
    cy = centers[labels, 0] + jitter[:, 0]
    cx = centers[labels, 1] + jitter[:, 1]
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * sigma**2))
    signal = amplitude * separation * colors[labels][:, :, None, None] * blob[:, None]
    background = 0.5 + rng.uniform(-cast, cast, size=(n, 1, 1, 1)) + rng.normal(0.0, noise_std, size=(n, c, h, w))
    images = np.clip(background + signal, 0.0, 1.0).astype(np.float32)
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels).long(), class_count, name, "natural")


def split_in_out(dataset: Dataset, p: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: floor(p * n_k) items of each class go to the first part."""
    if not 0.0 <= p <= 1.0:
        raise DataError(f"p must lie in [0, 1], got {p}")
    g = torch.Generator().manual_seed(seed)
    first, second = [], []
    for k in range(dataset.class_count):
        idx = torch.nonzero(dataset.labels == k).flatten()
        idx = idx[torch.randperm(len(idx), generator=g)]
        cut = int(np.floor(p * len(idx) + 1e-9))
        first.append(idx[:cut])
        second.append(idx[cut:])
    first_idx = torch.sort(torch.cat(first)).values
    second_idx = torch.sort(torch.cat(second)).values
    return dataset.subset(first_idx, f"{dataset.name}-in"), dataset.subset(second_idx, f"{dataset.name}-out")


@dataclass(frozen=True)
class PatchTable:
    """Per-class RGB patch colors (0..255), stamped in the lower-right corner."""

    entries: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    patch_size: int = 32
    corner: str = "lower-right"

    def __post_init__(self):
        if self.patch_size < 0:
            raise DataError("patch_size must be non-negative")
        for k, rgb in self.entries.items():
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise DataError(f"patch color for class {k} must be three values in [0, 255]")

    @classmethod
    def default(cls, class_count: int = 25, patch_size: int = 32) -> "PatchTable":
        if class_count > len(DEFAULT_PATCH_COLORS):
            raise DataError(f"built-in table covers {len(DEFAULT_PATCH_COLORS)} classes, asked for {class_count}")
        return cls({k: DEFAULT_PATCH_COLORS[k] for k in range(class_count)}, patch_size)

    @classmethod
    def from_file(cls, path, patch_size: int = 32) -> "PatchTable":
        """Parse lines of ``k r g b``; blank lines and ``#`` comments are ignored."""
        entries = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'k r g b'")
            k, r, g, b = (int(v) for v in parts)
            entries[k] = (r, g, b)
        return cls(entries, patch_size)

    def to_file(self, path) -> None:
        lines = [f"{k} {r} {g} {b}" for k, (r, g, b) in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n")


def apply_class_patch(dataset: Dataset, table: PatchTable) -> Dataset:
    c, h, w = dataset.image_shape
    s = table.patch_size
    if s > min(h, w):
        raise DataError(f"patch_size {s} exceeds image size {h}x{w}")
    missing = [k for k in range(dataset.class_count) if k not in table.entries]
    if missing:
        raise DataError(f"patch table has no entry for classes {missing}")
    images = dataset.images.clone()
    if s > 0 and len(dataset):
        colors = torch.tensor([table.entries[k] for k in range(dataset.class_count)], dtype=torch.float32) / 255.0
        if c == 1:
            colors = colors.mean(dim=1, keepdim=True)
        elif c != 3:
            raise DataError("class patches need 1 or 3 channels")
        images[:, :, h - s:, w - s:] = colors[dataset.labels][:, :, None, None]
    return dataset.derive(images, "patched", f"{dataset.name}-patched")


def class_noise_table(class_count: int, image_shape, epsilon: float, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    u = torch.rand((class_count, *image_shape), generator=g)
    return (2.0 * u - 1.0) * epsilon


def apply_class_noise(dataset: Dataset, budget, seed: int) -> Dataset:
    """Add one uniform [-eps, eps] noise tensor per class, then clamp to [0, 1]."""
    eps = float(getattr(budget, "epsilon", budget))
    if eps < 0:
        raise DataError("epsilon must be non-negative")
    if eps == 0:
        return dataset.derive(dataset.images.clone(), "class_noised", f"{dataset.name}-cwn")
    noise = class_noise_table(dataset.class_count, dataset.image_shape, eps, seed)
    images = (dataset.images + noise[dataset.labels]).clamp(0.0, 1.0)
    return dataset.derive(images, "class_noised", f"{dataset.name}-cwn")
