"""Victim training on composed datasets, transfer sweeps and the adaptive denoiser attack."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augmenter
from .data import Dataset, DataError, concat, split_in_out
from .encrypt import PerturbationBudget, encrypt_dataset
from .models import ArchSpec, ModelHandle, TrainSpec, accuracy, batches, build_model, fit_classifier


@dataclass(frozen=True)
class MixtureSpec:
    """Parts as (dataset, fraction of that dataset's items to draw)."""

    parts: tuple[tuple[Dataset, float], ...]
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(tuple(p) for p in self.parts))
        for _, frac in self.parts:
            if frac < 0:
                raise DataError("mixture fractions must be non-negative")


def compose_training_set(spec: MixtureSpec, seed: int) -> Dataset:
    """Draw each part's fraction (stratified by class), concatenate and shuffle."""
    if not spec.parts:
        raise DataError("mixture has no parts")
    drawn = []
    for i, (ds, frac) in enumerate(spec.parts):
        if frac > 1:
            raise DataError(f"part {i}: fraction {frac} exceeds the available items")
        take = ds if frac == 1 else split_in_out(ds, frac, seed + i)[0]
        drawn.append(take)
    mixed = concat(drawn, name=spec.description or "mixture")
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(mixed), generator=g)
    provenance = drawn[0].provenance if len({d.provenance for d in drawn}) == 1 else "mixture"
    return Dataset(mixed.images[order], mixed.labels[order], mixed.class_count, mixed.name, provenance,
                   mixed.class_names)


@dataclass
class RunRecord:
    run_id: str
    method: str
    mixture: str
    backbone: str
    augmentation: str
    train_acc: list[float]
    test_acc: list[float]
    final_test_acc: float
    seed: int
    wall_time: float
    extra: dict = field(default_factory=dict)

    @property
    def max_test_acc(self) -> float:
        return max(self.test_acc) if self.test_acc else self.final_test_acc

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def train_victim(
    dataset: Dataset,
    test_set: Dataset,
    arch: ArchSpec,
    train: TrainSpec,
    augmentation: str = "none",
    method: str = "",
    run_id: str | None = None,
    augment_cfg: AugmentConfig = AugmentConfig(),
) -> RunRecord:
    """Train a fresh classifier and score it after every epoch on the natural test set."""
    if test_set.provenance != "natural":
        raise DataError(f"victims are scored on natural test data, got provenance {test_set.provenance!r}")
    start = time.perf_counter()
    model = build_model(arch, train.seed)
    history = fit_classifier(model, dataset, train, augmenter(augmentation, dataset.class_count, augment_cfg), test_set)
    final = history["test_acc"][-1] if history["test_acc"] else accuracy(model, test_set)
    return RunRecord(
        run_id=run_id or f"{method or dataset.provenance}-{arch.arch_id}-{augmentation}-s{train.seed}",
        method=method or dataset.provenance,
        mixture=dataset.name,
        backbone=arch.arch_id,
        augmentation=augmentation,
        train_acc=history["train_acc"],
        test_acc=history["test_acc"],
        final_test_acc=final,
        seed=train.seed,
        wall_time=time.perf_counter() - start,
    )


def transferability_sweep(
    encrypted: Dataset,
    test_set: Dataset,
    backbones: Sequence[ArchSpec],
    train: TrainSpec,
    augmentation: str = "none",
    method: str = "",
) -> list[RunRecord]:
    return [train_victim(encrypted, test_set, arch, train, augmentation, method) for arch in backbones]


@dataclass(frozen=True)
class DenoiserSpec:
    width: int = 32
    depth: int = 5
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


def train_denoiser(noisy: torch.Tensor, clean: torch.Tensor, spec: DenoiserSpec) -> ModelHandle:
    """Residual denoiser fit by L2 regression from noisy to clean images."""
    arch = ArchSpec("dncnn_denoiser", tuple(clean.shape[1:]), width=spec.width, depth=spec.depth)
    model = build_model(arch, spec.seed)
    opt = torch.optim.Adam(model.module.parameters(), lr=spec.lr)
    g = torch.Generator().manual_seed(spec.seed)
    model.module.train()
    for _ in range(spec.epochs):
        for idx in batches(len(clean), spec.batch_size, g):
            loss = F.mse_loss(model.module(noisy[idx]), clean[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.module.eval()
    model.meta["epoch"] = spec.epochs
    return model


@torch.no_grad()
def denoise(denoiser: ModelHandle, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    denoiser.module.eval()
    out = torch.empty_like(images)
    for idx in batches(len(images), batch_size):
        out[idx] = denoiser.module(images[idx]).clamp(0.0, 1.0)
    return out


def adaptive_denoiser_attack(
    generator: ModelHandle,
    surrogate_natural: Dataset,
    target_encrypted: Dataset,
    test_set: Dataset,
    victim: ArchSpec,
    train: TrainSpec,
    budget: PerturbationBudget | None = None,
    denoiser_spec: DenoiserSpec = DenoiserSpec(),
) -> tuple[RunRecord, ModelHandle]:
    """Trainer-side countermeasure with access to the generator.

    Encrypt a surrogate natural pool, learn encrypted -> natural, clean the
    target encrypted set with it and train the victim on the result.
    """
    budget = budget or PerturbationBudget(generator.meta.get("epsilon", 8 / 255))
    pairs = encrypt_dataset(generator, surrogate_natural, budget, "out_encrypted")
    denoiser = train_denoiser(pairs.images, surrogate_natural.images, denoiser_spec)
    cleaned = target_encrypted.derive(denoise(denoiser, target_encrypted.images), "denoised",
                                      f"{target_encrypted.name}-denoised")
    record = train_victim(cleaned, test_set, victim, train, method="denoised")
    return record, denoiser


# -- results files and reports -------------------------------------------------

def append_records(path, records: Sequence[RunRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [RunRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def _pivot(records: Sequence[RunRecord], row_key: str, col_key: str):
    rows, cols, cells = [], [], {}
    for r in records:
        rk, ck = getattr(r, row_key), getattr(r, col_key)
        if rk not in rows:
            rows.append(rk)
        if ck not in cols:
            cols.append(ck)
        cells.setdefault((rk, ck), []).append(r.final_test_acc)
    return rows, cols, {k: sum(v) / len(v) for k, v in cells.items()}


def render_markdown(records: Sequence[RunRecord], row_key: str = "backbone", col_key: str = "method") -> str:
    """Mean final test accuracy (%) with one row per ``row_key`` and one column per ``col_key``."""
    rows, cols, cells = _pivot(records, row_key, col_key)
    out = io.StringIO()
    out.write("| " + " | ".join([row_key] + cols) + " |\n")
    out.write("|" + "---|" * (len(cols) + 1) + "\n")
    for rk in rows:
        vals = [f"{100 * cells[(rk, c)]:.1f}" if (rk, c) in cells else "" for c in cols]
        out.write("| " + " | ".join([str(rk)] + vals) + " |\n")
    return out.getvalue()


def render_csv(records: Sequence[RunRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["run_id", "method", "mixture", "backbone", "augmentation", "seed", "final_test_acc", "max_test_acc"])
    for r in records:
        w.writerow([r.run_id, r.method, r.mixture, r.backbone, r.augmentation, r.seed,
                    f"{r.final_test_acc:.4f}", f"{r.max_test_acc:.4f}"])
    return out.getvalue()


def plot_curves(records: Sequence[RunRecord], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for r in records:
        label = f"{r.method} / {r.backbone} / {r.augmentation}"
        axes[0].plot(range(1, len(r.train_acc) + 1), [100 * a for a in r.train_acc], label=label)
        axes[1].plot(range(1, len(r.test_acc) + 1), [100 * a for a in r.test_acc], label=label)
    for ax, title in zip(axes, ("training accuracy (%)", "test accuracy (%)")):
        ax.set_xlabel("epoch")
        ax.set_title(title)
    if records:
        axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def median(values: Sequence[float]) -> float:
    v = sorted(values)
    if not v:
        return math.nan
    mid = len(v) // 2
    return v[mid] if len(v) % 2 else 0.5 * (v[mid - 1] + v[mid])
