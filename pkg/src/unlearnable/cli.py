"""Command-line front end.

    unlearnable pretrain  --config cfg.yaml
    unlearnable train-gan --config cfg.yaml --classifier runs/.../classifier.ckpt
    unlearnable encrypt   --generator runs/.../generator.ckpt --data images/
    unlearnable eval      --data runs/.../encrypted --p 0.5
    unlearnable report

Artifacts go to ``<out>/<run_id>/`` with a ``manifest.json``; victim runs are
appended to ``<out>/results.jsonl``. Exit codes: 0 ok, 2 bad config or
input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import AUGMENTATIONS, AugmentationError
from .config import ConfigError, ExperimentConfig, desk_config, from_dict, load_config
from .data import (Dataset, DataError, PatchTable, apply_class_noise, apply_class_patch, load_dataset,
                   make_synthetic, save_dataset, split_in_out)
from .diagnostics import DiagnosticsError, diagnostic_report, triptych_grid
from .emn import emn_generate
from .encrypt import BudgetError, encrypt_dataset, encrypt_image, export_encrypted
from .evaluation import (MixtureSpec, adaptive_denoiser_attack, append_records, compose_training_set,
                         plot_curves, read_records, render_csv, render_markdown, train_victim)
from .gan import train_confoundergan
from .models import (CLASSIFIER_ARCHS, CheckpointError, ModelError, ModelHandle, build_model, fit_classifier,
                     load_checkpoint, pretrain_classifier, save_checkpoint)

log = logging.getLogger("unlearnable")

OUT_ENV = "UNLEARNABLE_OUT"
INPUT_ERRORS = (ConfigError, CheckpointError, ModelError, BudgetError, DataError, AugmentationError, DiagnosticsError)


class RunContext:
    def __init__(self, command: str, cfg: ExperimentConfig, args):
        self.command = command
        self.cfg = cfg
        self.args = args
        root = args.out or os.environ.get(OUT_ENV) or cfg.outputs.root or "runs"
        self.root = Path(root)
        self.run_id = f"{command}-{cfg.name}-s{cfg.seed}"
        self.dir = self.root / self.run_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.checkpoints: dict[str, str] = {}
        self.start = time.time()

    def manifest(self, **extra) -> Path:
        m = {
            "run_id": self.run_id,
            "command": self.command,
            "argv": sys.argv[1:],
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "checkpoints": self.checkpoints,
            "versions": {"unlearnable": __version__, "python": platform.python_version(), "torch": torch.__version__,
                         "numpy": np.__version__},
            "wall_time": round(time.time() - self.start, 3),
            **extra,
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(m, indent=2, sort_keys=True))
        return path

    def save(self, model, name: str) -> Path:
        path = self.dir / f"{name}.ckpt"
        self.checkpoints[name] = save_checkpoint(model, path)
        return path


# -- data ----------------------------------------------------------------------------

def natural_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        kw = dict(image_size=cfg.image_shape, separation=d.separation, prototype_seed=d.seed,
                  amplitude=d.amplitude, noise_std=d.noise_std, cast=d.cast)
        train = make_synthetic(d.class_count, d.per_class, seed=d.seed, name="synthetic-train", **kw)
        test = make_synthetic(d.class_count, d.test_per_class, seed=d.seed + 1000, name="synthetic-test", **kw)
        return train, test
    if d.test_root is None:
        raise ConfigError("data.test_root", "required when data.source is an image folder")
    size = tuple(d.image_size)
    return load_dataset(d.source, size), load_dataset(d.test_root, size)


def load_images(path, cfg: ExperimentConfig, provenance: str) -> Dataset:
    path = Path(path)
    root = path / "images" if (path / "images").is_dir() else path
    ds = load_dataset(root, tuple(cfg.data.image_size))
    return ds.derive(ds.images, provenance, path.name)


def _shape_check(ds: Dataset, cfg: ExperimentConfig, what: str):
    if ds.image_shape != cfg.image_shape:
        raise DataError(f"{what} has image shape {ds.image_shape}, config expects {cfg.image_shape}")


def _classifier(ctx: RunContext, path) -> ModelHandle:
    model = load_checkpoint(path, expect_input_shape=ctx.cfg.image_shape)
    ctx.inputs[f"checkpoint:{Path(path).name}"] = model.digest()
    return model


def _generator(ctx: RunContext):
    if not ctx.args.generator:
        raise ConfigError("--generator", "a generator checkpoint is required")
    gen = load_checkpoint(ctx.args.generator, expect_input_shape=ctx.cfg.image_shape, expect_arch="generator4x4")
    ctx.inputs["generator"] = gen.digest()
    return gen


# -- subcommands -----------------------------------------------------------------

def cmd_pretrain(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    train, _ = natural_data(cfg)
    d_in, _ = split_in_out(train, cfg.data.p, cfg.data.seed)
    ctx.inputs["train"] = d_in.digest()
    model = pretrain_classifier(d_in, cfg.classifier_spec(), cfg.pretrain.to_spec(cfg.seed))
    path = ctx.save(model, "classifier")
    return {"checkpoint": str(path), "train_acc": model.meta.get("train_acc")}


def cmd_train_gan(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if not ctx.args.classifier:
        raise ConfigError("--classifier", "a pretrained classifier checkpoint is required")
    classifier = _classifier(ctx, ctx.args.classifier)
    train, _ = natural_data(cfg)
    d_in, _ = split_in_out(train, cfg.data.p, cfg.data.seed)
    ctx.inputs["train"] = d_in.digest()
    spec = cfg.gan_spec()
    result = train_confoundergan(d_in, classifier, spec)
    result.generator.meta["epsilon"] = spec.epsilon
    result.write_curves(ctx.dir / "curves.jsonl")
    return {"generator": str(ctx.save(result.generator, "generator")),
            "discriminator": str(ctx.save(result.discriminator, "discriminator"))}


def cmd_encrypt(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    gen = _generator(ctx)
    if ctx.args.data:
        source = load_images(ctx.args.data, cfg, "natural")
        provenance = "out_encrypted"
    else:
        train, _ = natural_data(cfg)
        source, _ = split_in_out(train, cfg.data.p, cfg.data.seed)
        provenance = "in_encrypted"
    _shape_check(source, cfg, "input data")
    ctx.inputs["data"] = source.digest()
    enc = encrypt_dataset(gen, source, cfg.budget_spec(), provenance, quantized=cfg.budget.quantize)
    export_encrypted(enc, ctx.dir / "encrypted", {"generator_digest": gen.digest(), "epsilon": cfg.epsilon,
                                                   "provenance": provenance, "source_digest": source.digest()})
    x_enc, noise = encrypt_image(gen, source.images[:8], cfg.budget_spec())
    triptych_grid(source.images[:8], noise, x_enc, ctx.dir / "triptych.png")
    return {"encrypted": str(ctx.dir / "encrypted"), "count": len(enc)}


def cmd_emn(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    train, _ = natural_data(cfg)
    d_in, _ = split_in_out(train, cfg.data.p, cfg.data.seed)
    ctx.inputs["train"] = d_in.digest()
    enc, _, info = emn_generate(d_in, cfg.classifier_spec(), cfg.emn_spec())
    save_dataset(enc, ctx.dir / "encrypted" / "images")
    return {"encrypted": str(ctx.dir / "encrypted"), "outer_rounds": info["outer_rounds"],
            "converged": info["converged"], "train_error": info["train_error"]}


def cmd_patch(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    train, _ = natural_data(cfg)
    if cfg.patch.colors_file:
        table = PatchTable.from_file(cfg.patch.colors_file, cfg.patch.patch_size)
    else:
        table = PatchTable.default(train.class_count, cfg.patch.patch_size)
    out = apply_class_patch(train, table)
    table.to_file(ctx.dir / "patch_colors.txt")
    save_dataset(out, ctx.dir / "encrypted" / "images")
    return {"encrypted": str(ctx.dir / "encrypted"), "count": len(out)}


def cmd_classnoise(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    train, _ = natural_data(cfg)
    out = apply_class_noise(train, cfg.epsilon, cfg.patch.class_noise_seed)
    save_dataset(out, ctx.dir / "encrypted" / "images")
    return {"encrypted": str(ctx.dir / "encrypted"), "count": len(out)}


def _victim_train(ctx: RunContext):
    cfg = ctx.cfg
    return cfg.victim.to_spec(cfg.seed)


def cmd_eval(ctx: RunContext) -> dict:
    """Victim runs on a fraction p of --data (encrypted) plus 1-p natural, one per backbone."""
    cfg, args = ctx.cfg, ctx.args
    natural_train, test = natural_data(cfg)
    augmentation = args.augmentation or cfg.victim.augmentation
    backbones = [args.backbone] if args.backbone else cfg.victim.backbones
    p = cfg.data.p if args.p is None else args.p
    if not 0 <= p <= 1:
        raise ConfigError("--p", "must lie in [0, 1]")
    if args.data:
        encrypted = load_images(args.data, cfg, "in_encrypted")
        _shape_check(encrypted, cfg, "--data")
        if encrypted.class_count != natural_train.class_count:
            raise DataError(f"--data has {encrypted.class_count} classes, config {natural_train.class_count}")
        ctx.inputs["data"] = encrypted.digest()
        parts = [(encrypted, p)] + ([(natural_train, 1 - p)] if p < 1 else [])
        method = f"{Path(args.data).name}@p={p:g}"
    else:
        parts, method = [(natural_train, 1.0)], "natural"
    mixture = compose_training_set(MixtureSpec(tuple((d, f) for d, f in parts if f > 0), method), cfg.seed)
    ctx.inputs["mixture"] = mixture.digest()
    train = _victim_train(ctx)
    for b in backbones:
        if b not in CLASSIFIER_ARCHS:
            raise ConfigError("--backbone", f"unknown backbone {b!r}")
    if args.denoise:
        gen, surrogate = _generator(ctx), make_surrogate(cfg)
    records = []
    for b in backbones:
        if args.denoise:
            rec, _ = adaptive_denoiser_attack(gen, surrogate, mixture, test, cfg.victim_spec(b), train,
                                              cfg.budget_spec(), cfg.denoiser_spec())
        else:
            rec = train_victim(mixture, test, cfg.victim_spec(b), train, augmentation, method,
                               augment_cfg=cfg.augment_config())
        rec.run_id = f"{ctx.run_id}-{b}-{augmentation}"
        records.append(rec)
    append_records(ctx.root / "results.jsonl", records)
    return {"records": [json.loads(r.to_json()) for r in records]}


def make_surrogate(cfg: ExperimentConfig) -> Dataset:
    """Natural pool disjoint from the training data, for the denoiser attack."""
    d = cfg.data
    if d.source != "synthetic":
        raise ConfigError("data.source", "the denoiser attack on folder data needs a surrogate pool; use --data")
    return make_synthetic(d.class_count, d.per_class, cfg.image_shape, d.separation, seed=d.seed + 2000,
                          prototype_seed=d.seed, name="surrogate", amplitude=d.amplitude, noise_std=d.noise_std,
                          cast=d.cast)


def cmd_diagnose(ctx: RunContext) -> dict:
    """Train a victim on encrypted data for --epoch epochs, then report CAR/GCR on natural data."""
    cfg, args = ctx.cfg, ctx.args
    if args.epoch is None or args.epoch < 0:
        raise ConfigError("--epoch", "a non-negative victim checkpoint epoch is required")
    gen = _generator(ctx)
    train, _ = natural_data(cfg)
    enc = encrypt_dataset(gen, train, cfg.budget_spec())
    spec = cfg.victim_spec(args.backbone)
    victim = build_model(spec, cfg.seed)
    train_spec = _victim_train(ctx)
    stop_at = args.epoch

    class _Stop(Exception):
        pass

    def on_epoch(epoch, _history):
        if epoch + 1 >= stop_at:
            raise _Stop

    if stop_at > 0:
        try:
            fit_classifier(victim, enc, train_spec, on_epoch=on_epoch)
        except _Stop:
            pass
    victim.meta["epoch"] = stop_at
    ctx.save(victim, "victim")
    report = diagnostic_report(victim, train, gen, cfg.budget_spec(), ctx.dir / "diagnostics.json")
    x_enc, noise = encrypt_image(gen, train.images[:8], cfg.budget_spec())
    triptych_grid(train.images[:8], noise, x_enc, ctx.dir / "triptych.png")
    return report


def cmd_report(ctx: RunContext) -> dict:
    records = read_records(ctx.root / "results.jsonl")
    md = render_markdown(records)
    (ctx.dir / "table.md").write_text(md)
    (ctx.dir / "table.csv").write_text(render_csv(records))
    plot_curves(records, ctx.dir / "curves.png")
    print(md, end="")
    return {"records": len(records)}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-gan": cmd_train_gan,
    "encrypt": cmd_encrypt,
    "emn": cmd_emn,
    "patch": cmd_patch,
    "classnoise": cmd_classnoise,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnable", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        p.add_argument("--config", help="YAML experiment config (default: built-in desk preset)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-gan":
            p.add_argument("--classifier", help="pretrained classifier checkpoint")
        if name in ("encrypt", "eval", "diagnose"):
            p.add_argument("--generator", help="generator checkpoint")
        if name in ("encrypt", "eval"):
            p.add_argument("--data", help="image folder (class subdirectories)")
        if name in ("eval", "diagnose"):
            p.add_argument("--backbone", help="victim architecture id")
        if name == "eval":
            p.add_argument("--p", type=float, help="fraction of --data in the victim's training mixture")
            p.add_argument("--augmentation", choices=AUGMENTATIONS)
            p.add_argument("--denoise", action="store_true", help="run the adaptive denoiser attack first")
        if name == "diagnose":
            p.add_argument("--epoch", type=int, help="victim checkpoint epoch to analyse")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else desk_config()
        if args.seed is not None:
            raw = cfg.to_dict()
            raw["seed"] = args.seed
            cfg = from_dict(raw)
        ctx = RunContext(args.command, cfg, args)
        torch.manual_seed(cfg.seed)
        result = COMMANDS[args.command](ctx)
        ctx.manifest(result=result)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line cause for any runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    log.info("wrote %s", ctx.dir)
    return 0


def main() -> None:
    sys.exit(run())
