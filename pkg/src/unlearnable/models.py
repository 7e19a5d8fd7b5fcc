"""Architectures, classifier training, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"UNLEARNABLE-CKPT\n"

CLASSIFIER_ARCHS = ("resnet18", "resnet50", "vgg11", "densenet121", "smallcnn", "linear")
ARCH_IDS = ("generator4x4", "discriminator4", "dncnn_denoiser") + CLASSIFIER_ARCHS


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int | None = None, history: dict | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.history = history or {}


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_shape: tuple[int, int, int]
    class_count: int = 0
    capacity_scale: float = 1.0
    # per-channel normalization folded into classifiers; images stay in [0, 1] outside
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.25,)
    width: int | None = None
    depth: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if self.arch_id not in ARCH_IDS:
            raise ModelError(f"unknown arch_id {self.arch_id!r}; expected one of {', '.join(ARCH_IDS)}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelError(f"input_shape must be three positive ints, got {self.input_shape}")
        if self.capacity_scale <= 0:
            raise ModelError("capacity_scale must be positive")
        if self.arch_id in CLASSIFIER_ARCHS and self.class_count < 2:
            raise ModelError(f"{self.arch_id} needs class_count >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


@dataclass(frozen=True)
class TrainSpec:
    """Hyperparameters of one SGD training run."""

    lr: float = 0.025
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    epochs: int = 90
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ModelError("lr must be non-negative")
        if self.epochs < 0:
            raise ModelError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ModelError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.optimizer != "sgd":
            raise ModelError(f"unsupported optimizer {self.optimizer!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def make_optimizer(self, params) -> torch.optim.Optimizer:
        return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)

    def make_scheduler(self, opt, steps: int):
        # "cosine" anneals once over the whole run, no restarts
        if self.lr_schedule == "cosine" and steps > 0:
            return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
        return None


@dataclass
class ModelHandle:
    spec: ArchSpec
    module: nn.Module
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.module(x)

    def parameters(self):
        return self.module.parameters()

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def digest(self) -> str:
        return state_digest(self.module.state_dict())

    def clone(self) -> "ModelHandle":
        return ModelHandle(self.spec, copy.deepcopy(self.module), copy.deepcopy(self.meta))


def state_digest(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        t = state[k].detach().cpu().contiguous()
        h.update(k.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _w(base: int, spec: ArchSpec) -> int:
    return max(1, int(round(base * spec.capacity_scale)))


def _kaiming_init(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=slope, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Normalize(nn.Module):
    def __init__(self, mean, std, channels: int):
        super().__init__()
        mean = list(mean) * channels if len(mean) == 1 else list(mean)
        std = list(std) * channels if len(std) == 1 else list(std)
        if len(mean) != channels or len(std) != channels:
            raise ModelError(f"normalization needs {channels} channel statistics")
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class Classifier(nn.Module):
    """Normalization layer + backbone features + a final linear head."""

    def __init__(self, norm: nn.Module, features: nn.Module, head: nn.Linear):
        super().__init__()
        self.norm = norm
        self.features = features
        self.head = head

    def forward(self, x):
        return self.head(torch.flatten(self.features(self.norm(x)), 1))

    def embed(self, x):
        return torch.flatten(self.features(self.norm(x)), 1)


class Generator(nn.Module):
    """Four convolutions down, four transposed convolutions up, tanh output."""

    def __init__(self, channels: int, width: int):
        super().__init__()
        w = width

        def block(layer, out):
            return [layer, nn.BatchNorm2d(out), nn.LeakyReLU(0.2)]

        self.encoder = nn.Sequential(
            *block(nn.Conv2d(channels, w, 3, 1, 1), w),
            *block(nn.Conv2d(w, 2 * w, 4, 2, 1), 2 * w),
            *block(nn.Conv2d(2 * w, 4 * w, 4, 2, 1), 4 * w),
            *block(nn.Conv2d(4 * w, 4 * w, 3, 1, 1), 4 * w),
        )
        self.decoder = nn.Sequential(
            *block(nn.ConvTranspose2d(4 * w, 4 * w, 3, 1, 1), 4 * w),
            *block(nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1), 2 * w),
            *block(nn.ConvTranspose2d(2 * w, w, 4, 2, 1), w),
            nn.ConvTranspose2d(w, channels, 3, 1, 1),
        )
        _kaiming_init(self, 0.2)

    def forward(self, x):
        # center [0, 1] pixels before the first convolution
        return torch.tanh(self.decoder(self.encoder(2.0 * x - 1.0)))


class Discriminator(nn.Module):
    """Four strided convolutions and a sigmoid binary head."""

    # keeps outputs strictly inside (0, 1) in float32
    EPS = 1e-7

    def __init__(self, shape, width: int):
        super().__init__()
        c, h, w_ = shape
        w = width
        layers, ch = [], c
        for i, out in enumerate((w, 2 * w, 4 * w, 8 * w)):
            stride = 2 if min(h, w_) >= 2 else 1
            layers += [nn.Conv2d(ch, out, 3, stride, 1), nn.LeakyReLU(0.2)]
            h, w_ = (h + 2 - 3) // stride + 1, (w_ + 2 - 3) // stride + 1
            ch = out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch * h * w_, 1)
        _kaiming_init(self, 0.2)

    def logits(self, x):
        return self.head(torch.flatten(self.features(2.0 * x - 1.0), 1)).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).clamp(self.EPS, 1.0 - self.EPS)


class DnCNN(nn.Module):
    """Residual denoiser: predicts the noise and subtracts it from the input."""

    def __init__(self, channels: int, width: int, depth: int):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 3, 1, 1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU()]
        layers.append(nn.Conv2d(width, channels, 3, 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, y):
        return y - self.body(y)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * 4, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * 4)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != planes * 4:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, planes * 4, 1, stride, bias=False), nn.BatchNorm2d(planes * 4))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


def _resnet_features(block, num_blocks, spec: ArchSpec):
    # small-image stem (3x3, stride 1, no max-pool), as is usual for 32px data
    c = spec.input_shape[0]
    base = _w(64, spec)
    layers = [nn.Conv2d(c, base, 3, 1, 1, bias=False), nn.BatchNorm2d(base), nn.ReLU()]
    cin = base
    for i, n in enumerate(num_blocks):
        planes = _w(64 * 2**i, spec)
        for j in range(n):
            stride = 2 if (j == 0 and i > 0) else 1
            layers.append(block(cin, planes, stride))
            cin = planes * block.expansion
    layers.append(nn.AdaptiveAvgPool2d(1))
    return nn.Sequential(*layers), cin


def _vgg11_features(spec: ArchSpec):
    cfg = [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"]
    c, h, w = spec.input_shape
    layers, cin = [], c
    for v in cfg:
        if v == "M":
            if min(h, w) >= 2:
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
        else:
            out = _w(v, spec)
            layers += [nn.Conv2d(cin, out, 3, 1, 1), nn.BatchNorm2d(out), nn.ReLU()]
            cin = out
    layers.append(nn.AdaptiveAvgPool2d(1))
    return nn.Sequential(*layers), cin


def _densenet121_features(spec: ArchSpec):
    net = torchvision.models.DenseNet(
        growth_rate=_w(32, spec), block_config=(6, 12, 24, 16), num_init_features=_w(64, spec), num_classes=1,
    )
    c, h, w = spec.input_shape
    if min(h, w) <= 64:
        net.features.conv0 = nn.Conv2d(c, _w(64, spec), 3, 1, 1, bias=False)
        net.features.pool0 = nn.Identity()
    elif c != 3:
        net.features.conv0 = nn.Conv2d(c, _w(64, spec), 7, 2, 3, bias=False)
    feats = nn.Sequential(net.features, nn.ReLU(), nn.AdaptiveAvgPool2d(1))
    return feats, net.classifier.in_features


def _smallcnn_features(spec: ArchSpec):
    c, h, w = spec.input_shape
    w1 = spec.width or _w(16, spec)
    feats = nn.Sequential(
        nn.Conv2d(c, w1, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2) if min(h, w) >= 2 else nn.Identity(),
        nn.Conv2d(w1, 2 * w1, 3, 1, 1), nn.ReLU(), nn.AdaptiveAvgPool2d(1),
    )
    return feats, 2 * w1


def _build_module(spec: ArchSpec) -> nn.Module:
    c, h, w = spec.input_shape
    a = spec.arch_id
    if a == "generator4x4":
        if h % 4 or w % 4:
            raise ModelError(f"generator4x4 needs height and width divisible by 4, got {h}x{w}")
        return Generator(c, spec.width or _w(32, spec))
    if a == "discriminator4":
        return Discriminator(spec.input_shape, spec.width or _w(16, spec))
    if a == "dncnn_denoiser":
        return DnCNN(c, spec.width or _w(64, spec), spec.depth or 17)
    if a == "linear":
        return Classifier(Normalize(spec.mean, spec.std, c), nn.Identity(), nn.Linear(c * h * w, spec.class_count))
    if a == "smallcnn":
        feats, dim = _smallcnn_features(spec)
    elif a == "resnet18":
        feats, dim = _resnet_features(BasicBlock, (2, 2, 2, 2), spec)
    elif a == "resnet50":
        feats, dim = _resnet_features(Bottleneck, (3, 4, 6, 3), spec)
    elif a == "vgg11":
        feats, dim = _vgg11_features(spec)
    else:
        feats, dim = _densenet121_features(spec)
    return Classifier(Normalize(spec.mean, spec.std, c), feats, nn.Linear(dim, spec.class_count))


def build_model(spec: ArchSpec, seed: int = 0) -> ModelHandle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = _build_module(spec)
    return ModelHandle(spec, module, {"epoch": 0, "seed": seed, "trainspec": None, "format_version": FORMAT_VERSION})


def final_layer(model: ModelHandle | nn.Module) -> nn.Linear:
    """The last affine map of a classifier (the one producing logits)."""
    module = model.module if isinstance(model, ModelHandle) else model
    if isinstance(module, Classifier):
        return module.head
    linears = [m for m in module.modules() if isinstance(m, nn.Linear)]
    if not linears:
        raise ModelError("model has no linear layer")
    return linears[-1]


def batches(n: int, batch_size: int, generator: torch.Generator | None = None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@torch.no_grad()
def predict_logits(model: ModelHandle | nn.Module, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    module = model.module if isinstance(model, ModelHandle) else model
    was_training = module.training
    module.eval()
    out = [module(images[idx]) for idx in batches(len(images), batch_size)]
    module.train(was_training)
    if not out:
        return torch.zeros(0)
    return torch.cat(out)


def accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    pred = predict_logits(model, dataset.images).argmax(1)
    return float((pred == dataset.labels).float().mean())


def fit_classifier(
    model: ModelHandle,
    dataset,
    train: TrainSpec,
    augment: Callable | None = None,
    test_set=None,
    on_epoch: Callable | None = None,
) -> dict[str, list[float]]:
    """Minibatch SGD with cross-entropy; returns per-epoch accuracy curves.

    ``augment(images, labels, generator)`` returns (images, targets) where targets
    may be class indices or soft label rows.
    """
    if dataset.class_count != model.spec.class_count:
        raise ModelError(f"dataset has {dataset.class_count} classes, model expects {model.spec.class_count}")
    if tuple(dataset.image_shape) != model.spec.input_shape:
        raise ModelError(f"dataset images are {dataset.image_shape}, model expects {model.spec.input_shape}")
    history: dict[str, list[float]] = {"train_acc": [], "test_acc": [], "loss": []}
    if train.epochs == 0 or len(dataset) == 0:
        return history
    module = model.module
    g = torch.Generator().manual_seed(train.seed)
    opt = train.make_optimizer(module.parameters())
    steps_per_epoch = math.ceil(len(dataset) / train.batch_size)
    sched = train.make_scheduler(opt, train.epochs * steps_per_epoch)
    for epoch in range(train.epochs):
        module.train()
        correct, seen, total_loss = 0.0, 0, 0.0
        for b, idx in enumerate(batches(len(dataset), train.batch_size, g)):
            x, y = dataset.images[idx], dataset.labels[idx]
            targets = y
            if augment is not None:
                x, targets = augment(x, y, g)
            logits = module(x)
            loss = F.cross_entropy(logits, targets)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}", epoch, b, history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            hard = targets if targets.ndim == 1 else targets.argmax(1)
            correct += float((logits.argmax(1) == hard).sum())
            seen += len(idx)
            total_loss += loss.item() * len(idx)
        history["train_acc"].append(correct / seen)
        history["loss"].append(total_loss / seen)
        if test_set is not None:
            history["test_acc"].append(accuracy(model, test_set))
        model.meta["epoch"] = model.meta.get("epoch", 0) + 1
        if on_epoch is not None:
            on_epoch(epoch, history)
    model.meta["trainspec"] = train.digest()
    return history


def pretrain_classifier(dataset, spec: ArchSpec, train: TrainSpec, augment: Callable | None = None) -> ModelHandle:
    """Train a classifier from scratch with cross-entropy on natural data."""
    if dataset.class_count != spec.class_count:
        raise ModelError(f"dataset has {dataset.class_count} classes, spec expects {spec.class_count}")
    model = build_model(spec, train.seed)
    history = fit_classifier(model, dataset, train, augment)
    model.meta["train_acc"] = history["train_acc"]
    model.module.eval()
    return model


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelHandle, path) -> str:
    """Write header line (JSON) + torch-serialized parameter blob. Returns the parameter digest."""
    state = {k: v.detach().cpu().contiguous() for k, v in model.module.state_dict().items()}
    buf = io.BytesIO()
    torch.save(state, buf)
    blob = buf.getvalue()
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.spec.to_dict(),
        "meta": _jsonable(model.meta),
        "param_digest": state_digest(state),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)
    return header["param_digest"]


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.readline() != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        try:
            return json.loads(f.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupted header") from exc


def load_checkpoint(path, expect_input_shape=None, expect_arch: str | None = None) -> ModelHandle:
    with open(path, "rb") as f:
        if f.readline() != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupted header") from exc
        blob = f.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: parameter blob is corrupted")
    spec = ArchSpec.from_dict(header["arch"])
    if expect_input_shape is not None and tuple(expect_input_shape) != spec.input_shape:
        raise CheckpointError(f"{path}: checkpoint input shape {spec.input_shape} != expected {tuple(expect_input_shape)}")
    if expect_arch is not None and spec.arch_id != expect_arch:
        raise CheckpointError(f"{path}: checkpoint holds {spec.arch_id}, expected {expect_arch}")
    state = torch.load(io.BytesIO(blob), weights_only=True)
    model = build_model(spec, header["meta"].get("seed", 0))
    try:
        model.module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match {spec.arch_id} {spec.input_shape}: {exc}") from exc
    if state_digest(model.module.state_dict()) != header["param_digest"]:
        raise CheckpointError(f"{path}: parameter digest mismatch")
    model.meta = header["meta"]
    model.module.eval()
    return model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    return obj


# -- gradient checks ---------------------------------------------------------

LOSS_NAMES = ("discriminator_loss", "confounder_loss", "hinge_loss", "cross_entropy")


def gradcheck(
    model: ModelHandle,
    loss_name: str,
    input,
    tolerance: float | None = None,
    *,
    labels: torch.Tensor | None = None,
    classifier: ModelHandle | None = None,
    epsilon: float = 8 / 255,
    c: float = 1.0,
    n_params: int = 20,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences over sampled parameters.

    The named loss is differentiated with respect to ``model``'s parameters:

    * ``cross_entropy``: model is a classifier, ``input`` images, ``labels`` required.
    * ``discriminator_loss``: model is a discriminator, ``input`` is ``(x, x_enc)``.
    * ``confounder_loss``: model is a generator, ``classifier`` the fixed classifier.
    * ``hinge_loss``: model is a generator, bound ``c``.

    Everything runs in float64 on a copy. Raises if ``tolerance`` is given and exceeded.
    """
    from . import gan

    if loss_name not in LOSS_NAMES:
        raise ModelError(f"unknown loss {loss_name!r}")
    m = copy.deepcopy(model.module).double().eval()
    f = copy.deepcopy(classifier.module).double().eval() if classifier is not None else None

    if loss_name == "cross_entropy":
        x = input.double()
        fn = lambda: F.cross_entropy(m(x), labels)
    elif loss_name == "discriminator_loss":
        x, x_enc = (t.double() for t in input)
        fn = lambda: gan.discriminator_loss(m, x, x_enc)
    elif loss_name == "confounder_loss":
        if f is None:
            raise ModelError("confounder_loss gradcheck needs the fixed classifier")
        x = input.double()
        fn = lambda: gan.confounder_loss(f, epsilon * m(x), labels)
    else:
        x = input.double()
        fn = lambda: gan.hinge_loss(epsilon * m(x), c)

    params = [p for p in m.parameters() if p.requires_grad]
    m.zero_grad()
    loss = fn()
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]
    if not all(torch.isfinite(g).all() for g in grads):
        raise ModelError(f"non-finite analytic gradient for {loss_name}")

    sizes = torch.tensor([p.numel() for p in params])
    g = torch.Generator().manual_seed(seed)
    total = int(sizes.sum())
    picks = torch.randperm(total, generator=g)[: min(n_params, total)]
    offsets = torch.cumsum(sizes, 0) - sizes
    worst = 0.0
    with torch.no_grad():
        for flat in picks.tolist():
            pi = int(torch.searchsorted(offsets, torch.tensor(flat), right=True)) - 1
            j = flat - int(offsets[pi])
            p = params[pi].view(-1)
            orig = float(p[j])
            p[j] = orig + step
            up = float(fn())
            p[j] = orig - step
            down = float(fn())
            p[j] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grads[pi].view(-1)[j])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    if tolerance is not None and worst > tolerance:
        raise ModelError(f"{loss_name} gradient check failed: max relative error {worst:.3g} > {tolerance}")
    return worst
