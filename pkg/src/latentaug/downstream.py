"""Classifier training on real / synthetic / mixed data, plus the
augmentation baselines (CutOut, MixUp, CutMix, adversarial-augmentation
rounds) and the scaling experiment driver.

Training follows a fixed gradient-step budget rather than epochs over the
(possibly much larger) synthetic pool, so runs on different data sources are
compared at equal optimization cost. Every run is deterministic per seed.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import checkpoints
from .data import ImageDataset
from .diffusion import _param_init_rng
from .utils import atomic_write_json, derive_seed, read_json

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Architecture


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = (
            nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                          nn.BatchNorm2d(out_ch))
            if stride != 1 or in_ch != out_ch
            else nn.Identity()
        )

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet8(nn.Module):
    """Three-stage residual classifier: 8 conv layers + a linear head.

    Width 32 gives ~0.3M parameters; width 16 is the quarter-size variant
    used where runtime is tight. Penultimate features have 4 * width dims.
    """

    def __init__(self, num_classes: int, width: int = 32, in_channels: int = 3,
                 arch_id: str = ""):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.arch_id = arch_id or f"resnet8-{width}"
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(),
        )
        self.stage1 = BasicBlock(width, width)
        self.stage2 = BasicBlock(width, 2 * width, stride=2)
        self.stage3 = BasicBlock(2 * width, 4 * width, stride=2)
        self.head = nn.Linear(4 * width, num_classes)

    def features(self, x: Tensor) -> Tensor:
        """Penultimate activations: global average pool over the last stage."""
        h = self.stage3(self.stage2(self.stage1(self.stem(x))))
        return h.mean(dim=(-2, -1))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


ARCHITECTURES = {"resnet8-16": 16, "resnet8-32": 32}


def build_classifier(arch_id: str, num_classes: int, in_channels: int = 3) -> ResNet8:
    if arch_id not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}")
    return ResNet8(num_classes, ARCHITECTURES[arch_id], in_channels, arch_id=arch_id)


def load_classifier(path: Path | str) -> ResNet8:
    state, header = checkpoints.load_classifier_module(path)
    model = build_classifier(header["arch"], header["num_classes"], header["in_channels"])
    model.load_state_dict(state)
    model.eval()
    return model


@torch.no_grad()
def penultimate_features(model: ResNet8, dataset: ImageDataset, batch: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(dataset), batch):
        out.append(model.features(dataset.images[start : start + batch]).numpy())
    return np.concatenate(out, axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# Batch streams and real/synthetic mixing


@dataclass(frozen=True)
class Batch:
    images: Tensor
    labels: Tensor
    n_real: int
    n_synthetic: int


class _Cycler:
    """Endless shuffled pass over one dataset; reshuffles on exhaustion."""

    def __init__(self, dataset: ImageDataset, generator: torch.Generator):
        self.dataset = dataset
        self.generator = generator
        self.perm = torch.randperm(len(dataset), generator=generator)
        self.pos = 0

    def take(self, n: int) -> Tensor:
        idx = []
        while n > 0:
            if self.pos == len(self.perm):
                self.perm = torch.randperm(len(self.dataset), generator=self.generator)
                self.pos = 0
            grab = min(n, len(self.perm) - self.pos)
            idx.append(self.perm[self.pos : self.pos + grab])
            self.pos += grab
            n -= grab
        return torch.cat(idx)


def mixing_counts(batch_size: int, ratio: tuple[int, int]) -> tuple[int, int]:
    r, s = ratio
    if r <= 0 or s <= 0:
        raise ValueError(
            f"ratio components must be positive, got {ratio}; "
            "use a single-source stream instead of a zero component"
        )
    n_real = round(batch_size * r / (r + s))
    return n_real, batch_size - n_real


def mix_real_synthetic(
    real: ImageDataset,
    synthetic: ImageDataset,
    ratio: tuple[int, int],
    batch_size: int,
    seed: int = 0,
) -> Iterator[Batch]:
    """Endless stream of batches holding exactly (per-batch, not just in
    expectation) the ratio's share of real and synthetic samples."""
    if len(real) == 0 or len(synthetic) == 0:
        raise ValueError("both datasets must be nonempty")
    n_real, n_syn = mixing_counts(batch_size, ratio)
    gen_r = torch.Generator().manual_seed(derive_seed(seed, "mix-real"))
    gen_s = torch.Generator().manual_seed(derive_seed(seed, "mix-syn"))
    real_cycle, syn_cycle = _Cycler(real, gen_r), _Cycler(synthetic, gen_s)
    while True:
        ri = real_cycle.take(n_real)
        si = syn_cycle.take(n_syn)
        yield Batch(
            images=torch.cat([real.images[ri], synthetic.images[si]]),
            labels=torch.cat([real.labels[ri], synthetic.labels[si]]),
            n_real=n_real,
            n_synthetic=n_syn,
        )


def single_source(dataset: ImageDataset, batch_size: int, seed: int = 0) -> Iterator[Batch]:
    gen = torch.Generator().manual_seed(derive_seed(seed, "single-source"))
    cycle = _Cycler(dataset, gen)
    while True:
        idx = cycle.take(batch_size)
        yield Batch(images=dataset.images[idx], labels=dataset.labels[idx],
                    n_real=batch_size, n_synthetic=0)


# ---------------------------------------------------------------------------
# Augmentations


def standard_augment(x: Tensor, generator: torch.Generator, pad: int = 4,
                     flip: bool = True) -> Tensor:
    """Random crop after zero-padding plus horizontal flip, per sample."""
    n, _, h, w = x.shape
    out = x
    if pad > 0:
        padded = F.pad(x, (pad, pad, pad, pad))
        oy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
        ox = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
        out = torch.stack(
            [padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w] for i in range(n)]
        )
    if flip:
        mask = torch.rand(n, generator=generator) < 0.5
        out = torch.where(mask[:, None, None, None], out.flip(-1), out)
    return out


def cutout_side(resolution: int, area_fraction: bool = True) -> int:
    """Mask side length: sqrt(1/8) of the image side under the area reading
    (default), or 1/8 of the side under the literal reading."""
    if area_fraction:
        return round(resolution * math.sqrt(1.0 / 8.0))
    return round(resolution / 8.0)


def cutout(x: Tensor, side: int, generator: torch.Generator) -> Tensor:
    """Zero one side x side square per image, placed fully inside it."""
    n, _, h, w = x.shape
    if side > min(h, w):
        raise ValueError(f"cutout side {side} exceeds image size {h}x{w}")
    out = x.clone()
    ys = torch.randint(0, h - side + 1, (n,), generator=generator)
    xs = torch.randint(0, w - side + 1, (n,), generator=generator)
    for i in range(n):
        out[i, :, ys[i] : ys[i] + side, xs[i] : xs[i] + side] = 0.0
    return out


def mixup(x: Tensor, y: Tensor, generator: torch.Generator,
          beta: float = 1.0) -> tuple[Tensor, Tensor, Tensor, float]:
    """Convex combination with a shuffled partner; lam ~ Beta(beta, beta).

    Returns (mixed x, y_a, y_b, lam); train with
    lam * CE(pred, y_a) + (1 - lam) * CE(pred, y_b).
    """
    if x.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    # Beta(a, a) via two gammas, drawn from the torch generator for determinism.
    g1 = torch._standard_gamma(torch.full((), beta), generator=generator)
    g2 = torch._standard_gamma(torch.full((), beta), generator=generator)
    lam = float(g1 / (g1 + g2))
    perm = torch.randperm(x.shape[0], generator=generator)
    mixed = lam * x + (1.0 - lam) * x[perm]
    return mixed, y, y[perm], lam


def cutmix(x: Tensor, y: Tensor, generator: torch.Generator,
           beta: float = 1.0) -> tuple[Tensor, Tensor, Tensor, float]:
    """Paste a random box from a shuffled partner into each image.

    The box is sampled for a target area ratio 1 - lam with lam ~
    Beta(beta, beta), then clipped to the borders; the returned lam is
    recomputed exactly from the clipped box.
    """
    if x.shape[0] < 2:
        raise ValueError("cutmix needs a batch of at least 2")
    n, _, h, w = x.shape
    g1 = torch._standard_gamma(torch.full((), beta), generator=generator)
    g2 = torch._standard_gamma(torch.full((), beta), generator=generator)
    lam_target = float(g1 / (g1 + g2))
    perm = torch.randperm(n, generator=generator)

    cut = math.sqrt(1.0 - lam_target)
    cut_h, cut_w = int(h * cut), int(w * cut)
    cy = int(torch.randint(0, h, (1,), generator=generator))
    cx = int(torch.randint(0, w, (1,), generator=generator))
    y1, y2 = max(cy - cut_h // 2, 0), min(cy + cut_h // 2, h)
    x1, x2 = max(cx - cut_w // 2, 0), min(cx + cut_w // 2, w)

    mixed = x.clone()
    mixed[:, :, y1:y2, x1:x2] = x[perm][:, :, y1:y2, x1:x2]
    lam = 1.0 - ((y2 - y1) * (x2 - x1)) / (h * w)
    return mixed, y, y[perm], lam


def mixed_criterion(pred: Tensor, y_a: Tensor, y_b: Tensor, lam: float) -> Tensor:
    return lam * F.cross_entropy(pred, y_a) + (1.0 - lam) * F.cross_entropy(pred, y_b)


# ---------------------------------------------------------------------------
# Classifier training


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str = "resnet8-32"
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "sgd"  # "sgd" (momentum + cosine) or "adamw"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    crop_pad: int = 4
    hflip: bool = True
    augmentation: str = "none"  # none | cutout | mixup | cutmix
    cutout_area_fraction: bool = True
    seeds: tuple[int, ...] = (0, 1, 2)
    # gradient-step budget reference: steps/epoch = ceil(reference / batch);
    # None uses the training set's own size. Fixing it across runs compares
    # different data sources at equal optimization cost.
    equal_steps_reference: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if self.arch not in ARCHITECTURES:
            raise KeyError(f"unknown architecture {self.arch!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.augmentation not in ("none", "cutout", "mixup", "cutmix"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    @classmethod
    def medmnist_style(cls, **overrides) -> "ClassifierConfig":
        """Preset with the decoupled-weight-decay optimizer settings used for
        the medical-imaging benchmarks (lr 1e-3, weight decay 5e-4)."""
        base = dict(optimizer="adamw", lr=1e-3, weight_decay=5e-4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class TrainReport:
    accuracies: dict[int, float]  # seed -> test accuracy
    mean_accuracy: float
    std_accuracy: float
    provenance: dict
    wall_time_s: float
    failed_seeds: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        accs = list(self.accuracies.values())
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"accuracies outside [0, 1]: {accs}")
        if accs:
            if abs(self.mean_accuracy - float(np.mean(accs))) > 1e-9:
                raise ValueError("mean_accuracy inconsistent with per-seed list")
            if abs(self.std_accuracy - float(np.std(accs))) > 1e-9:
                raise ValueError("std_accuracy inconsistent with per-seed list")

    def to_dict(self) -> dict:
        return {
            "accuracies": {str(k): v for k, v in self.accuracies.items()},
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "provenance": self.provenance,
            "wall_time_s": self.wall_time_s,
            "failed_seeds": {str(k): v for k, v in self.failed_seeds.items()},
        }

    def save(self, path: Path | str) -> None:
        atomic_write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Path | str) -> "TrainReport":
        d = read_json(path)
        return cls(
            accuracies={int(k): v for k, v in d["accuracies"].items()},
            mean_accuracy=d["mean_accuracy"],
            std_accuracy=d["std_accuracy"],
            provenance=d["provenance"],
            wall_time_s=d["wall_time_s"],
            failed_seeds={int(k): v for k, v in d.get("failed_seeds", {}).items()},
        )


@torch.no_grad()
def evaluate(model: ResNet8, dataset: ImageDataset, batch: int = 256) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch):
        pred = model(dataset.images[start : start + batch]).argmax(dim=1)
        correct += int((pred == dataset.labels[start : start + batch]).sum())
    return correct / len(dataset)


def _train_one_seed(
    stream_factory,
    test_set: ImageDataset,
    config: ClassifierConfig,
    total_steps: int,
    num_classes: int,
    seed: int,
) -> tuple[ResNet8, float]:
    init_gen = torch.Generator().manual_seed(derive_seed(seed, "clf-init"))
    with _param_init_rng(init_gen):
        model = build_classifier(config.arch, num_classes, test_set.images.shape[1])
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                              weight_decay=config.weight_decay)
    else:
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                weight_decay=config.weight_decay)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    aug_gen = torch.Generator().manual_seed(derive_seed(seed, "clf-aug"))
    stream = stream_factory(seed)
    side = cutout_side(test_set.resolution, config.cutout_area_fraction)

    model.train()
    for step in range(total_steps):
        batch = next(stream)
        x = standard_augment(batch.images, aug_gen, pad=config.crop_pad, flip=config.hflip)
        y = batch.labels
        if config.augmentation == "cutout":
            x = cutout(x, side, aug_gen)
            loss = F.cross_entropy(model(x), y)
        elif config.augmentation == "mixup":
            x, y_a, y_b, lam = mixup(x, y, aug_gen)
            loss = mixed_criterion(model(x), y_a, y_b, lam)
        elif config.augmentation == "cutmix":
            x, y_a, y_b, lam = cutmix(x, y, aug_gen)
            loss = mixed_criterion(model(x), y_a, y_b, lam)
        else:
            loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        model.train()
    return model, evaluate(model, test_set)


def train_classifier(
    train_set: ImageDataset,
    test_set: ImageDataset,
    config: ClassifierConfig,
    synthetic: ImageDataset | None = None,
    mix_ratio: tuple[int, int] | None = None,
    model_out: Path | str | None = None,
) -> TrainReport:
    """Train one classifier per seed and aggregate a TrainReport.

    With ``synthetic`` and ``mix_ratio`` set, batches mix both sources at the
    exact per-batch ratio; otherwise training is single-source on
    ``train_set``. Evaluation always runs on ``test_set`` (real images).
    A NaN loss aborts only that seed and is recorded in the report.
    """
    overlap = set(train_set.ids) & set(test_set.ids)
    if overlap:
        raise ValueError(f"train/test sets share {len(overlap)} ids, e.g. {sorted(overlap)[:3]}")
    num_classes = max(train_set.num_classes(), test_set.num_classes())
    reference = config.equal_steps_reference or len(train_set)
    total_steps = config.epochs * math.ceil(reference / config.batch_size)

    def stream_factory(seed: int):
        if synthetic is not None and mix_ratio is not None:
            return mix_real_synthetic(train_set, synthetic, mix_ratio, config.batch_size,
                                      seed=derive_seed(seed, "clf-data"))
        return single_source(train_set, config.batch_size, seed=derive_seed(seed, "clf-data"))

    t0 = time.monotonic()
    accuracies: dict[int, float] = {}
    failed: dict[int, str] = {}
    last_model: ResNet8 | None = None
    for seed in config.seeds:
        try:
            model, acc = _train_one_seed(
                stream_factory, test_set, config, total_steps, num_classes, seed
            )
            accuracies[seed] = acc
            last_model = model
            logger.info("seed %d: accuracy %.4f (%d steps)", seed, acc, total_steps)
        except RuntimeError as exc:
            failed[seed] = str(exc)
            logger.warning("seed %d failed: %s", seed, exc)
    accs = list(accuracies.values())
    if model_out is not None and last_model is not None:
        checkpoints.save_classifier(model_out, last_model)
    provenance = {
        "train_checksum": train_set.checksum(),
        "test_checksum": test_set.checksum(),
        "synthetic_checksum": synthetic.checksum() if synthetic is not None else None,
        "mix_ratio": list(mix_ratio) if mix_ratio else None,
        "config": config.to_dict(),
        "total_steps": total_steps,
    }
    return TrainReport(
        accuracies=accuracies,
        mean_accuracy=float(np.mean(accs)) if accs else 0.0,
        std_accuracy=float(np.std(accs)) if accs else 0.0,
        provenance=provenance,
        wall_time_s=time.monotonic() - t0,
        failed_seeds=failed,
    )


# ---------------------------------------------------------------------------
# Adversarial augmentation rounds (minimax: train, then perturb toward
# higher loss, append, repeat)


@dataclass(frozen=True)
class AdversarialAugmentConfig:
    rounds: int = 2
    ascent_steps: int = 1
    step_size: float = 1e-3
    step_clip: float = 0.1  # per-step cap on the perturbation magnitude
    train_steps_per_round: int = 100  # minimization phase length
    entropy_weight: float = 0.0  # optional ascent bonus on prediction entropy
    seed: int = 0


def adversarial_perturb(
    model: ResNet8, images: Tensor, labels: Tensor, cfg: AdversarialAugmentConfig
) -> Tensor:
    """Gradient-ascent copies of ``images``: move each input toward higher
    per-sample loss (optionally plus prediction entropy), clipping each step."""
    model.eval()
    x = images.clone()
    for _ in range(cfg.ascent_steps):
        x = x.detach().requires_grad_(True)
        logits = model(x)
        objective = F.cross_entropy(logits, labels, reduction="sum")
        if cfg.entropy_weight > 0:
            probs = logits.softmax(dim=1)
            entropy = -(probs * probs.clamp_min(1e-12).log()).sum()
            objective = objective + cfg.entropy_weight * entropy
        (grad,) = torch.autograd.grad(objective, x)
        step = (cfg.step_size * grad).clamp(-cfg.step_clip, cfg.step_clip)
        x = (x + step).detach()
    return x


def me_ada_rounds(
    dataset: ImageDataset,
    test_set: ImageDataset,
    clf_config: ClassifierConfig,
    adv_config: AdversarialAugmentConfig,
) -> tuple[ImageDataset, ResNet8]:
    """Alternate short training phases with input-space ascent phases.

    Each round perturbs the original images under the current model and
    appends them, so K rounds grow the pool to (K + 1) x the original size.
    Returns the final pool and the final model.
    """
    num_classes = max(dataset.num_classes(), test_set.num_classes())
    init_gen = torch.Generator().manual_seed(derive_seed(adv_config.seed, "meada-init"))
    with _param_init_rng(init_gen):
        model = build_classifier(clf_config.arch, num_classes, dataset.images.shape[1])
    opt = torch.optim.SGD(model.parameters(), lr=clf_config.lr, momentum=clf_config.momentum,
                          weight_decay=clf_config.weight_decay)
    aug_gen = torch.Generator().manual_seed(derive_seed(adv_config.seed, "meada-aug"))

    pool = dataset
    for round_idx in range(adv_config.rounds + 1):
        stream = single_source(pool, clf_config.batch_size,
                               seed=derive_seed(adv_config.seed, "meada-data", round_idx))
        model.train()
        for _ in range(adv_config.train_steps_per_round):
            batch = next(stream)
            x = standard_augment(batch.images, aug_gen, pad=clf_config.crop_pad,
                                 flip=clf_config.hflip)
            loss = F.cross_entropy(model(x), batch.labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss in adversarial round {round_idx}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        if round_idx == adv_config.rounds:
            break
        perturbed = adversarial_perturb(model, dataset.images, dataset.labels, adv_config)
        pool = ImageDataset(
            images=torch.cat([pool.images, perturbed.clamp(0, 1)]),
            labels=torch.cat([pool.labels, dataset.labels]),
            ids=pool.ids + tuple(f"{i}-adv{round_idx}" for i in dataset.ids),
        )
        logger.info("adversarial round %d: pool size %d", round_idx, len(pool))
    return pool, model


# ---------------------------------------------------------------------------
# Scaling experiment


@dataclass(frozen=True)
class ScalingCell:
    name: str
    train_set: ImageDataset
    synthetic: ImageDataset | None = None
    mix_ratio: tuple[int, int] | None = None


def scaling_experiment(
    cells: Sequence[ScalingCell],
    test_set: ImageDataset,
    config: ClassifierConfig,
) -> dict[str, TrainReport]:
    """One TrainReport per cell; cell failures are recorded, not fatal."""
    results: dict[str, TrainReport] = {}
    for cell in cells:
        try:
            results[cell.name] = train_classifier(
                cell.train_set, test_set, config,
                synthetic=cell.synthetic, mix_ratio=cell.mix_ratio,
            )
        except (ValueError, RuntimeError) as exc:
            logger.error("cell %s failed: %s", cell.name, exc)
            results[cell.name] = TrainReport(
                accuracies={}, mean_accuracy=0.0, std_accuracy=0.0,
                provenance={"cell": cell.name, "error": str(exc)},
                wall_time_s=0.0, failed_seeds={s: str(exc) for s in config.seeds},
            )
    return results
