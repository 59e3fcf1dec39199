"""Image datasets: in-memory container, toy shape generators, PNG ingest.

The toy generator draws three shape classes (disk, square, triangle) on a
dark background at 32x32. A shift knob in [0, 1] controls how far the
pretraining distribution sits from the target distribution: at shift=1
pretraining images are drawn as outlines and with inverted contrast with
probability 1, at shift=0 the two generators are parameter-identical.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .utils import derive_seed, hash_bytes, stable_hash

logger = logging.getLogger(__name__)

CLASS_NAMES = ("disk", "square", "triangle")
TOY_GENERATOR_ID = "shapes-3class"


@dataclass(frozen=True)
class ImageSample:
    pixels: Tensor  # (C, H, W) float32 in [0, 1]
    label: int
    id: str


@dataclass
class ImageDataset:
    """Tensor-backed dataset: (N, C, H, W) float32 pixels in [0, 1]."""

    images: Tensor
    labels: Tensor  # (N,) int64
    ids: tuple[str, ...]

    def __post_init__(self):
        self.ids = tuple(self.ids)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or len(self.ids) != n:
            raise ValueError("images, labels, and ids disagree on sample count")
        if len(set(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        if n and (float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        self.labels = self.labels.long()

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(pixels=self.images[i], label=int(self.labels[i]), id=self.ids[i])

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def class_histogram(self) -> dict[int, int]:
        values, counts = torch.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            ids=tuple(self.ids[int(i)] for i in idx),
        )

    def indices_of_class(self, label: int) -> list[int]:
        return [i for i in range(len(self)) if int(self.labels[i]) == label]

    def checksum(self) -> str:
        """Hash of quantized pixels + labels + ids; stable across processes."""
        u8 = (self.images.clamp(0, 1) * 255.0).round().to(torch.uint8)
        return stable_hash(
            {
                "pixels": hash_bytes(u8.numpy().tobytes()),
                "labels": [int(x) for x in self.labels],
                "ids": list(self.ids),
            }
        )


# ---------------------------------------------------------------------------
# Toy shape generator


@dataclass(frozen=True)
class ShapeGenParams:
    """Per-image sampling ranges for one drawing distribution."""

    resolution: int = 32
    bg_range: tuple[float, float] = (0.0, 0.15)
    fg_range: tuple[float, float] = (0.55, 0.95)
    size_range: tuple[float, float] = (5.0, 9.0)
    tint: float = 0.15
    pixel_noise: float = 0.02
    outline_prob: float = 0.0
    flip_prob: float = 0.0


def target_params(resolution: int = 32) -> ShapeGenParams:
    # shape sizes scale with resolution (the defaults are sized for 32 px)
    s = resolution / 32.0
    return ShapeGenParams(resolution=resolution, size_range=(5.0 * s, 9.0 * s))


def pretrain_params(shift: float, resolution: int = 32) -> ShapeGenParams:
    """shift=0 reproduces the target distribution exactly; larger shifts draw
    outlines (probability = shift) and invert contrast (probability =
    shift / 2, capped so both polarities stay represented — an autoencoder
    pretrained on one polarity only cannot reconstruct the other)."""
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must lie in [0, 1], got {shift}")
    return replace(target_params(resolution), outline_prob=shift, flip_prob=shift / 2.0)


def _draw_shape(rng: np.random.Generator, label: int, p: ShapeGenParams) -> np.ndarray:
    res = p.resolution
    margin = p.size_range[1] + 2
    cx = rng.uniform(margin, res - margin)
    cy = rng.uniform(margin, res - margin)
    size = rng.uniform(*p.size_range)
    bg = rng.uniform(*p.bg_range)
    fg = rng.uniform(*p.fg_range)
    outline = rng.random() < p.outline_prob
    flip = rng.random() < p.flip_prob
    tint = rng.uniform(-p.tint, p.tint, size=3)

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    if label == 0:  # disk
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    elif label == 1:  # square
        mask = (np.abs(xx - cx) <= size) & (np.abs(yy - cy) <= size)
    elif label == 2:  # triangle, apex at the top
        mask = (yy >= cy - size) & (yy <= cy + size) & (np.abs(xx - cx) <= (yy - cy + size) / 2)
    else:
        raise ValueError(f"label must be in {{0, 1, 2}}, got {label}")

    if outline:
        interior = mask.copy()
        interior[2:, :] &= mask[:-2, :]
        interior[:-2, :] &= mask[2:, :]
        interior[:, 2:] &= mask[:, :-2]
        interior[:, :-2] &= mask[:, 2:]
        mask = mask & ~interior
    if flip:
        bg, fg = 1.0 - bg, 1.0 - fg

    img = np.full((3, res, res), bg, dtype=np.float64)
    for c in range(3):
        img[c][mask] = np.clip(fg + tint[c], 0.0, 1.0)
    img += rng.normal(0.0, p.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_shapes(
    n: int,
    params: ShapeGenParams,
    seed: int,
    split: str,
    num_classes: int = 3,
) -> ImageDataset:
    """Draw n images with round-robin labels, so class counts differ by at
    most one (600 -> 200/200/200, 500 -> 167/167/166)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    images = np.empty((n, 3, params.resolution, params.resolution), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    ids = []
    for i in range(n):
        label = i % num_classes
        rng = np.random.default_rng(derive_seed(seed, split, i))
        images[i] = _draw_shape(rng, label, params)
        labels[i] = label
        ids.append(f"{split}-{i:05d}")
    return ImageDataset(
        images=torch.from_numpy(images), labels=torch.from_numpy(labels), ids=tuple(ids)
    )


@dataclass(frozen=True)
class ToyDataSpec:
    """Sizes and shift for the pretrain / target / test triple."""

    generator: str = TOY_GENERATOR_ID
    num_classes: int = 3
    resolution: int = 32
    n_pretrain: int = 600
    n_target: int = 600
    n_test: int = 300
    shift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.generator != TOY_GENERATOR_ID:
            raise ValueError(f"unknown toy generator {self.generator!r}")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"{self.generator} provides exactly {len(CLASS_NAMES)} classes")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def make_toy_datasets(spec: ToyDataSpec) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
    """Build (pretrain, target, test). Pretrain is drawn under the shifted
    distribution; target and test share the target distribution but use
    disjoint id/seed streams."""
    pre = generate_shapes(
        spec.n_pretrain, pretrain_params(spec.shift, spec.resolution), spec.seed, "pretrain",
        spec.num_classes,
    )
    tgt = generate_shapes(
        spec.n_target, target_params(spec.resolution), spec.seed, "target", spec.num_classes
    )
    tst = generate_shapes(
        spec.n_test, target_params(spec.resolution), spec.seed, "test", spec.num_classes
    )
    logger.info(
        "toy datasets: pretrain=%d target=%d test=%d shift=%.2f", len(pre), len(tgt), len(tst),
        spec.shift,
    )
    return pre, tgt, tst


# ---------------------------------------------------------------------------
# Disk formats


def save_dataset(dataset: ImageDataset, out_dir: Path | str) -> Path:
    """Write 8-bit RGB PNGs plus a labels.csv (filename, label)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        sample = dataset[i]
        u8 = (sample.pixels.clamp(0, 1) * 255.0).round().to(torch.uint8)
        name = f"{sample.id}.png"
        Image.fromarray(u8.permute(1, 2, 0).numpy(), mode="RGB").save(out_dir / name)
        rows.append((name, sample.label))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    return out_dir


class IngestError(ValueError):
    """Raised with per-file detail when a dataset directory is malformed."""


def ingest_dataset(
    source: Path | str,
    format: str = "png",
    *,
    n: int = 300,
    seed: int = 0,
    resolution: int = 32,
) -> ImageDataset:
    """Load a dataset either from a PNG directory with labels.csv, or from
    the named toy generator (``source`` = generator id, format="toy")."""
    if format == "toy":
        if source != TOY_GENERATOR_ID:
            raise IngestError(f"unknown toy generator {source!r}")
        return generate_shapes(n, target_params(resolution), seed, "ingest")
    if format != "png":
        raise IngestError(f"unknown dataset format {format!r}")

    root = Path(source)
    if not root.is_dir():
        raise IngestError(f"dataset directory not found: {root}")
    labels_file = root / "labels.csv"
    if not labels_file.exists():
        raise IngestError(f"missing labels file: {labels_file}")

    problems: list[str] = []
    entries: list[tuple[str, int]] = []
    seen: set[str] = set()
    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise IngestError(f"{labels_file}: expected columns filename,label")
        for row in reader:
            name = row["filename"]
            if name in seen:
                problems.append(f"{name}: duplicate entry")
                continue
            seen.add(name)
            try:
                entries.append((name, int(row["label"])))
            except ValueError:
                problems.append(f"{name}: non-integer label {row['label']!r}")

    images, labels, ids = [], [], []
    for name, label in sorted(entries):
        path = root / name
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            problems.append(f"{name}: {exc}")
            continue
        images.append(torch.from_numpy(arr).permute(2, 0, 1))
        labels.append(label)
        ids.append(Path(name).stem)
    if problems:
        raise IngestError("dataset ingest failed:\n  " + "\n  ".join(problems))
    if not images:
        raise IngestError(f"no images listed in {labels_file}")
    shapes = {tuple(img.shape) for img in images}
    if len(shapes) > 1:
        raise IngestError(f"inconsistent image shapes: {sorted(shapes)}")

    ds = ImageDataset(
        images=torch.stack(images), labels=torch.tensor(labels, dtype=torch.long), ids=tuple(ids)
    )
    logger.info("ingested %d images from %s, classes %s", len(ds), root, ds.class_histogram())
    return ds
