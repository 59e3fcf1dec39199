"""Stage 1: learn one conditioning vector per real image against a frozen
denoiser.

Each image's vector starts from its class token (warm start) or a small
Gaussian draw, then follows AdamW at a constant learning rate on the
denoising loss, with per-image RNG streams so results do not depend on how
images are grouped into optimization chunks. Snapshots at configurable step
checkpoints become the sampling module's inputs; their mean becomes the
unconditional guidance branch.

Stored snapshots are guarded: at every checkpoint a fixed-seed Monte-Carlo
loss estimate decides between the current iterate and the best vector seen
so far, so no snapshot is ever worse than the initialization under that
estimator (constant-lr Adam hovers around optima, so the raw last iterate
carries no such guarantee). A pixel/feature-space GAN-inversion baseline
lives at the bottom of the file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import ImageDataset
from .diffusion import (
    DenoiserFn,
    NonFiniteError,
    NoiseSchedule,
    TrainedDenoiser,
    forward_noise,
    mc_loss_estimate,
)
from .utils import (
    atomic_write_bytes,
    atomic_write_json,
    derive_seed,
    hash_bytes,
    read_json,
    stable_hash,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 1000
    lr: float = 0.03
    weight_decay: float = 0.0
    checkpoints: tuple[int, ...] = (250, 500, 1000)
    tokens: int = 8
    dim: int = 64
    init_std: float = 0.02
    warm_start: bool = True
    chunk_size: int = 64
    guard_draws: int = 64  # Monte-Carlo draws backing the snapshot guard
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.lr <= 0 or self.chunk_size < 1:
            raise ValueError("steps, lr, and chunk_size must be positive")
        if self.guard_draws < 1:
            raise ValueError("guard_draws must be positive")
        cps = self.checkpoints
        if not cps or list(cps) != sorted(set(cps)):
            raise ValueError(f"checkpoints must be nonempty and strictly increasing: {cps}")
        if cps[0] < 1 or cps[-1] > self.steps:
            raise ValueError(f"checkpoints must lie in [1, steps={self.steps}]: {cps}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["checkpoints"] = list(self.checkpoints)
        return d

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


@dataclass
class EmbeddingRecord:
    """Checkpointed conditioning vectors for one image.

    ``init_loss`` and ``guard_losses`` are the fixed-seed Monte-Carlo loss
    estimates recorded by the snapshot guard (seed derived from the config
    seed and image id, ``guard_draws`` draws); by construction
    ``guard_losses[s] <= init_loss`` for every stored step ``s``.
    """

    image_id: str
    label: int
    snapshots: dict[int, Tensor]  # optimization step -> (L, D)
    init: Tensor  # the starting vector, kept for loss-decrease checks
    config_hash: str
    init_loss: float = float("nan")
    guard_losses: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        steps = list(self.snapshots)
        if not steps or steps != sorted(set(steps)):
            raise ValueError("snapshots must be keyed by increasing steps, at least one")
        for s, c in self.snapshots.items():
            if not torch.isfinite(c).all():
                raise ValueError(f"non-finite snapshot at step {s} for {self.image_id}")

    def vector(self, checkpoint: int) -> Tensor:
        if checkpoint not in self.snapshots:
            raise KeyError(
                f"record {self.image_id} has no checkpoint {checkpoint}; "
                f"available: {sorted(self.snapshots)}"
            )
        return self.snapshots[checkpoint]


def _gaussian_init(config: InversionConfig, image_id: str) -> Tensor:
    gen = torch.Generator().manual_seed(derive_seed(config.seed, image_id, "init"))
    return torch.empty(config.tokens, config.dim).normal_(0.0, config.init_std, generator=gen)


def _draw_generator(config: InversionConfig, image_id: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(config.seed, image_id, "draws"))


def guard_seed(config: InversionConfig, image_id: str) -> int:
    """Seed of the per-image Monte-Carlo estimator backing the snapshot
    guard; exposed so tests can re-evaluate stored losses exactly."""
    return derive_seed(config.seed, image_id, "guard")


def invert_image(
    denoiser: DenoiserFn,
    z0: Tensor,
    label: int,
    config: InversionConfig,
    image_id: str,
    sched: NoiseSchedule,
    init: Tensor | None = None,
) -> EmbeddingRecord:
    """Optimize one conditioning vector; the denoiser is treated read-only.

    One fresh (t, eps) pair is drawn per optimization step from a stream
    keyed by (config.seed, image_id). ``init`` overrides the default
    Gaussian initialization (the dataset-level driver passes class tokens
    here for the warm start). The snapshot guard keeps every stored vector
    at or below the initialization's fixed-seed Monte-Carlo loss.
    """
    if init is None:
        init = _gaussian_init(config, image_id)
    records = _invert_chunk(denoiser, z0[None], [label], [image_id], config, sched, init[None])
    return records[0]


def _invert_chunk(
    denoiser: DenoiserFn,
    z0: Tensor,
    labels: Sequence[int],
    ids: Sequence[str],
    config: InversionConfig,
    sched: NoiseSchedule,
    init: Tensor,
) -> list[EmbeddingRecord]:
    """Jointly optimize a chunk of vectors.

    The loss is the *sum* of per-image mean losses and AdamW updates are
    elementwise, so each vector follows the same trajectory it would alone
    (up to float batching effects in the denoiser forward); per-image noise
    streams make the draws independent of chunk composition.
    """
    n = z0.shape[0]
    c = init.clone().requires_grad_(True)
    opt = torch.optim.AdamW([c], lr=config.lr, weight_decay=config.weight_decay)
    gens = [_draw_generator(config, img_id) for img_id in ids]
    snapshots: list[dict[int, Tensor]] = [{} for _ in range(n)]
    per_pixel = z0[0].numel()

    def estimate(vecs: Tensor) -> list[float]:
        return [
            mc_loss_estimate(
                denoiser, z0[i], vecs[i], sched,
                n_draws=config.guard_draws, seed=guard_seed(config, ids[i]),
            )
            for i in range(n)
        ]

    best_vec = init.clone()
    best_loss = estimate(init)
    init_loss = list(best_loss)
    guard_log: list[dict[int, float]] = [{} for _ in range(n)]

    for step in range(1, config.steps + 1):
        t = torch.tensor([int(torch.randint(1, sched.T + 1, (1,), generator=g)) for g in gens])
        eps = torch.stack(
            [torch.empty_like(z0[i]).normal_(generator=gens[i]) for i in range(n)]
        )
        z_t = forward_noise(z0, t, eps, sched)
        pred = denoiser(z_t, t, c)
        loss = torch.sum((eps - pred) ** 2) / per_pixel  # = sum of per-image means
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not torch.isfinite(c).all():
            bad = [ids[i] for i in range(n) if not torch.isfinite(c[i]).all()]
            raise NonFiniteError(f"NaN in conditioning at step {step} for image(s) {bad}")
        if step in config.checkpoints:
            cur = c.detach()
            cur_loss = estimate(cur)
            for i in range(n):
                if cur_loss[i] <= best_loss[i]:
                    best_vec[i] = cur[i].clone()
                    best_loss[i] = cur_loss[i]
                snapshots[i][step] = best_vec[i].clone()
                guard_log[i][step] = best_loss[i]

    cfg_hash = config.config_hash()
    return [
        EmbeddingRecord(
            image_id=ids[i],
            label=int(labels[i]),
            snapshots=snapshots[i],
            init=init[i].clone(),
            config_hash=cfg_hash,
            init_loss=init_loss[i],
            guard_losses=guard_log[i],
        )
        for i in range(n)
    ]


def chunk_ranges(n: int, chunk_size: int) -> list[tuple[int, int]]:
    """Fixed chunk boundaries over dataset order; resume and regeneration
    operate on whole chunks so grouping never depends on progress."""
    return [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]


def invert_dataset(
    denoiser: TrainedDenoiser,
    dataset: ImageDataset,
    ae,
    config: InversionConfig,
    store_dir: Path | str | None = None,
    resume: bool = False,
) -> tuple[list[EmbeddingRecord], dict[str, str]]:
    """Invert every image of the dataset; returns (records, failures).

    Images are encoded through the autoencoder, then optimized in fixed
    chunks. With ``store_dir`` each finished record is persisted atomically;
    with ``resume`` chunks whose records are all already stored (matching
    config hash) are skipped. A chunk that fails is retried image-by-image
    and surviving records kept; failures land in the returned map.
    """
    store = EmbeddingStore(store_dir, config) if store_dir is not None else None
    before = denoiser_checksum(denoiser)
    latents = denoiser.normalize(ae.encode(dataset.images))
    n = len(dataset)
    records: list[EmbeddingRecord] = []
    failures: dict[str, str] = {}

    for start, end in chunk_ranges(n, config.chunk_size):
        ids = dataset.ids[start:end]
        if resume and store is not None and all(store.has(i) for i in ids):
            records.extend(store.load(i) for i in ids)
            continue
        labels = [int(dataset.labels[i]) for i in range(start, end)]
        init = torch.stack(
            [
                denoiser.conditioner.class_token(lab).detach().clone()
                if config.warm_start
                else _gaussian_init(config, img_id)
                for lab, img_id in zip(labels, ids)
            ]
        )
        try:
            chunk = _invert_chunk(
                denoiser, latents[start:end], labels, ids, config, denoiser.schedule, init
            )
        except NonFiniteError:
            chunk = []
            for i, img_id in zip(range(start, end), ids):
                try:
                    chunk.append(
                        invert_image(
                            denoiser, latents[i], int(dataset.labels[i]), config, img_id,
                            denoiser.schedule, init=init[i - start],
                        )
                    )
                except NonFiniteError as exc:
                    failures[img_id] = str(exc)
                    logger.warning("inversion failed for %s: %s", img_id, exc)
        if store is not None:
            for rec in chunk:
                store.save(rec)
        records.extend(chunk)

    after = denoiser_checksum(denoiser)
    if before != after:
        raise RuntimeError("denoiser parameters changed during inversion (frozen-model breach)")
    logger.info("inverted %d/%d images (%d failures)", len(records), n, len(failures))
    return records, failures


def mean_embedding(records: Sequence[EmbeddingRecord], checkpoint: int) -> Tensor:
    """Elementwise arithmetic mean of the checkpoint's vectors, in float64."""
    if not records:
        raise ValueError("mean_embedding over an empty record list")
    stack = torch.stack([r.vector(checkpoint) for r in records]).double()
    return stack.mean(dim=0)


def denoiser_checksum(denoiser: TrainedDenoiser) -> str:
    """Hash of all denoiser + conditioner parameter bytes, in name order."""
    parts = []
    for module in (denoiser.unet, denoiser.conditioner):
        for name, p in sorted(module.state_dict().items()):
            parts.append((name, hash_bytes(p.detach().numpy().tobytes())))
    return stable_hash(parts)


# ---------------------------------------------------------------------------
# Embedding store: per-record atomic persistence


class EmbeddingStore:
    """Directory of per-record JSON manifests plus one little-endian float32
    blob per snapshot. The manifest is written last, so its presence marks a
    complete record."""

    def __init__(self, root: Path | str, config: InversionConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_hash = config.config_hash()
        self.seed = config.seed

    def _manifest_path(self, image_id: str) -> Path:
        return self.root / f"{image_id}.json"

    def save(self, record: EmbeddingRecord) -> None:
        files = {}
        for step, c in record.snapshots.items():
            name = f"{record.image_id}-{step}.bin"
            atomic_write_bytes(self.root / name, c.numpy().astype("<f4").tobytes())
            files[str(step)] = name
        init_name = f"{record.image_id}-init.bin"
        atomic_write_bytes(self.root / init_name, record.init.numpy().astype("<f4").tobytes())
        atomic_write_json(
            self._manifest_path(record.image_id),
            {
                "image_id": record.image_id,
                "label": record.label,
                "shape": list(record.init.shape),
                "checkpoints": sorted(record.snapshots),
                "config_hash": record.config_hash,
                "seed": self.seed,
                "dtype": "<f4",
                "files": files,
                "init_file": init_name,
                "init_loss": record.init_loss,
                "guard_losses": {str(s): v for s, v in record.guard_losses.items()},
            },
        )

    def has(self, image_id: str) -> bool:
        path = self._manifest_path(image_id)
        if not path.exists():
            return False
        return read_json(path).get("config_hash") == self.config_hash

    def _read_blob(self, name: str, shape: Sequence[int]) -> Tensor:
        data = np.frombuffer((self.root / name).read_bytes(), dtype="<f4")
        return torch.from_numpy(data.copy()).reshape(*shape)

    def load(self, image_id: str) -> EmbeddingRecord:
        m = read_json(self._manifest_path(image_id))
        shape = m["shape"]
        return EmbeddingRecord(
            image_id=m["image_id"],
            label=m["label"],
            snapshots={int(s): self._read_blob(f, shape) for s, f in sorted(
                m["files"].items(), key=lambda kv: int(kv[0])
            )},
            init=self._read_blob(m["init_file"], shape),
            config_hash=m["config_hash"],
            init_loss=m.get("init_loss", float("nan")),
            guard_losses={int(s): v for s, v in m.get("guard_losses", {}).items()},
        )

    def load_all(self) -> list[EmbeddingRecord]:
        return [self.load(p.stem) for p in sorted(self.root.glob("*.json"))]


# ---------------------------------------------------------------------------
# GAN-inversion baseline


@dataclass(frozen=True)
class GanInversionConfig:
    latent_dim: int
    pixel_weight: float = 1.0  # weight on the pixel-distance term
    feature_fn: Callable[[Tensor], Tensor] | None = None  # None = identity
    steps: int = 800
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.pixel_weight < 0:
            raise ValueError("pixel_weight must be >= 0")
        if self.latent_dim < 1 or self.steps < 1 or self.lr <= 0:
            raise ValueError("latent_dim, steps, and lr must be positive")


class DegenerateObjectiveError(ValueError):
    """The inversion objective does not depend on the latent."""


def gan_invert(
    generator: Callable[[Tensor], Tensor],
    x: Tensor,
    cfg: GanInversionConfig,
) -> tuple[Tensor, float]:
    """Recover a latent for ``x`` by descending a feature + pixel distance.

    objective(z) = ||psi(G(z)) - psi(x)||^2 / d_f
                 + pixel_weight * ||G(z) - x||^2 / d_I

    Adam with a cosine-decayed step size; returns (z, final objective).
    """
    psi = cfg.feature_fn if cfg.feature_fn is not None else lambda v: v
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "gan-invert"))
    if cfg.pixel_weight == 0:
        probe_a = torch.empty_like(x).normal_(generator=gen)
        probe_b = torch.empty_like(x).normal_(generator=gen)
        if torch.allclose(psi(probe_a), psi(probe_b)):
            raise DegenerateObjectiveError(
                "pixel_weight=0 with a constant feature map: objective is independent of z"
            )
    feat_x = psi(x).detach()
    d_f = max(feat_x.numel(), 1)
    d_i = x.numel()

    z = torch.empty(cfg.latent_dim).normal_(generator=gen).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    obj = float("inf")
    for step in range(cfg.steps):
        gx = generator(z)
        loss = torch.sum((psi(gx) - feat_x) ** 2) / d_f
        loss = loss + cfg.pixel_weight * torch.sum((gx - x) ** 2) / d_i
        if not torch.isfinite(loss):
            raise NonFiniteError(f"GAN inversion objective non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        schedule.step()
        obj = float(loss.detach())
    return z.detach(), obj
