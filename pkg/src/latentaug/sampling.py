"""Stage 2: synthesize image variants from inverted conditioning vectors.

Each variant draws its checkpoint, guidance strength, same-class
interpolation partner, conditioning noise, and starting latent from an RNG
stream keyed by (config seed, source image id, variant index). The streams
are therefore nested across ``variants_per_embedding`` settings — the first
10 variants of a 25-variant run see the same draws as a 10-variant run —
and every sample is reproducible from its recorded provenance.

Denoising runs in fixed-size chunks for speed. Chunk composition is part of
the recorded provenance because batched convolutions are not bitwise
batch-size-invariant on CPU: regenerating a sample bitwise means re-running
its chunk (see ``regenerate_chunk``).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from PIL import Image
from torch import Tensor

from .autoencoder import Autoencoder, _resize
from .data import ImageDataset
from .diffusion import NonFiniteError, TrainedDenoiser, ddim_denoise
from .inversion import EmbeddingRecord, chunk_ranges
from .utils import atomic_write_json, derive_seed, stable_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbationConfig:
    noise_strength: float = 0.1  # Gaussian strength on the conditioning
    interp_strength: float = 0.1  # pull toward a same-class partner
    guidance_set: tuple[float, ...] = (2.0,)
    checkpoint_set: tuple[int, ...] = (1000,)
    variants_per_embedding: int = 10
    steps: int = 20  # inference steps; 100 at paper scale
    x0_clamp: float | None = 3.0
    chunk_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.noise_strength < 0:
            raise ValueError("noise_strength must be >= 0")
        if not 0.0 <= self.interp_strength <= 1.0:
            raise ValueError("interp_strength must lie in [0, 1]")
        if not self.guidance_set or not self.checkpoint_set:
            raise ValueError("guidance_set and checkpoint_set must be nonempty")
        if self.variants_per_embedding < 1 or self.steps < 1 or self.chunk_size < 1:
            raise ValueError("variants_per_embedding, steps, chunk_size must be positive")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["guidance_set"] = list(self.guidance_set)
        d["checkpoint_set"] = list(self.checkpoint_set)
        return d

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def perturb_gaussian(c: Tensor, strength: float, generator: torch.Generator) -> Tensor:
    """c + strength * eps with eps ~ N(0, I). strength 0 returns c exactly
    (the draw is still consumed, keeping downstream streams aligned)."""
    if strength < 0:
        raise ValueError(f"perturbation strength must be >= 0, got {strength}")
    eps = torch.empty_like(c).normal_(generator=generator)
    if strength == 0:
        return c.clone()
    return c + strength * eps


def interpolate(c_base: Tensor, c_partner: Tensor, alpha: float) -> Tensor:
    """(1 - alpha) * base + alpha * partner; alpha=0 recovers the base."""
    if c_base.shape != c_partner.shape:
        raise ValueError(
            f"shape mismatch: {tuple(c_base.shape)} vs {tuple(c_partner.shape)}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"interpolation strength must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * c_base + alpha * c_partner


@dataclass(frozen=True)
class Provenance:
    """Everything needed to regenerate a synthetic sample."""

    source_id: str
    partner_id: str | None
    noise_strength: float
    interp_strength: float
    guidance_w: float
    checkpoint: int
    seed: int  # per-variant stream seed
    chunk: int  # denoising chunk index
    chunk_pos: int  # position inside the chunk


@dataclass(frozen=True)
class SyntheticSample:
    pixels: Tensor  # (C, H, W) float32 in [0, 1]
    label: int
    sample_id: str
    provenance: Provenance


@dataclass
class SyntheticDataset:
    samples: list[SyntheticSample]
    config: dict
    manifest_hash: str = ""

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("synthetic sample ids must be unique")
        if not self.manifest_hash:
            self.manifest_hash = stable_hash(
                {"config": self.config, "ids": ids}
            )

    def __len__(self) -> int:
        return len(self.samples)

    def as_image_dataset(self) -> ImageDataset:
        return ImageDataset(
            images=torch.stack([s.pixels for s in self.samples]),
            labels=torch.tensor([s.label for s in self.samples], dtype=torch.long),
            ids=tuple(s.sample_id for s in self.samples),
        )

    def checksum(self) -> str:
        return self.as_image_dataset().checksum()


@dataclass(frozen=True)
class _VariantPlan:
    sample_id: str
    label: int
    cond: Tensor
    z_init: Tensor
    provenance: Provenance


def _plan_variant(
    records: Sequence[EmbeddingRecord],
    by_class: dict[int, list[int]],
    cfg: PerturbationConfig,
    rec_idx: int,
    variant_idx: int,
    latent_shape: tuple[int, int, int],
    chunk: int,
    chunk_pos: int,
) -> _VariantPlan:
    """Draw one variant's choices from its own stream, in a fixed order:
    checkpoint, guidance, partner, conditioning noise, starting latent."""
    rec = records[rec_idx]
    seed = derive_seed(cfg.seed, rec.image_id, variant_idx)
    gen = torch.Generator().manual_seed(seed)

    def pick(options: Sequence):
        return options[int(torch.randint(len(options), (1,), generator=gen))]

    checkpoint = int(pick(cfg.checkpoint_set))
    w = float(pick(cfg.guidance_set))
    pool = [i for i in by_class[rec.label] if i != rec_idx]
    partner = records[pick(pool)] if pool else None

    cond = rec.vector(checkpoint)
    if partner is not None:
        cond = interpolate(cond, partner.vector(checkpoint), cfg.interp_strength)
    cond = perturb_gaussian(cond, cfg.noise_strength, gen)
    z_init = torch.empty(latent_shape).normal_(generator=gen)
    return _VariantPlan(
        sample_id=f"{rec.image_id}-v{variant_idx:03d}",
        label=rec.label,
        cond=cond,
        z_init=z_init,
        provenance=Provenance(
            source_id=rec.image_id,
            partner_id=partner.image_id if partner is not None else None,
            noise_strength=cfg.noise_strength,
            interp_strength=cfg.interp_strength,
            guidance_w=w,
            checkpoint=checkpoint,
            seed=seed,
            chunk=chunk,
            chunk_pos=chunk_pos,
        ),
    )


def _denoise_chunk(
    plans: list[_VariantPlan],
    denoiser: TrainedDenoiser,
    ae: Autoencoder,
    cfg: PerturbationConfig,
    uncond: Tensor,
    output_resolution: int,
) -> list[SyntheticSample]:
    cond = torch.stack([p.cond for p in plans])
    z = torch.stack([p.z_init for p in plans])
    w = torch.tensor([p.provenance.guidance_w for p in plans])
    u = uncond.float()[None].expand(len(plans), -1, -1)
    with torch.no_grad():
        z0 = ddim_denoise(denoiser, denoiser.schedule, cfg.steps, z, cond, u, w, cfg.x0_clamp)
        pixels = ae.decode(denoiser.denormalize(z0))
        pixels = _resize(pixels, output_resolution, "bilinear").clamp(0.0, 1.0)
        # snap to the 8-bit grid: in-memory samples equal their PNG roundtrip
        # bitwise, so cached and freshly generated runs hash identically
        pixels = torch.round(pixels * 255.0) / 255.0
    return [
        SyntheticSample(pixels=pixels[i], label=p.label, sample_id=p.sample_id,
                        provenance=p.provenance)
        for i, p in enumerate(plans)
    ]


def generate_variants(
    records: Sequence[EmbeddingRecord],
    denoiser: TrainedDenoiser,
    ae: Autoencoder,
    cfg: PerturbationConfig,
    uncond: Tensor,
    output_resolution: int,
) -> SyntheticDataset:
    """Produce cfg.variants_per_embedding samples per record.

    ``uncond`` is the unconditional guidance branch — the mean embedding by
    default, or the pretrained null token under the ablation. Per-sample
    denoising failures are logged with their provenance and skipped; the run
    continues.
    """
    if not records:
        raise ValueError("no embedding records to sample from")
    latent_res = output_resolution // ae.downsample_factor
    latent_shape = (ae.latent_channels, latent_res, latent_res)
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(i)

    flat = [(r, v) for r in range(len(records)) for v in range(cfg.variants_per_embedding)]
    samples: list[SyntheticSample] = []
    failed = 0
    for chunk_idx, (start, end) in enumerate(chunk_ranges(len(flat), cfg.chunk_size)):
        plans = [
            _plan_variant(records, by_class, cfg, r, v, latent_shape, chunk_idx, pos)
            for pos, (r, v) in enumerate(flat[start:end])
        ]
        try:
            samples.extend(
                _denoise_chunk(plans, denoiser, ae, cfg, uncond, output_resolution)
            )
        except NonFiniteError:
            for p in plans:
                try:
                    samples.extend(
                        _denoise_chunk([p], denoiser, ae, cfg, uncond, output_resolution)
                    )
                except NonFiniteError as exc:
                    failed += 1
                    logger.warning("variant %s failed: %s (%s)", p.sample_id, exc, p.provenance)
    logger.info(
        "generated %d synthetic samples from %d records (%d failed)",
        len(samples), len(records), failed,
    )
    return SyntheticDataset(samples=samples, config=cfg.to_dict())


def regenerate_chunk(
    records: Sequence[EmbeddingRecord],
    denoiser: TrainedDenoiser,
    ae: Autoencoder,
    cfg: PerturbationConfig,
    uncond: Tensor,
    output_resolution: int,
    chunk_index: int,
) -> list[SyntheticSample]:
    """Bitwise re-execution of one denoising chunk.

    Chunk membership is a pure function of (records order, cfg), so the
    stored provenance's chunk index pins down exactly which samples share a
    forward pass; re-running them together reproduces the originals bit for
    bit."""
    latent_res = output_resolution // ae.downsample_factor
    latent_shape = (ae.latent_channels, latent_res, latent_res)
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(i)
    flat = [(r, v) for r in range(len(records)) for v in range(cfg.variants_per_embedding)]
    ranges = chunk_ranges(len(flat), cfg.chunk_size)
    if not 0 <= chunk_index < len(ranges):
        raise IndexError(f"chunk {chunk_index} out of range (run has {len(ranges)} chunks)")
    start, end = ranges[chunk_index]
    plans = [
        _plan_variant(records, by_class, cfg, r, v, latent_shape, chunk_index, pos)
        for pos, (r, v) in enumerate(flat[start:end])
    ]
    return _denoise_chunk(plans, denoiser, ae, cfg, uncond, output_resolution)


# ---------------------------------------------------------------------------
# Disk format: PNG directory + CSV manifest + JSON config sidecar

_CSV_COLUMNS = (
    "sample_id", "source_id", "partner_id", "label", "noise_strength",
    "interp_strength", "guidance_w", "checkpoint", "seed", "chunk", "chunk_pos",
)


def save_synthetic(ds: SyntheticDataset, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in ds.samples:
        u8 = (s.pixels.clamp(0, 1) * 255.0).round().to(torch.uint8)
        Image.fromarray(u8.permute(1, 2, 0).numpy(), mode="RGB").save(
            out_dir / f"{s.sample_id}.png"
        )
        p = s.provenance
        rows.append(
            (s.sample_id, p.source_id, p.partner_id or "", s.label, p.noise_strength,
             p.interp_strength, p.guidance_w, p.checkpoint, p.seed, p.chunk, p.chunk_pos)
        )
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        writer.writerows(rows)
    atomic_write_json(
        out_dir / "generation.json",
        {"config": ds.config, "manifest_hash": ds.manifest_hash, "checksum": ds.checksum()},
    )
    return out_dir


def load_synthetic(in_dir: Path | str) -> SyntheticDataset:
    in_dir = Path(in_dir)
    with open(in_dir / "generation.json") as fh:
        meta = json.load(fh)
    samples = []
    with open(in_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            with Image.open(in_dir / f"{row['sample_id']}.png") as im:
                arr = torch.frombuffer(
                    bytearray(im.convert("RGB").tobytes()), dtype=torch.uint8
                ).reshape(im.height, im.width, 3)
            samples.append(
                SyntheticSample(
                    pixels=arr.permute(2, 0, 1).float() / 255.0,
                    label=int(row["label"]),
                    sample_id=row["sample_id"],
                    provenance=Provenance(
                        source_id=row["source_id"],
                        partner_id=row["partner_id"] or None,
                        noise_strength=float(row["noise_strength"]),
                        interp_strength=float(row["interp_strength"]),
                        guidance_w=float(row["guidance_w"]),
                        checkpoint=int(row["checkpoint"]),
                        seed=int(row["seed"]),
                        chunk=int(row["chunk"]),
                        chunk_pos=int(row["chunk_pos"]),
                    ),
                )
            )
    return SyntheticDataset(
        samples=samples, config=meta["config"], manifest_hash=meta["manifest_hash"]
    )
