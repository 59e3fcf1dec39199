"""Denoising diffusion in latent space.

Forward process q(z_t | z_0) = N(sqrt(abar_t) z_0, (1 - abar_t) I) with a
linear beta discretization, the epsilon-prediction training loss, guided
noise prediction

    eps_hat = (1 + w) * eps(z_t, t, c) - w * eps(z_t, t, uncond),

and a deterministic DDIM sampler (eta = 0) over an even subsample of the
schedule. Determinism is deliberate: samples are reproducible from their
seed, and sample diversity comes from the starting noise alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .nets import ClassConditioner, CondUNet, DenoiserArch
from .utils import derive_seed, stable_hash

logger = logging.getLogger(__name__)

# Any callable with the (z_t, t, cond) -> predicted-noise signature works as a
# denoiser; tests use analytic oracles, the pipeline uses CondUNet.
DenoiserFn = Callable[[Tensor, Tensor | int, Tensor], Tensor]


class NonFiniteError(RuntimeError):
    """Raised when a NaN/Inf shows up mid-computation; message carries the step."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion discretization.

    betas has shape (T,); alpha_bars has shape (T + 1,) indexed by t = 0..T
    with alpha_bars[0] = 1. Stored in float64 so the cumulative-product
    identity holds to 1e-12 relative.
    """

    betas: Tensor
    alpha_bars: Tensor

    def __post_init__(self):
        if self.betas.dim() != 1 or self.betas.numel() < 1:
            raise ValueError("betas must be a non-empty 1-D tensor")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if self.alpha_bars.shape != (self.betas.numel() + 1,):
            raise ValueError("alpha_bars must have length T + 1")
        if abs(float(self.alpha_bars[0]) - 1.0) > 1e-12:
            raise ValueError("alpha_bars[0] must be 1")
        if not (self.alpha_bars[1:] < self.alpha_bars[:-1]).all():
            raise ValueError("alpha_bars must be strictly decreasing")
        if float(self.alpha_bars[-1]) <= 0:
            raise ValueError("alpha_bars[T] must stay positive")

    @property
    def T(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t: Tensor | int) -> Tensor:
        return self.alpha_bars[t]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_min": float(self.betas[0]),
            "beta_max": float(self.betas[-1]),
        }


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_min to beta_max over T steps."""
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


# Desk-scale default; the paper-scale variant (T=1000) is a config change away.
DEFAULT_T = 200


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    return build_schedule(T, 1e-4, 0.02)


def forward_noise(z0: Tensor, t: Tensor | int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Closed-form noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_idx = torch.as_tensor(t, dtype=torch.long)
    if ((t_idx < 1) | (t_idx > sched.T)).any():
        raise ValueError(f"t must lie in [1, {sched.T}]")
    abar = sched.alpha_bars[t_idx].to(z0.dtype)
    if abar.dim() > 0:  # per-sample timesteps on a batched z0
        abar = abar.reshape(-1, *([1] * (z0.dim() - 1)))
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def ldm_loss(
    denoiser: DenoiserFn,
    z0: Tensor,
    cond: Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> Tensor:
    """Monte-Carlo denoising objective: E || eps - eps_theta(z_t, t, c) ||^2 / numel.

    Draws one (t, eps) pair per sample: t uniform on {1..T}, eps standard
    normal. Differentiable w.r.t. cond and denoiser parameters.
    """
    batched = z0.dim() == 4
    n = z0.shape[0] if batched else 1
    t = torch.randint(1, sched.T + 1, (n,), generator=generator)
    if not batched:
        t = int(t[0])
    eps = torch.empty_like(z0).normal_(generator=generator)
    z_t = forward_noise(z0, t, eps, sched)
    pred = denoiser(z_t, t, cond)
    if not torch.isfinite(pred).all():
        bad = t if not batched else sorted(set(t[(~torch.isfinite(pred)).flatten(1).any(1)].tolist()))
        raise NonFiniteError(f"denoiser output non-finite at step(s) {bad}")
    return torch.mean((eps - pred) ** 2)


def mc_loss_estimate(
    denoiser: DenoiserFn,
    z0: Tensor,
    cond: Tensor,
    sched: NoiseSchedule,
    n_draws: int = 256,
    seed: int = 0,
    chunk: int = 64,
) -> float:
    """Denoising loss for one latent under a frozen set of (t, eps) draws.

    The draws depend only on (seed, n_draws, shapes), so two conditioning
    vectors can be compared on identical noise — the estimator itself adds
    no sampling variance to the comparison.
    """
    if z0.dim() != 3:
        raise ValueError("mc_loss_estimate expects a single (C, H, W) latent")
    gen = torch.Generator().manual_seed(derive_seed(seed, "mc-loss"))
    t_all = torch.randint(1, sched.T + 1, (n_draws,), generator=gen)
    eps_all = torch.empty((n_draws, *z0.shape)).normal_(generator=gen)
    total = 0.0
    with torch.no_grad():
        for start in range(0, n_draws, chunk):
            t = t_all[start : start + chunk]
            eps = eps_all[start : start + chunk]
            z_t = forward_noise(z0[None].expand(len(t), -1, -1, -1), t, eps, sched)
            pred = denoiser(z_t, t, cond[None].expand(len(t), -1, -1))
            total += float(torch.sum((eps - pred) ** 2)) / z0.numel()
    return total / n_draws


def guided_epsilon(
    denoiser: DenoiserFn,
    z_t: Tensor,
    t: Tensor | int,
    cond: Tensor,
    uncond: Tensor,
    w: float | Tensor,
) -> Tensor:
    """Classifier-free guided prediction (1 + w) eps_c - w eps_u.

    w may be a per-sample tensor on a batched z_t. At w = 0 the conditional
    branch is returned as-is — exact, and the unconditional evaluation is
    skipped entirely.
    """
    eps_c = denoiser(z_t, t, cond)
    if isinstance(w, Tensor):
        if (w == 0).all():
            return eps_c
        w = w.reshape(-1, *([1] * (z_t.dim() - 1))).to(z_t.dtype)
    elif w == 0:
        return eps_c
    eps_u = denoiser(z_t, t, uncond)
    return (1.0 + w) * eps_c - w * eps_u


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling knobs: guidance strength w, inference step count, and the
    conditioning used for the unconditional branch."""

    w: float
    steps: int
    unconditional: Tensor
    # clamp of the intermediate x0 prediction; keeps underfit toy models from
    # diverging. None disables (paper-scale setting).
    x0_clamp: float | None = 3.0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance strength w must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly subsample {1..T}, descending, always starting at T."""
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    if steps == 1:
        return [T]
    return [int(round(v)) for v in np.linspace(T, 1, steps)]


def ddim_denoise(
    denoiser: DenoiserFn,
    sched: NoiseSchedule,
    steps: int,
    z: Tensor,
    cond: Tensor,
    uncond: Tensor,
    w: float | Tensor,
    x0_clamp: float | None = 3.0,
) -> Tensor:
    """Run the deterministic DDIM recursion on an explicit starting batch.

    z: (B, C, H, W) starting noise; cond/uncond: (B, L, D); w scalar or
    per-sample (B,). Each step predicts x0, optionally clamps it, and steps
    to the next (smaller) timestep; the final step lands on abar_0 = 1.
    """
    taus = sampling_timesteps(sched.T, steps)
    for i, t in enumerate(taus):
        a_t = float(sched.alpha_bars[t])
        a_prev = float(sched.alpha_bars[taus[i + 1] if i + 1 < len(taus) else 0])
        eps_hat = guided_epsilon(denoiser, z, t, cond, uncond, w)
        z0_pred = (z - (1.0 - a_t) ** 0.5 * eps_hat) / a_t**0.5
        if x0_clamp is not None:
            z0_pred = z0_pred.clamp(-x0_clamp, x0_clamp)
        z = a_prev**0.5 * z0_pred + (1.0 - a_prev) ** 0.5 * eps_hat
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"non-finite latent at sampler step {i} (t={t})")
    return z


def sample(
    denoiser: DenoiserFn,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    cond: Tensor,
    shape: Sequence[int],
    generator: torch.Generator,
    initial: Tensor | None = None,
) -> Tensor:
    """Deterministic DDIM sampling from starting noise drawn off ``generator``
    (or passed explicitly as ``initial``).

    cond of shape (L, D) yields a single latent of ``shape``; (B, L, D)
    yields a batch (B, *shape). Arithmetic runs in cond's dtype, so a
    float64 cond gives a float64 trajectory.
    """
    batched = cond.dim() == 3
    b = cond.shape[0] if batched else 1
    if initial is None:
        z = torch.empty((b, *shape), dtype=cond.dtype).normal_(generator=generator)
    else:
        z = initial if initial.dim() == 4 else initial[None]
    c = cond if batched else cond[None]
    uncond = guidance.unconditional
    u = uncond[None].expand(b, -1, -1) if uncond.dim() == 2 else uncond
    z = ddim_denoise(denoiser, sched, guidance.steps, z, c, u, guidance.w, guidance.x0_clamp)
    return z if batched else z[0]


@dataclass(frozen=True)
class DenoiserTrainConfig:
    arch: DenoiserArch = DenoiserArch()
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0
    cond_dropout: float = 0.1
    # standardize input latents to zero mean / unit scale (global scalars,
    # recorded in the bundle) so the sampler's N(0, 1) start matches training
    normalize_latents: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["arch"] = self.arch.to_dict()
        return d

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


@dataclass
class TrainedDenoiser:
    """A trained noise predictor plus its learned class/null tokens, schedule,
    and the latent standardization it was trained under."""

    unet: CondUNet
    conditioner: ClassConditioner
    schedule: NoiseSchedule
    config_hash: str
    step_count: int
    latent_shift: float = 0.0
    latent_scale: float = 1.0

    def __call__(self, z_t: Tensor, t: Tensor | int, cond: Tensor) -> Tensor:
        return self.unet(z_t, t, cond)

    def normalize(self, z: Tensor) -> Tensor:
        """Autoencoder latent -> the standardized space the denoiser works in."""
        return (z - self.latent_shift) / self.latent_scale

    def denormalize(self, z: Tensor) -> Tensor:
        return z * self.latent_scale + self.latent_shift

    def eval_mode(self) -> "TrainedDenoiser":
        self.unet.eval()
        self.conditioner.eval()
        return self


def train_denoiser(
    latents: Tensor,
    labels: Tensor,
    sched: NoiseSchedule,
    config: DenoiserTrainConfig,
) -> tuple[TrainedDenoiser, dict]:
    """Pretrain the conditional denoiser on encoded latents.

    Per-class conditioning tokens are learned jointly; with probability
    ``cond_dropout`` a sample's tokens are swapped for the shared null token,
    which is what later powers the unconditional guidance branch.

    Returns the trained bundle and a history dict with per-epoch losses.
    """
    if latents.numel() == 0 or latents.shape[0] == 0:
        raise ValueError("empty training set")
    if config.normalize_latents:
        shift, scale = float(latents.mean()), max(float(latents.std()), 1e-8)
    else:
        shift, scale = 0.0, 1.0
    latents = (latents - shift) / scale
    n = latents.shape[0]
    num_classes = int(labels.max().item()) + 1
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "denoiser-init"))
    with _param_init_rng(gen):
        unet = CondUNet(config.arch)
        conditioner = ClassConditioner(
            num_classes, config.arch.cond_tokens, config.arch.cond_dim
        )
    opt = torch.optim.AdamW(
        list(unet.parameters()) + list(conditioner.parameters()),
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    data_gen = torch.Generator().manual_seed(derive_seed(config.seed, "denoiser-data"))

    epoch_losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=data_gen)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            z0 = latents[idx]
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=data_gen)
            eps = torch.empty_like(z0).normal_(generator=data_gen)
            drop = (
                torch.rand(len(idx), generator=data_gen) < config.cond_dropout
                if config.cond_dropout > 0
                else None
            )
            cond = conditioner(labels[idx], drop)
            pred = unet(forward_noise(z0, t, eps, sched), t, cond)
            loss = torch.mean((eps - pred) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"training loss non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        if epoch == 0 or (epoch + 1) % 5 == 0 or epoch == config.epochs - 1:
            logger.info("denoiser epoch %d/%d loss %.4f", epoch + 1, config.epochs, epoch_losses[-1])

    bundle = TrainedDenoiser(
        unet=unet,
        conditioner=conditioner,
        schedule=sched,
        config_hash=config.config_hash(),
        step_count=step,
        latent_shift=shift,
        latent_scale=scale,
    ).eval_mode()
    history = {"epoch_losses": epoch_losses, "steps": step}
    return bundle, history


class _param_init_rng:
    """Route nn.Module default initializers through an explicit seed."""

    def __init__(self, generator: torch.Generator):
        self.generator = generator

    def __enter__(self):
        self.state = torch.random.get_rng_state()
        torch.random.set_rng_state(self.generator.get_state())
        return self

    def __exit__(self, *exc):
        self.generator.set_state(torch.random.get_rng_state())
        torch.random.set_rng_state(self.state)
        return False
