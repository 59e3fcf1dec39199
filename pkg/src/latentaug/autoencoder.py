"""Latent-space encoder/decoder pair and the encode/decode dataset transform.

A small convolutional VAE with a near-zero KL weight (1e-6), mirroring the
continuous-latent regularization choice: the KL term only keeps the latent
distribution from drifting, reconstruction does the work. ``encode`` is
deterministic (returns the posterior mean); sampling happens only inside
training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import ImageDataset
from .diffusion import NonFiniteError, _param_init_rng
from .utils import derive_seed, stable_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderConfig:
    identity: bool = False
    in_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 2  # power of 2
    base_channels: int = 32
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


class IdentityAutoencoder(nn.Module):
    """f=1 passthrough: latent equals pixels. Useful for isolating the
    diffusion stack from reconstruction error in tests."""

    downsample_factor = 1

    def __init__(self, channels: int = 3):
        super().__init__()
        self.in_channels = channels
        self.latent_channels = channels
        self.config_hash = stable_hash({"identity": True, "channels": channels})

    def encode(self, x: Tensor) -> Tensor:
        return x.clone()

    def decode(self, z: Tensor) -> Tensor:
        return z.clamp(0.0, 1.0)


class ConvAutoencoder(nn.Module):
    """Convolutional encoder/decoder with a stride-2 stage per factor of 2."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        self.in_channels = config.in_channels
        self.latent_channels = config.latent_channels
        self.downsample_factor = config.downsample_factor
        self.config_hash = config.config_hash()
        stages = int(np.log2(config.downsample_factor))
        b = config.base_channels

        enc: list[nn.Module] = [nn.Conv2d(config.in_channels, b, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            enc += [nn.Conv2d(b, b, 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(b, b, 3, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(b, 2 * config.latent_channels, 3, padding=1)]  # -> (mu, logvar)
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, b, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            dec += [nn.ConvTranspose2d(b, b, 2, stride=2), nn.SiLU()]
        dec += [nn.Conv2d(b, b, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(b, config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def _check_divisible(self, x: Tensor) -> None:
        f = self.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(
                f"image dims {tuple(x.shape[-2:])} not divisible by downsample factor {f}"
            )

    def posterior(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_divisible(x)
        mu, logvar = self.encoder(x).chunk(2, dim=-3)
        return mu, logvar

    @torch.no_grad()
    def encode(self, x: Tensor) -> Tensor:
        """Deterministic latent: the posterior mean."""
        return self.posterior(x)[0]

    def decode_raw(self, z: Tensor) -> Tensor:
        if z.shape[-3] != self.latent_channels:
            raise ValueError(
                f"latent has {z.shape[-3]} channels, autoencoder expects {self.latent_channels}"
            )
        return self.decoder(z)

    @torch.no_grad()
    def decode(self, z: Tensor) -> Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)


Autoencoder = ConvAutoencoder | IdentityAutoencoder


def train_autoencoder(
    images: Tensor, config: AutoencoderConfig
) -> tuple[Autoencoder, dict]:
    """Train the VAE on (N, C, H, W) pixels in [0, 1].

    Loss = reconstruction MSE + kl_weight * KL(q(z|x) || N(0, I)). Returns
    the model and a history dict with per-epoch reconstruction MSE.
    """
    if config.identity:
        return IdentityAutoencoder(config.in_channels), {"epoch_recon": [], "trained": False}
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "ae-init"))
    with _param_init_rng(gen):
        ae = ConvAutoencoder(config)
    opt = torch.optim.Adam(ae.parameters(), lr=config.lr)
    data_gen = torch.Generator().manual_seed(derive_seed(config.seed, "ae-data"))

    n = images.shape[0]
    epoch_recon: list[float] = []
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=data_gen)
        recons = []
        for start in range(0, n, config.batch_size):
            x = images[perm[start : start + config.batch_size]]
            mu, logvar = ae.posterior(x)
            logvar = logvar.clamp(-12, 8)
            z = mu + torch.exp(0.5 * logvar) * torch.empty_like(mu).normal_(generator=data_gen)
            recon = F.mse_loss(ae.decode_raw(z), x)
            kl = 0.5 * torch.mean(mu**2 + logvar.exp() - 1.0 - logvar)
            loss = recon + config.kl_weight * kl
            if not torch.isfinite(loss):
                raise NonFiniteError(f"autoencoder loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            recons.append(float(recon.detach()))
        epoch_recon.append(float(np.mean(recons)))
    logger.info(
        "autoencoder trained %d epochs, recon %.5f -> %.5f",
        config.epochs,
        epoch_recon[0],
        epoch_recon[-1],
    )
    ae.eval()
    return ae, {"epoch_recon": epoch_recon, "trained": True}


def _resize(images: Tensor, size: int, kernel: str) -> Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    if kernel not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resize kernel {kernel!r}")
    return F.interpolate(
        images, size=(size, size), mode=kernel, **({"align_corners": False} if kernel == "bilinear" else {})
    )


def encode_dataset(ae: Autoencoder, dataset: ImageDataset) -> Tensor:
    return ae.encode(dataset.images)


def vae_roundtrip_dataset(
    ae: Autoencoder,
    dataset: ImageDataset,
    work_resolution: int,
    kernel: str = "bilinear",
) -> ImageDataset:
    """Resize to the working resolution, encode, decode, resize back.

    ids, labels, counts, and the original resolution are preserved exactly;
    only pixels change. Measures the information the autoencoder alone loses.
    """
    original = dataset.images.shape[-1]
    work = _resize(dataset.images, work_resolution, kernel)
    recon = ae.decode(ae.encode(work))
    back = _resize(recon, original, kernel).clamp(0.0, 1.0)
    return ImageDataset(images=back, labels=dataset.labels.clone(), ids=dataset.ids)
