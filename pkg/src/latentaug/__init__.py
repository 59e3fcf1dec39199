"""latentaug: augment small image datasets by inverting each image into the
conditioning space of a locally trained latent diffusion model, then sampling
perturbed variants of those conditioning vectors.

Submodules
----------
- ``data``: toy shape datasets with a controllable domain shift + PNG ingest
- ``autoencoder``: small convolutional VAE mapping pixels to latents
- ``diffusion``: noise schedule, denoiser pretraining, guided DDIM sampling
- ``inversion``: per-image conditioning-vector optimization (frozen denoiser)
- ``sampling``: embedding perturbation/interpolation -> synthetic datasets
- ``metrics``: FID and precision/recall/density/coverage
- ``downstream``: classifier training on real/synthetic mixes, augmentations
- ``checkpoints``: checksummed tensor persistence
- ``config`` / ``pipeline`` / ``report`` / ``cli``: experiment orchestration
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
