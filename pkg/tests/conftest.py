"""Shared fixtures: tiny stacks for unit tests, one desk-scale trained stack
for the acceptance suite, and a wall-time registry so runtime-bounded
acceptance checks can account for fixture build time they depend on."""

from __future__ import annotations

import time

import pytest
import torch

from latentaug.autoencoder import AutoencoderConfig, train_autoencoder
from latentaug.data import ToyDataSpec, make_toy_datasets
from latentaug.diffusion import DenoiserTrainConfig, default_schedule, train_denoiser
from latentaug.inversion import InversionConfig, invert_dataset

torch.set_num_threads(1)

# Acceptance-stack constants (calibrated on the 1-core reference box; see
# tests/test_acceptance.py for the criteria they serve).
DESK = {
    "spec": dict(n_pretrain=600, n_target=500, n_test=300, resolution=32, shift=0.5, seed=0),
    "ae_epochs": 20,
    "denoiser_epochs": 40,
    "invert_steps": 500,
    "invert_checkpoints": (125, 250, 500),
    "guard_draws": 64,
}

FIXTURE_TIMES: dict[str, float] = {}


@pytest.fixture(scope="session")
def fixture_times() -> dict[str, float]:
    return FIXTURE_TIMES


def _timed(name: str, fn):
    start = time.monotonic()
    out = fn()
    FIXTURE_TIMES[name] = time.monotonic() - start
    return out


# ---------------------------------------------------------------------------
# Tiny stack: 16x16 images, minimal training — for unit/integration tests


@pytest.fixture(scope="session")
def tiny_spec() -> ToyDataSpec:
    return ToyDataSpec(n_pretrain=90, n_target=45, n_test=30, resolution=16, shift=0.5, seed=0)


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return make_toy_datasets(tiny_spec)


@pytest.fixture(scope="session")
def tiny_ae(tiny_data):
    pretrain, _, _ = tiny_data
    ae, _ = _timed(
        "tiny_ae",
        lambda: train_autoencoder(pretrain.images, AutoencoderConfig(epochs=3, seed=0)),
    )
    return ae


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_data, tiny_ae):
    pretrain, _, _ = tiny_data
    latents = tiny_ae.encode(pretrain.images)
    bundle, _ = _timed(
        "tiny_denoiser",
        lambda: train_denoiser(
            latents, pretrain.labels, default_schedule(), DenoiserTrainConfig(epochs=4, seed=0)
        ),
    )
    return bundle


@pytest.fixture(scope="session")
def tiny_records(tiny_data, tiny_ae, tiny_denoiser):
    _, target, _ = tiny_data
    subset = target.subset(range(12))
    config = InversionConfig(
        steps=40, checkpoints=(20, 40), chunk_size=8, guard_draws=16, seed=0
    )
    records, failures = _timed(
        "tiny_records",
        lambda: invert_dataset(tiny_denoiser, subset, tiny_ae, config),
    )
    assert not failures
    return subset, config, records


# ---------------------------------------------------------------------------
# Desk stack: acceptance-scale datasets and trained models (built once)


@pytest.fixture(scope="session")
def desk_data():
    return make_toy_datasets(ToyDataSpec(**DESK["spec"]))


@pytest.fixture(scope="session")
def desk_ae(desk_data):
    """(autoencoder, training history) at acceptance scale."""
    pretrain, _, _ = desk_data
    return _timed(
        "desk_ae",
        lambda: train_autoencoder(
            pretrain.images, AutoencoderConfig(epochs=DESK["ae_epochs"], seed=0)
        ),
    )


@pytest.fixture(scope="session")
def desk_denoiser(desk_data, desk_ae):
    pretrain, _, _ = desk_data
    latents = desk_ae[0].encode(pretrain.images)
    bundle, history = _timed(
        "desk_denoiser",
        lambda: train_denoiser(
            latents,
            pretrain.labels,
            default_schedule(),
            DenoiserTrainConfig(epochs=DESK["denoiser_epochs"], seed=0),
        ),
    )
    bundle.train_history = history  # inspected by the loss-curve check
    return bundle


@pytest.fixture(scope="session")
def desk_records(desk_data, desk_ae, desk_denoiser):
    """Warm-start inversion of the full 500-image target set."""
    _, target, _ = desk_data
    config = InversionConfig(
        steps=DESK["invert_steps"],
        checkpoints=DESK["invert_checkpoints"],
        guard_draws=DESK["guard_draws"],
        warm_start=True,
        seed=0,
    )
    records, failures = _timed(
        "desk_records",
        lambda: invert_dataset(desk_denoiser, target, desk_ae[0], config),
    )
    assert not failures
    return config, records
