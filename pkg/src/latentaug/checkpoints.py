"""Model persistence: a raw little-endian binary blob plus a JSON header.

The header carries the architecture/config needed to rebuild the module and
an index of (name, shape, dtype, offset) entries into the blob, sorted by
parameter name. Typed save/load pairs for the denoiser bundle, autoencoder,
and classifier sit on top of the generic functions.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .utils import atomic_write_bytes, atomic_write_json, hash_bytes, read_json

FORMAT = "latentaug-ckpt-v1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
}


def save_state(path: Path | str, state: Mapping[str, Tensor], header: dict) -> None:
    """Write ``state`` to path.bin and the header (plus index) to path.json."""
    path = Path(path)
    blob = bytearray()
    index = []
    for name in sorted(state):
        tensor = state[name].detach().cpu()
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise TypeError(f"unsupported tensor dtype {tensor.dtype} for {name!r}")
        data = tensor.numpy().astype(dtype).tobytes()
        index.append(
            {"name": name, "shape": list(tensor.shape), "dtype": dtype, "offset": len(blob)}
        )
        blob.extend(data)
    blob = bytes(blob)
    atomic_write_bytes(path.with_suffix(".bin"), blob)
    atomic_write_json(
        path.with_suffix(".json"),
        {
            "format": FORMAT,
            "blob_bytes": len(blob),
            "blob_sha256": hash_bytes(blob),
            "params": index,
            **header,
        },
    )


def load_state(path: Path | str) -> tuple[dict[str, Tensor], dict]:
    """Inverse of save_state; verifies blob length and checksum."""
    path = Path(path)
    header = read_json(path.with_suffix(".json"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != header["blob_bytes"] or hash_bytes(blob) != header["blob_sha256"]:
        raise ValueError(f"{path}: blob does not match header (truncated or corrupt)")
    state = {}
    for entry in header["params"]:
        arr = np.frombuffer(
            blob, dtype=entry["dtype"], count=int(np.prod(entry["shape"], dtype=np.int64)),
            offset=entry["offset"],
        )
        state[entry["name"]] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
    return state, header


def state_checksum(state: Mapping[str, Tensor]) -> str:
    parts = []
    for name in sorted(state):
        parts.append(name.encode() + state[name].detach().cpu().numpy().tobytes())
    return hash_bytes(b"".join(parts))


def file_checksum(path: Path | str) -> str:
    """Blob digest of a saved checkpoint, read from its header (no blob IO)."""
    header = read_json(Path(path).with_suffix(".json"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    return header["blob_sha256"]


# ---------------------------------------------------------------------------
# Typed wrappers


def save_denoiser(path: Path | str, bundle) -> None:
    from .diffusion import TrainedDenoiser  # noqa: F401 (typing aid)

    state = {f"unet.{k}": v for k, v in bundle.unet.state_dict().items()}
    state.update({f"cond.{k}": v for k, v in bundle.conditioner.state_dict().items()})
    save_state(
        path,
        state,
        {
            "kind": "denoiser",
            "arch": bundle.unet.arch.to_dict(),
            "num_classes": bundle.conditioner.num_classes,
            "schedule": bundle.schedule.to_dict(),
            "config_hash": bundle.config_hash,
            "step_count": bundle.step_count,
            "latent_shift": bundle.latent_shift,
            "latent_scale": bundle.latent_scale,
        },
    )


def load_denoiser(path: Path | str):
    from .diffusion import TrainedDenoiser, build_schedule
    from .nets import ClassConditioner, CondUNet, DenoiserArch

    state, header = load_state(path)
    if header.get("kind") != "denoiser":
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {header.get('kind')!r}")
    arch = DenoiserArch.from_dict(header["arch"])
    unet = CondUNet(arch)
    unet.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("unet.")})
    conditioner = ClassConditioner(header["num_classes"], arch.cond_tokens, arch.cond_dim)
    conditioner.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("cond.")})
    sched = build_schedule(
        header["schedule"]["T"], header["schedule"]["beta_min"], header["schedule"]["beta_max"]
    )
    return TrainedDenoiser(
        unet=unet,
        conditioner=conditioner,
        schedule=sched,
        config_hash=header["config_hash"],
        step_count=header["step_count"],
        latent_shift=header.get("latent_shift", 0.0),
        latent_scale=header.get("latent_scale", 1.0),
    ).eval_mode()


def save_autoencoder(path: Path | str, ae) -> None:
    from .autoencoder import IdentityAutoencoder

    if isinstance(ae, IdentityAutoencoder):
        save_state(path, {}, {"kind": "autoencoder", "identity": True,
                              "channels": ae.in_channels})
        return
    save_state(
        path,
        ae.state_dict(),
        {"kind": "autoencoder", "identity": False, "config": ae.config.to_dict()},
    )


def load_autoencoder(path: Path | str):
    from .autoencoder import AutoencoderConfig, ConvAutoencoder, IdentityAutoencoder

    state, header = load_state(path)
    if header.get("kind") != "autoencoder":
        raise ValueError(f"{path}: expected an autoencoder checkpoint, got {header.get('kind')!r}")
    if header["identity"]:
        return IdentityAutoencoder(header["channels"])
    ae = ConvAutoencoder(AutoencoderConfig(**header["config"]))
    ae.load_state_dict(state)
    ae.eval()
    return ae


def save_classifier(path: Path | str, model) -> None:
    save_state(
        path,
        model.state_dict(),
        {"kind": "classifier", "arch": model.arch_id, "num_classes": model.num_classes,
         "in_channels": model.in_channels},
    )


def load_classifier_module(path: Path | str) -> tuple[dict[str, Tensor], dict]:
    state, header = load_state(path)
    if header.get("kind") != "classifier":
        raise ValueError(f"{path}: expected a classifier checkpoint, got {header.get('kind')!r}")
    return state, header
