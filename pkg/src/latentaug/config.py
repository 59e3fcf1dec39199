"""Experiment configuration: one strict JSON document covering every phase.

Unknown keys are hard errors with their dotted path — a typo in a sweep
config silently falling back to a default would corrupt every downstream
comparison. Values are validated by the per-module config dataclasses.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .autoencoder import AutoencoderConfig
from .data import ToyDataSpec
from .diffusion import DenoiserTrainConfig
from .downstream import ClassifierConfig
from .inversion import InversionConfig
from .nets import DenoiserArch
from .sampling import PerturbationConfig
from .utils import atomic_write_text, read_json, stable_hash

PHASES = ("autoencoder", "denoiser", "inversion", "generation", "metrics", "classifier")


class ConfigError(ValueError):
    """Malformed experiment config; message carries the offending key path."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass(frozen=True)
class MetricsPhaseConfig:
    k: int = 3
    # "raw-pixels", "penultimate-pretrain" (train a feature classifier on the
    # pretraining split), or "penultimate:<checkpoint path>"
    extractor: str = "penultimate-pretrain"
    # metrics-only mode: score two existing image directories instead of the
    # run's own target/synthetic pair
    real_dir: str | None = None
    generated_dir: str | None = None
    feature_epochs: int = 30  # feature-classifier budget for penultimate-pretrain


@dataclass(frozen=True)
class SweepConfig:
    """Axes expanded by sweep_configs(); empty axes mean no sweep."""

    noise_strengths: tuple[float, ...] = ()
    interp_strengths: tuple[float, ...] = ()
    guidance_strengths: tuple[float, ...] = ()
    variant_counts: tuple[int, ...] = ()
    mix_ratios: tuple[tuple[int, int], ...] = ()


# field name -> nested builder, applied recursively by _build
_NESTED: dict[type, dict[str, type]] = {
    DenoiserTrainConfig: {"arch": DenoiserArch},
}


def _build(cls: type, payload: dict, path: str):
    """Construct dataclass ``cls`` from ``payload``, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in payload.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
        nested = _NESTED.get(cls, {}).get(key)
        if nested is not None and isinstance(value, dict):
            value = _build(nested, value, f"{path}.{key}" if path else key)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "toy"
    seed: int = 0
    phases: tuple[str, ...] = PHASES
    data: ToyDataSpec = field(default_factory=ToyDataSpec)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    metrics: MetricsPhaseConfig = field(default_factory=MetricsPhaseConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    # unconditional branch for generation: "mean-embedding" or "null-token"
    unconditional: str = "mean-embedding"

    def __post_init__(self):
        bad = [p for p in self.phases if p not in PHASES]
        if bad:
            raise ConfigError(f"unknown phases {bad}; valid: {list(PHASES)}")
        if self.unconditional not in ("mean-embedding", "null-token"):
            raise ConfigError(
                f"unconditional must be 'mean-embedding' or 'null-token', "
                f"got {self.unconditional!r}"
            )

    _SECTIONS = {
        "data": ToyDataSpec,
        "autoencoder": AutoencoderConfig,
        "schedule": ScheduleConfig,
        "denoiser": DenoiserTrainConfig,
        "inversion": InversionConfig,
        "perturbation": PerturbationConfig,
        "metrics": MetricsPhaseConfig,
        "classifier": ClassifierConfig,
        "sweep": SweepConfig,
    }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
        kwargs: dict[str, Any] = {}
        for key, value in payload.items():
            section = cls._SECTIONS.get(key)
            if section is not None:
                kwargs[key] = _build(section, value, key)
            elif key in ("name", "seed", "phases", "unconditional"):
                kwargs[key] = tuple(value) if isinstance(value, list) else value
            else:
                raise ConfigError(f"unknown config key {key}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentConfig":
        try:
            payload = read_json(Path(path))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        def undo(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: undo(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return [undo(v) for v in obj]
            if isinstance(obj, list):
                return [undo(v) for v in obj]
            return obj

        return {
            "name": self.name,
            "seed": self.seed,
            "phases": list(self.phases),
            "unconditional": self.unconditional,
            **{k: undo(getattr(self, k)) for k in self._SECTIONS},
        }

    def save(self, path: Path | str) -> None:
        atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def reseed(config: ExperimentConfig, master: int) -> ExperimentConfig:
    """Derive every section's seed from one master seed.

    Distinct per-section streams keep e.g. data generation independent of
    inversion draws; the classifier keeps its seed count, reseeded.
    """
    from .utils import derive_seed

    def section_seed(name: str) -> int:
        return derive_seed(master, name) % 2**31

    return config.replace(
        seed=master,
        data=dataclasses.replace(config.data, seed=section_seed("data")),
        autoencoder=dataclasses.replace(config.autoencoder, seed=section_seed("autoencoder")),
        denoiser=dataclasses.replace(config.denoiser, seed=section_seed("denoiser")),
        inversion=dataclasses.replace(config.inversion, seed=section_seed("inversion")),
        perturbation=dataclasses.replace(
            config.perturbation, seed=section_seed("perturbation")
        ),
        classifier=dataclasses.replace(
            config.classifier,
            seeds=tuple(
                derive_seed(master, "classifier", i) % 2**31
                for i in range(len(config.classifier.seeds))
            ),
        ),
    )


def sweep_configs(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand the sweep axes into (cell name, config) pairs.

    Only generation-time knobs vary, so expanded configs share every upstream
    artifact (data, autoencoder, denoiser, inversion) through the
    content-addressed store. An empty sweep yields the base config alone.
    """
    cells: list[tuple[str, ExperimentConfig]] = []
    s = base.sweep
    axes = [
        ("noise", s.noise_strengths, lambda c, v: dataclasses.replace(c, noise_strength=v)),
        ("interp", s.interp_strengths, lambda c, v: dataclasses.replace(c, interp_strength=v)),
        ("guidance", s.guidance_strengths, lambda c, v: dataclasses.replace(c, guidance_set=(v,))),
        ("variants", s.variant_counts,
         lambda c, v: dataclasses.replace(c, variants_per_embedding=v)),
    ]
    active = [(name, values, apply) for name, values, apply in axes if values]
    if not active:
        return [(base.name, base)]
    # cartesian product over the active axes
    def expand(idx: int, cfg: PerturbationConfig, label: list[str]):
        if idx == len(active):
            name = f"{base.name}-" + "-".join(label)
            cells.append((name, base.replace(perturbation=cfg, sweep=SweepConfig())))
            return
        axis_name, values, apply = active[idx]
        for v in values:
            expand(idx + 1, apply(cfg, v), label + [f"{axis_name}{v}"])

    expand(0, base.perturbation, [])
    return cells
