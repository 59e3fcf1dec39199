"""Experiment orchestration: phases, content-addressed artifacts, manifests.

A run executes the enabled phases in a fixed order (autoencoder -> denoiser
-> inversion -> generation -> metrics -> classifier). Every phase's artifact
lands in a store directory keyed by a hash chaining that phase's config with
everything upstream, so a rerun — or a sweep cell sharing the upstream stack
— loads the cached artifact instead of recomputing, and two configs that
differ anywhere upstream can never collide. The manifest records per-phase
wall times, input/output hashes, and partial completion when a phase fails.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import torch
from filelock import FileLock, Timeout

from . import __version__
from .autoencoder import Autoencoder, train_autoencoder
from .checkpoints import (
    load_autoencoder,
    load_denoiser,
    file_checksum,
    save_autoencoder,
    save_denoiser,
)
from .config import ExperimentConfig, PHASES
from .data import ImageDataset, ingest_dataset, make_toy_datasets
from .diffusion import TrainedDenoiser, build_schedule, train_denoiser
from .downstream import ClassifierConfig, TrainReport, train_classifier
from .inversion import EmbeddingRecord, EmbeddingStore, invert_dataset, mean_embedding
from .metrics import MetricsReport, compute_metrics, extract_features
from .sampling import SyntheticDataset, generate_variants, load_synthetic, save_synthetic
from .utils import atomic_write_json, derive_seed, read_json, stable_hash

logger = logging.getLogger(__name__)

_HASH_CHARS = 12  # directory names use this prefix of the phase hash


class PhaseError(RuntimeError):
    """A phase failed; the manifest records the partial run."""


@dataclass
class PhaseRecord:
    name: str
    status: str  # "complete" | "cached" | "failed" | "disabled"
    wall_time_s: float = 0.0
    started_at: float = 0.0
    finished_at: float = 0.0
    phase_hash: str = ""
    artifact: str = ""  # store-relative path, "" when none
    output_hashes: dict[str, str] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_hash: str
    tool_version: str
    created_at: float
    status: str = "running"  # -> "complete" | "partial"
    input_hashes: dict[str, str] = field(default_factory=dict)
    phases: list[PhaseRecord] = field(default_factory=list)
    total_wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        body = {
            "run_id": self.run_id,
            "config": self.config,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "created_at": self.created_at,
            "status": self.status,
            "input_hashes": self.input_hashes,
            "phases": [p.to_dict() for p in self.phases],
            "total_wall_time_s": self.total_wall_time_s,
        }
        body["manifest_hash"] = stable_hash(body)
        return body

    def save(self, path: Path | str) -> None:
        atomic_write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Path | str) -> "RunManifest":
        payload = read_json(Path(path))
        claimed = payload.pop("manifest_hash", None)
        if claimed is not None and stable_hash(payload) != claimed:
            raise ValueError(f"manifest hash mismatch in {path}")
        phases = [PhaseRecord(**p) for p in payload.pop("phases")]
        manifest = cls(phases=phases, **payload)
        manifest.validate_timestamps()
        return manifest

    def phase(self, name: str) -> PhaseRecord:
        for p in self.phases:
            if p.name == name:
                return p
        raise KeyError(f"no phase {name!r} in manifest {self.run_id}")

    def validate_timestamps(self) -> None:
        """Executed phases must be sequential and within the run window."""
        prev_end = self.created_at
        for p in self.phases:
            if p.status == "disabled" or p.started_at == 0.0:  # never executed
                continue
            if p.finished_at < p.started_at:
                raise ValueError(f"phase {p.name} finished before it started")
            if p.started_at + 1e-6 < prev_end:
                raise ValueError(f"phase {p.name} started before the previous phase ended")
            prev_end = p.finished_at


# ---------------------------------------------------------------------------
# Artifact store


class ArtifactStore:
    """Content-addressed phase outputs: ``root/<kind>/<hash prefix>/``.

    A directory counts as complete only once its ``done.json`` marker —
    written last — exists and carries the full phase hash.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, kind: str, phase_hash: str) -> Path:
        return self.root / kind / phase_hash[:_HASH_CHARS]

    def marker(self, kind: str, phase_hash: str) -> Path:
        return self.dir(kind, phase_hash) / "done.json"

    def is_complete(self, kind: str, phase_hash: str) -> bool:
        marker = self.marker(kind, phase_hash)
        return marker.exists() and read_json(marker).get("phase_hash") == phase_hash

    def mark_complete(self, kind: str, phase_hash: str, output_hashes: dict[str, str]) -> None:
        atomic_write_json(
            self.marker(kind, phase_hash),
            {"kind": kind, "phase_hash": phase_hash, "output_hashes": output_hashes},
        )

    def recorded_hashes(self, kind: str, phase_hash: str) -> dict[str, str]:
        return read_json(self.marker(kind, phase_hash))["output_hashes"]


# ---------------------------------------------------------------------------
# Phase implementations. Each takes the mutable run context and returns
# (artifact relpath, output hashes, extra) — raising on failure.


@dataclass
class _RunContext:
    config: ExperimentConfig
    store: ArtifactStore
    hashes: dict[str, str] = field(default_factory=dict)  # phase name -> chain hash
    pretrain: ImageDataset | None = None
    target: ImageDataset | None = None
    test: ImageDataset | None = None
    ae: Autoencoder | None = None
    denoiser: TrainedDenoiser | None = None
    records: list[EmbeddingRecord] | None = None
    synthetic: SyntheticDataset | None = None
    metrics_report: MetricsReport | None = None
    train_reports: dict[str, TrainReport] = field(default_factory=dict)


def _cfg_dict(cfg) -> dict:
    if hasattr(cfg, "to_dict"):
        return cfg.to_dict()
    return dataclasses.asdict(cfg)


def _prepare_data(ctx: _RunContext) -> None:
    """Datasets are regenerated in memory from the spec — cheap, exact, and
    immune to quantization drift a save/load roundtrip would introduce."""
    cfg = ctx.config
    ctx.pretrain, ctx.target, ctx.test = make_toy_datasets(cfg.data)
    ctx.hashes["data"] = stable_hash(["data", _cfg_dict(cfg.data)])


def _phase_autoencoder(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    phase_hash = stable_hash(["autoencoder", _cfg_dict(cfg.autoencoder), ctx.hashes["data"]])
    ctx.hashes["autoencoder"] = phase_hash
    out = ctx.store.dir("autoencoder", phase_hash)
    if ctx.store.is_complete("autoencoder", phase_hash):
        ctx.ae = load_autoencoder(out / "model")
        return str(out.relative_to(ctx.store.root)), ctx.store.recorded_hashes(
            "autoencoder", phase_hash
        ), {"cached": True}
    ae, history = train_autoencoder(ctx.pretrain.images, cfg.autoencoder)
    ctx.ae = ae
    save_autoencoder(out / "model", ae)
    hashes = {"model": file_checksum(out / "model")}
    atomic_write_json(out / "history.json", history)
    ctx.store.mark_complete("autoencoder", phase_hash, hashes)
    return str(out.relative_to(ctx.store.root)), hashes, {"final_recon": (
        history["epoch_recon"][-1] if history["epoch_recon"] else None
    )}


def _phase_denoiser(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    phase_hash = stable_hash(
        ["denoiser", _cfg_dict(cfg.schedule), _cfg_dict(cfg.denoiser),
         ctx.hashes["autoencoder"]]
    )
    ctx.hashes["denoiser"] = phase_hash
    out = ctx.store.dir("denoiser", phase_hash)
    if ctx.store.is_complete("denoiser", phase_hash):
        ctx.denoiser = load_denoiser(out / "model")
        return str(out.relative_to(ctx.store.root)), ctx.store.recorded_hashes(
            "denoiser", phase_hash
        ), {"cached": True}
    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    latents = ctx.ae.encode(ctx.pretrain.images)
    bundle, history = train_denoiser(latents, ctx.pretrain.labels, sched, cfg.denoiser)
    ctx.denoiser = bundle
    save_denoiser(out / "model", bundle)
    hashes = {"model": file_checksum(out / "model")}
    atomic_write_json(out / "history.json", history)
    ctx.store.mark_complete("denoiser", phase_hash, hashes)
    return str(out.relative_to(ctx.store.root)), hashes, {
        "final_loss": history["epoch_losses"][-1]
    }


def _phase_inversion(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    phase_hash = stable_hash(["inversion", _cfg_dict(cfg.inversion), ctx.hashes["denoiser"]])
    ctx.hashes["inversion"] = phase_hash
    out = ctx.store.dir("inversion", phase_hash)
    records_dir = out / "records"
    cached = ctx.store.is_complete("inversion", phase_hash)
    records, failures = invert_dataset(
        ctx.denoiser, ctx.target, ctx.ae, cfg.inversion,
        store_dir=records_dir, resume=True,
    )
    if failures:
        raise PhaseError(f"inversion failed for {len(failures)} images: {sorted(failures)[:5]}")
    ctx.records = records
    record_hash = stable_hash(
        [(r.image_id, {s: v.numpy().tobytes().hex() for s, v in r.snapshots.items()})
         for r in records]
    )
    hashes = {"records": record_hash}
    if not cached:
        ctx.store.mark_complete("inversion", phase_hash, hashes)
    elif ctx.store.recorded_hashes("inversion", phase_hash) != hashes:
        raise PhaseError("cached inversion records do not match their recorded hash")
    return str(out.relative_to(ctx.store.root)), hashes, {
        "cached": cached, "n_records": len(records)
    }


def _phase_generation(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    phase_hash = stable_hash(
        ["generation", _cfg_dict(cfg.perturbation), cfg.unconditional, ctx.hashes["inversion"]]
    )
    ctx.hashes["generation"] = phase_hash
    out = ctx.store.dir("generation", phase_hash)
    if ctx.store.is_complete("generation", phase_hash):
        ctx.synthetic = load_synthetic(out / "synthetic")
        return str(out.relative_to(ctx.store.root)), ctx.store.recorded_hashes(
            "generation", phase_hash
        ), {"cached": True, "n_samples": len(ctx.synthetic)}
    if cfg.unconditional == "mean-embedding":
        uncond = mean_embedding(ctx.records, ctx.config.inversion.checkpoints[-1])
    else:
        uncond = ctx.denoiser.conditioner.null().detach()
    start = time.monotonic()
    synthetic = generate_variants(
        ctx.records, ctx.denoiser, ctx.ae, cfg.perturbation, uncond,
        ctx.target.resolution,
    )
    elapsed = time.monotonic() - start
    ctx.synthetic = synthetic
    save_synthetic(synthetic, out / "synthetic")
    hashes = {"synthetic": synthetic.checksum()}
    ctx.store.mark_complete("generation", phase_hash, hashes)
    return str(out.relative_to(ctx.store.root)), hashes, {
        "n_samples": len(synthetic),
        "amortized_s_per_sample": elapsed / max(len(synthetic), 1),
    }


def _feature_extractor_id(ctx: _RunContext) -> tuple[str, str]:
    """Resolve the metrics feature extractor; returns (extractor id, hash tag).

    "penultimate-pretrain" trains a classifier on the pretraining split and
    uses its global-average-pooled features; the checkpoint is itself a
    content-addressed artifact.
    """
    m = ctx.config.metrics
    if m.extractor != "penultimate-pretrain":
        return m.extractor, m.extractor
    feat_cfg = ClassifierConfig(
        arch="resnet8-16",
        epochs=m.feature_epochs,
        seeds=(derive_seed(ctx.config.seed, "feature-extractor") % 2**31,),
        augmentation="none",
    )
    feat_hash = stable_hash(["feature", _cfg_dict(feat_cfg), ctx.hashes["data"]])
    out = ctx.store.dir("feature", feat_hash)
    model_path = out / "model"
    if not ctx.store.is_complete("feature", feat_hash):
        report = train_classifier(ctx.pretrain, ctx.test, feat_cfg, model_out=model_path)
        report.save(out / "report.json")
        ctx.store.mark_complete("feature", feat_hash, {"model": file_checksum(model_path)})
    return f"penultimate:{model_path}", f"penultimate-pretrain:{feat_hash[:_HASH_CHARS]}"


def _phase_metrics(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    m = cfg.metrics
    if m.real_dir is not None or m.generated_dir is not None:
        # metrics-only mode over two image directories; no training involved
        if not (m.real_dir and m.generated_dir):
            raise PhaseError("metrics-only mode needs both real_dir and generated_dir")
        real_ds = ingest_dataset(m.real_dir)
        gen_ds = ingest_dataset(m.generated_dir)
        extractor = m.extractor if m.extractor != "penultimate-pretrain" else "raw-pixels"
        phase_hash = stable_hash(
            ["metrics-only", _cfg_dict(m), real_ds.checksum(), gen_ds.checksum()]
        )
    else:
        real_ds, gen_ds = ctx.target, ctx.synthetic.as_image_dataset()
        extractor, extractor_tag = _feature_extractor_id(ctx)
        phase_hash = stable_hash(
            ["metrics", m.k, extractor_tag, ctx.hashes["generation"]]
        )
    ctx.hashes["metrics"] = phase_hash
    out = ctx.store.dir("metrics", phase_hash)
    if ctx.store.is_complete("metrics", phase_hash):
        ctx.metrics_report = MetricsReport.load(out / "metrics.json")
        return str(out.relative_to(ctx.store.root)), ctx.store.recorded_hashes(
            "metrics", phase_hash
        ), {"cached": True, **ctx.metrics_report.to_dict()}
    real_feats = extract_features(real_ds, extractor, source="real")
    gen_feats = extract_features(gen_ds, extractor, source="generated")
    report = compute_metrics(real_feats, gen_feats, k=m.k)
    ctx.metrics_report = report
    report.save(out / "metrics.json")
    hashes = {"metrics": stable_hash(report.to_dict())}
    ctx.store.mark_complete("metrics", phase_hash, hashes)
    return str(out.relative_to(ctx.store.root)), hashes, report.to_dict()


def _classifier_cells(ctx: _RunContext) -> list[str]:
    """Cell names the classifier phase trains: the real baseline, a
    synthetic-only run when generation produced data, and one mixed run per
    configured real:synthetic ratio."""
    cells = ["real"]
    if ctx.synthetic is not None:
        cells.append("synthetic")
        cells.extend(f"mix-{a}-{b}" for a, b in ctx.config.sweep.mix_ratios)
    return cells


def _phase_classifier(ctx: _RunContext) -> tuple[str, dict[str, str], dict]:
    cfg = ctx.config
    upstream = ctx.hashes.get("generation", ctx.hashes["data"])
    phase_hash = stable_hash(
        ["classifier", _cfg_dict(cfg.classifier), list(cfg.sweep.mix_ratios), upstream]
    )
    ctx.hashes["classifier"] = phase_hash
    out = ctx.store.dir("classifier", phase_hash)
    cells = _classifier_cells(ctx)
    if ctx.store.is_complete("classifier", phase_hash):
        for name in cells:
            path = out / f"report-{name}.json"
            if path.exists():
                ctx.train_reports[name] = TrainReport.load(path)
        hashes = ctx.store.recorded_hashes("classifier", phase_hash)
        extra: dict[str, Any] = {"cached": True}
        for n, r in ctx.train_reports.items():
            extra[f"{n}_mean_acc"], extra[f"{n}_std_acc"] = r.mean_accuracy, r.std_accuracy
        return str(out.relative_to(ctx.store.root)), hashes, extra
    reports: dict[str, TrainReport] = {}
    reports["real"] = train_classifier(ctx.target, ctx.test, cfg.classifier)
    if ctx.synthetic is not None:
        syn_images = ctx.synthetic.as_image_dataset()
        reports["synthetic"] = train_classifier(syn_images, ctx.test, cfg.classifier)
        for a, b in cfg.sweep.mix_ratios:
            reports[f"mix-{a}-{b}"] = train_classifier(
                ctx.target, ctx.test, cfg.classifier,
                synthetic=syn_images, mix_ratio=(a, b),
            )
    hashes = {}
    for name, report in reports.items():
        report.save(out / f"report-{name}.json")
        hashes[name] = stable_hash(report.to_dict())
    ctx.train_reports = reports
    ctx.store.mark_complete("classifier", phase_hash, hashes)
    extra = {}
    for n, r in reports.items():
        extra[f"{n}_mean_acc"], extra[f"{n}_std_acc"] = r.mean_accuracy, r.std_accuracy
    return str(out.relative_to(ctx.store.root)), hashes, extra


_PHASE_FNS: dict[str, Callable[[_RunContext], tuple[str, dict[str, str], dict]]] = {
    "autoencoder": _phase_autoencoder,
    "denoiser": _phase_denoiser,
    "inversion": _phase_inversion,
    "generation": _phase_generation,
    "metrics": _phase_metrics,
    "classifier": _phase_classifier,
}

# phases each phase cannot run without (beyond the implicit data setup);
# metrics-only mode over two image directories bypasses this check
_REQUIRES: dict[str, tuple[str, ...]] = {
    "autoencoder": (),
    "denoiser": ("autoencoder",),
    "inversion": ("autoencoder", "denoiser"),
    "generation": ("autoencoder", "denoiser", "inversion"),
    "metrics": ("autoencoder", "denoiser", "inversion", "generation"),
    "classifier": (),
}


@dataclass
class RunResult:
    manifest: RunManifest
    context: _RunContext

    @property
    def status(self) -> str:
        return self.manifest.status


def run_experiment(
    config: ExperimentConfig, out_dir: Path | str, jobs: int | None = None
) -> RunResult:
    """Execute the configured phases; idempotent on reruns.

    Artifacts live under ``out_dir/store`` keyed by chained config hashes;
    a completed phase found there is loaded, not recomputed. The manifest is
    written to ``out_dir/manifests/<run id>.json`` after every phase, so a
    crash still leaves an inspectable partial record. A file lock per run id
    serializes concurrent writers.
    """
    if jobs is not None:
        torch.set_num_threads(jobs)
    out_dir = Path(out_dir)
    config_hash = config.config_hash()
    run_id = f"{config.name}-{config_hash[:8]}"
    metrics_only = config.metrics.real_dir is not None
    if not metrics_only:
        missing = [
            dep
            for ph in config.phases
            for dep in _REQUIRES[ph]
            if dep not in config.phases
        ]
        if missing:
            raise PhaseError(
                f"phases {list(config.phases)} missing prerequisites {sorted(set(missing))}"
            )

    (out_dir / "manifests").mkdir(parents=True, exist_ok=True)
    (out_dir / "locks").mkdir(parents=True, exist_ok=True)
    lock = FileLock(out_dir / "locks" / f"{run_id}.lock")
    try:
        lock.acquire(timeout=10)
    except Timeout as exc:
        raise PhaseError(f"run {run_id} is locked by another process") from exc

    try:
        run_start = time.monotonic()
        manifest = RunManifest(
            run_id=run_id,
            config=config.to_dict(),
            config_hash=config_hash,
            tool_version=__version__,
            created_at=time.time(),
        )
        manifest_path = out_dir / "manifests" / f"{run_id}.json"
        ctx = _RunContext(config=config, store=ArtifactStore(out_dir / "store"))
        if not metrics_only:
            _prepare_data(ctx)
            manifest.input_hashes = {
                "config": config_hash,
                "pretrain": ctx.pretrain.checksum(),
                "target": ctx.target.checksum(),
                "test": ctx.test.checksum(),
            }
        else:
            manifest.input_hashes = {"config": config_hash}

        halted = False
        for name in PHASES:
            if name not in config.phases:
                manifest.phases.append(PhaseRecord(name=name, status="disabled"))
                continue
            if halted:
                manifest.phases.append(
                    PhaseRecord(name=name, status="failed", error="skipped: upstream failure")
                )
                continue
            record = PhaseRecord(name=name, status="running", started_at=time.time())
            t0 = time.monotonic()
            try:
                artifact, hashes, extra = _PHASE_FNS[name](ctx)
                record.status = "cached" if extra.pop("cached", False) else "complete"
                record.artifact = artifact
                record.output_hashes = hashes
                record.extra = extra
                record.phase_hash = ctx.hashes.get(name, "")
            except Exception as exc:  # noqa: BLE001 — manifest must record any failure
                record.status = "failed"
                record.error = f"{type(exc).__name__}: {exc}"
                halted = True
                logger.exception("phase %s failed", name)
            record.wall_time_s = time.monotonic() - t0
            record.finished_at = time.time()
            manifest.phases.append(record)
            manifest.total_wall_time_s = time.monotonic() - run_start
            manifest.save(manifest_path)

        manifest.status = "partial" if halted else "complete"
        manifest.total_wall_time_s = time.monotonic() - run_start
        manifest.save(manifest_path)
        return RunResult(manifest=manifest, context=ctx)
    finally:
        lock.release()
