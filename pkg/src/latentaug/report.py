"""Tabular/plot emission from run manifests.

Each report kind flattens a set of manifests into one CSV whose columns are
documented in ``#``-prefixed header comments. Missing values — a failed
phase, a cell a manifest never ran — appear as the explicit marker ``NA``,
never as silently dropped rows. ``parse_report`` reads a CSV back into the
same list-of-dicts shape ``build_table`` produced, so emission roundtrips.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Any, Sequence

from .pipeline import RunManifest
from .utils import atomic_write_text

NA = "NA"

REPORT_KINDS = ("scaling-curve", "ablation-grid", "metrics-table", "mixing-table")

_DESCRIPTIONS = {
    "scaling-curve": "classifier accuracy versus synthetic-data volume "
    "(variants per embedding, target-set size)",
    "ablation-grid": "distribution metrics and synthetic-only accuracy across "
    "embedding-perturbation settings (noise strength, interpolation strength, guidance)",
    "metrics-table": "distribution metrics of generated versus real data, one row per run",
    "mixing-table": "classifier accuracy by training source: real only, synthetic only, "
    "and per-batch real:synthetic mixtures",
}

_COLUMNS: dict[str, list[tuple[str, str]]] = {
    "metrics-table": [
        ("run_id", "run identifier"),
        ("extractor", "feature extractor the metrics were computed in"),
        ("k", "neighborhood size for precision/recall/density/coverage"),
        ("n_real", "number of real samples"),
        ("n_generated", "number of generated samples"),
        ("fid", "Frechet distance between feature Gaussians (lower is better)"),
        ("precision", "fraction of generated samples inside the real manifold"),
        ("recall", "fraction of real samples inside the generated manifold"),
        ("density", "real-neighborhood hits per generated sample, k-normalized"),
        ("coverage", "fraction of real samples with a generated neighbor"),
    ],
    "ablation-grid": [
        ("noise_strength", "std of Gaussian perturbation added to embeddings"),
        ("interp_strength", "interpolation weight toward a same-class partner embedding"),
        ("guidance_w", "guidance strength (first of the configured set)"),
        ("checkpoint", "embedding optimization step sampled from (first of set)"),
        ("fid", "Frechet distance (lower is better)"),
        ("precision", "generated-in-real manifold fraction"),
        ("recall", "real-in-generated manifold fraction"),
        ("density", "k-normalized real-neighborhood hit rate"),
        ("coverage", "covered-real fraction"),
        ("synthetic_mean_acc", "mean test accuracy training on synthetic data only"),
        ("run_id", "run identifier"),
    ],
    "scaling-curve": [
        ("n_target", "number of real target images inverted"),
        ("variants_per_embedding", "synthetic variants generated per inverted image"),
        ("n_synthetic", "synthetic training-set size"),
        ("real_mean_acc", "mean test accuracy training on real data"),
        ("real_std_acc", "std of real-data accuracy over seeds"),
        ("synthetic_mean_acc", "mean test accuracy training on synthetic data only"),
        ("synthetic_std_acc", "std of synthetic-only accuracy over seeds"),
        ("run_id", "run identifier"),
    ],
    "mixing-table": [
        ("run_id", "run identifier"),
        ("source", "training source: real, synthetic, or mix-R-S"),
        ("ratio_real", "real images per batch of a mixed run"),
        ("ratio_synthetic", "synthetic images per batch of a mixed run"),
        ("mean_acc", "mean test accuracy over seeds"),
        ("std_acc", "std of test accuracy over seeds"),
    ],
}


def _phase_extra(manifest: RunManifest, phase: str) -> dict[str, Any]:
    try:
        rec = manifest.phase(phase)
    except KeyError:
        return {}
    if rec.status in ("complete", "cached"):
        return rec.extra
    return {}


def _get(extra: dict, key: str):
    v = extra.get(key)
    return NA if v is None else v


def _cfg(manifest: RunManifest, *path: str):
    node: Any = manifest.config
    for key in path:
        if not isinstance(node, dict) or key not in node:
            return NA
        node = node[key]
    return node


def _first(value):
    if isinstance(value, (list, tuple)) and value:
        return value[0]
    return NA


def build_table(manifests: Sequence[RunManifest], kind: str) -> list[dict[str, Any]]:
    """Flatten manifests into rows for the given report kind."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}; valid: {list(REPORT_KINDS)}")
    rows: list[dict[str, Any]] = []
    for m in manifests:
        metrics = _phase_extra(m, "metrics")
        clf = _phase_extra(m, "classifier")
        if kind == "metrics-table":
            rows.append({
                "run_id": m.run_id,
                "extractor": _get(metrics, "extractor_id"),
                "k": _get(metrics, "k"),
                "n_real": _get(metrics, "n_real"),
                "n_generated": _get(metrics, "n_generated"),
                "fid": _get(metrics, "fid"),
                "precision": _get(metrics, "precision"),
                "recall": _get(metrics, "recall"),
                "density": _get(metrics, "density"),
                "coverage": _get(metrics, "coverage"),
            })
        elif kind == "ablation-grid":
            rows.append({
                "noise_strength": _cfg(m, "perturbation", "noise_strength"),
                "interp_strength": _cfg(m, "perturbation", "interp_strength"),
                "guidance_w": _first(_cfg(m, "perturbation", "guidance_set")),
                "checkpoint": _first(_cfg(m, "perturbation", "checkpoint_set")),
                "fid": _get(metrics, "fid"),
                "precision": _get(metrics, "precision"),
                "recall": _get(metrics, "recall"),
                "density": _get(metrics, "density"),
                "coverage": _get(metrics, "coverage"),
                "synthetic_mean_acc": _get(clf, "synthetic_mean_acc"),
                "run_id": m.run_id,
            })
        elif kind == "scaling-curve":
            gen = _phase_extra(m, "generation")
            rows.append({
                "n_target": _cfg(m, "data", "n_target"),
                "variants_per_embedding": _cfg(m, "perturbation", "variants_per_embedding"),
                "n_synthetic": _get(gen, "n_samples"),
                "real_mean_acc": _get(clf, "real_mean_acc"),
                "real_std_acc": _get(clf, "real_std_acc"),
                "synthetic_mean_acc": _get(clf, "synthetic_mean_acc"),
                "synthetic_std_acc": _get(clf, "synthetic_std_acc"),
                "run_id": m.run_id,
            })
        elif kind == "mixing-table":
            sources = sorted(
                {k.rsplit("_mean_acc", 1)[0] for k in clf if k.endswith("_mean_acc")}
            ) or [NA]
            for source in sources:
                if source == NA:
                    row = {"source": NA, "ratio_real": NA, "ratio_synthetic": NA,
                           "mean_acc": NA, "std_acc": NA}
                else:
                    if source.startswith("mix-"):
                        a, b = source.split("-")[1:3]
                        ratio_real, ratio_syn = int(a), int(b)
                    else:
                        ratio_real, ratio_syn = NA, NA
                    row = {
                        "source": source,
                        "ratio_real": ratio_real,
                        "ratio_synthetic": ratio_syn,
                        "mean_acc": _get(clf, f"{source}_mean_acc"),
                        "std_acc": _get(clf, f"{source}_std_acc"),
                    }
                rows.append({"run_id": m.run_id, **row})

    sort_keys = {
        "ablation-grid": ("noise_strength", "interp_strength", "guidance_w", "checkpoint"),
        "scaling-curve": ("n_target", "variants_per_embedding"),
        "mixing-table": ("run_id", "source"),
        "metrics-table": ("run_id",),
    }[kind]
    def key(row):
        return tuple((v == NA, v if v != NA else 0) for v in (row[k] for k in sort_keys))
    rows.sort(key=key)
    return rows


def _format_cell(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_csv(rows: list[dict[str, Any]], kind: str, path: Path) -> None:
    columns = _COLUMNS[kind]
    lines = [f"# {kind}: {_DESCRIPTIONS[kind]}", "# columns:"]
    lines += [f"#   {name}: {desc}" for name, desc in columns]
    lines.append(f"# missing values are marked {NA}")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[name for name, _ in columns])
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _format_cell(v) for k, v in row.items()})
    atomic_write_text(path, "\n".join(lines) + "\n" + buf.getvalue())


def parse_report(path: Path | str) -> list[dict[str, str]]:
    """Read back an emitted CSV (comment lines skipped); cells stay strings,
    with ``NA`` markers preserved."""
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(rows))


def _plot(rows: list[dict[str, Any]], kind: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=120)
    def series(xcol, ycol):
        pts = [(r[xcol], r[ycol]) for r in rows if NA not in (r[xcol], r[ycol])]
        return [p[0] for p in pts], [p[1] for p in pts]

    if kind == "scaling-curve":
        x, y = series("variants_per_embedding", "synthetic_mean_acc")
        ax.plot(x, y, "o-", label="synthetic only")
        xr, yr = series("variants_per_embedding", "real_mean_acc")
        if xr:
            ax.axhline(yr[0], ls="--", c="gray", label="real baseline")
        ax.set_xlabel("variants per embedding")
        ax.set_ylabel("test accuracy")
    elif kind == "ablation-grid":
        x, y = series("noise_strength", "fid")
        ax.plot(x, y, "o-")
        ax.set_xlabel("noise strength")
        ax.set_ylabel("FID")
    elif kind == "metrics-table":
        x, y = series("precision", "recall")
        ax.plot(x, y, "o")
        ax.set_xlabel("precision")
        ax.set_ylabel("recall")
        ax.set_xlim(0, 1.05)
        ax.set_ylim(0, 1.05)
    else:  # mixing-table
        labels = [r["source"] for r in rows if r["mean_acc"] != NA]
        vals = [r["mean_acc"] for r in rows if r["mean_acc"] != NA]
        ax.bar(range(len(vals)), vals)
        ax.set_xticks(range(len(vals)), labels, rotation=45, ha="right")
        ax.set_ylabel("test accuracy")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    ax.set_title(kind)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_report(
    manifests: Sequence[RunManifest | Path | str],
    kind: str,
    out_dir: Path | str,
    plot: bool = False,
) -> list[Path]:
    """Emit ``<kind>.csv`` (and optionally ``<kind>.png``) under out_dir.

    Manifests may be RunManifest objects or paths to saved manifest JSON.
    Returns the written file paths.
    """
    loaded = [
        m if isinstance(m, RunManifest) else RunManifest.load(m) for m in manifests
    ]
    if not loaded:
        raise ValueError("emit_report needs at least one manifest")
    rows = build_table(loaded, kind)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{kind}.csv"
    write_csv(rows, kind, csv_path)
    written = [csv_path]
    if plot:
        png_path = out_dir / f"{kind}.png"
        _plot(rows, kind, png_path)
        written.append(png_path)
    return written
