"""Distribution-level sample quality metrics: FID and k-NN precision /
recall / density / coverage.

All computation is float64 numpy. Feature extraction is pluggable through a
registry; the two built-ins are flattened raw pixels and the penultimate
activations of a trained classifier checkpoint ("penultimate:<path>").
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import ImageDataset
from .utils import atomic_write_text

FeatureExtractor = Callable[[ImageDataset], np.ndarray]

_EXTRACTORS: dict[str, FeatureExtractor] = {}

# Eigenvalues of the sqrtm intermediate below this are a hard error; negatives
# above it are treated as round-off and clamped to zero.
NEGATIVE_EIGENVALUE_TOLERANCE = -1e-10


def register_extractor(name: str, fn: FeatureExtractor) -> None:
    _EXTRACTORS[name] = fn


def _raw_pixels(dataset: ImageDataset) -> np.ndarray:
    return dataset.images.reshape(len(dataset), -1).numpy().astype(np.float64)


register_extractor("raw-pixels", _raw_pixels)


def resolve_extractor(name: str) -> FeatureExtractor:
    if name in _EXTRACTORS:
        return _EXTRACTORS[name]
    if name.startswith("penultimate:"):
        from .downstream import load_classifier, penultimate_features

        model = load_classifier(Path(name.split(":", 1)[1]))
        return lambda ds: penultimate_features(model, ds)
    raise KeyError(f"unknown feature extractor {name!r}")


@dataclass(frozen=True)
class FeatureSet:
    """(N, F) float64 feature matrix, tagged with its extractor and whether
    the rows came from real or generated images."""

    features: np.ndarray
    extractor_id: str
    source: str = "real"  # "real" | "generated"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] < 2:
            raise ValueError("a feature set needs at least 2 rows")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        if self.source not in ("real", "generated"):
            raise ValueError(f"source must be 'real' or 'generated', got {self.source!r}")
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(
    dataset: ImageDataset, extractor_id: str = "raw-pixels", source: str = "real"
) -> FeatureSet:
    return FeatureSet(
        features=resolve_extractor(extractor_id)(dataset), extractor_id=extractor_id,
        source=source,
    )


# ---------------------------------------------------------------------------
# FID


def _mean_cov(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below NEGATIVE_EIGENVALUE_TOLERANCE raise; mild negatives
    from round-off are clamped to zero.
    """
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min(initial=0.0) < NEGATIVE_EIGENVALUE_TOLERANCE:
        raise ValueError(
            f"matrix is not PSD: eigenvalue {vals.min():.3e} below tolerance "
            f"{NEGATIVE_EIGENVALUE_TOLERANCE:.0e}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: FeatureSet, generated: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r^{1/2} S_g S_r^{1/2})^{1/2}),
    with unbiased (ddof=1) covariances. The cross term is computed through
    the symmetric product rather than sqrtm of the non-symmetric S_r S_g,
    which keeps everything in real arithmetic.
    """
    if len(real) < 2 or len(generated) < 2:
        raise ValueError("FID needs at least 2 samples on each side")
    if real.features.shape[1] != generated.features.shape[1]:
        raise ValueError("feature dimensions differ between the two sets")
    mu_r, cov_r = _mean_cov(real.features)
    mu_g, cov_g = _mean_cov(generated.features)
    sqrt_r = _psd_sqrt(cov_r)
    cross = _psd_sqrt(sqrt_r @ cov_g @ sqrt_r)
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# k-NN precision / recall / density / coverage

# Membership uses squared distances throughout (monotone in the true
# distance) so the reported radii and the comparisons cannot disagree.


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Row-chunked so the (rows, m, d) broadcast intermediate stays ~100 MB
    # instead of n*m*d. The per-pair arithmetic (subtract, square, sum over d)
    # is unchanged, so results are bit-identical to the unchunked form.
    m, d = b.shape[0], b.shape[1]
    rows = max(1, int(12_000_000 / max(1, m * d)))
    out = np.empty((a.shape[0], m), dtype=np.result_type(a, b))
    for start in range(0, a.shape[0], rows):
        chunk = a[start : start + rows]
        out[start : start + len(chunk)] = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return out


def knn_sq_radii(feats: np.ndarray, k: int) -> np.ndarray:
    """Squared distance from each point to its k-th nearest other point."""
    n = feats.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    d2 = _sq_dists(feats, feats)
    np.fill_diagonal(d2, np.inf)
    d2.sort(axis=1)
    return d2[:, k - 1]


def knn_radii(feats: np.ndarray, k: int) -> np.ndarray:
    return np.sqrt(knn_sq_radii(feats, k))


def prdc(real: FeatureSet, generated: FeatureSet, k: int = 3) -> dict[str, float]:
    """Precision, recall, density, coverage with tie-inclusive (<=) membership.

    precision: fraction of generated points inside some real ball.
    recall:    fraction of real points inside some generated ball.
    density:   mean over generated points of (#real balls containing it) / k.
    coverage:  fraction of real points whose ball contains a generated point.
    """
    r_feats, g_feats = real.features, generated.features
    if r_feats.shape[1] != g_feats.shape[1]:
        raise ValueError("feature dimensions differ between the two sets")
    real_r2 = knn_sq_radii(r_feats, k)
    gen_r2 = knn_sq_radii(g_feats, k)
    d2 = _sq_dists(r_feats, g_feats)  # (n_real, n_gen)

    in_real_ball = d2 <= real_r2[:, None]
    in_gen_ball = d2 <= gen_r2[None, :]
    precision = float(in_real_ball.any(axis=0).mean())
    recall = float(in_gen_ball.any(axis=1).mean())
    # single exact-integer division so the value is the correctly rounded
    # rational, bit-identical to any faithful brute force
    density = float(int(in_real_ball.sum()) / (k * g_feats.shape[0]))
    coverage = float((d2.min(axis=1) <= real_r2).mean())
    return {"precision": precision, "recall": recall, "density": density, "coverage": coverage}


def precision_recall(real: FeatureSet, generated: FeatureSet, k: int = 3) -> tuple[float, float]:
    scores = prdc(real, generated, k=k)
    return scores["precision"], scores["recall"]


def density_coverage(real: FeatureSet, generated: FeatureSet, k: int = 3) -> tuple[float, float]:
    scores = prdc(real, generated, k=k)
    return scores["density"], scores["coverage"]


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class MetricsReport:
    fid: float
    precision: float
    recall: float
    density: float
    coverage: float
    k: int
    extractor_id: str
    n_real: int
    n_generated: int

    def __post_init__(self):
        for name in ("fid", "precision", "recall", "density", "coverage"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")
        for name in ("precision", "recall", "coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.fid < 0 or self.density < 0:
            raise ValueError("fid and density must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: Path | str) -> None:
        atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        with open(path) as fh:
            return cls(**json.load(fh))


def compute_metrics(
    real: FeatureSet, generated: FeatureSet, k: int = 3
) -> MetricsReport:
    scores = prdc(real, generated, k=k)
    return MetricsReport(
        fid=fid(real, generated),
        k=k,
        extractor_id=real.extractor_id,
        n_real=len(real),
        n_generated=len(generated),
        **scores,
    )
