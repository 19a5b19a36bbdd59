"""PCA intrinsic-dimension estimation over feature matrices.

The estimate is the smallest number of principal components whose eigenvalues
retain at least a target fraction (default 90%) of the total variance. Two
collectors build the matrices this is applied to: penultimate-layer features
of clean samples, and the feature-space displacement caused by adversarial
perturbation (with an input-space mode for probing the raw perturbations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset
from .models import (
    ModelSpec,
    ParamSet,
    as_model_batch,
    forward,
    penultimate_features,
    read_flat_records,
    write_flat_records,
)
from .autodiff import tensor

__all__ = [
    "FeatureMatrix",
    "IdEstimate",
    "estimate_id",
    "components_for_target",
    "collect_clean_features",
    "collect_noise_features",
    "save_features",
    "load_features",
]


@dataclass
class FeatureMatrix:
    values: np.ndarray            # (samples, D)
    source: str                   # "clean_features" | "noise"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ValueError("feature matrix needs at least 2 rows of equal width")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix entries must be finite")


@dataclass
class IdEstimate:
    d_hat: int
    target: float
    spectrum: np.ndarray          # eigenvalues, descending
    degenerate: bool = False


def components_for_target(spectrum: np.ndarray, target: float) -> int:
    """Smallest k whose leading eigenvalues cover the target variance fraction."""
    lam = np.sort(np.asarray(spectrum, dtype=np.float64))[::-1]
    total = lam.sum()
    if total <= 0.0:
        return 1
    cum = np.cumsum(lam) / total
    return int(np.searchsorted(cum, target, side="left")) + 1


def estimate_id(fm, target: float = 0.9) -> IdEstimate:
    """PCA estimate: mean-center columns, eigendecompose the covariance (via
    SVD of the centered matrix, 1/(n-1) normalization), count components.

    An all-zero-variance matrix yields d_hat=1 with the degenerate flag set.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target variance fraction must lie in (0, 1)")
    x = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm, dtype=np.float64)
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    lam = (sv * sv) / (n - 1)
    if lam.sum() <= 0.0:
        return IdEstimate(d_hat=1, target=target, spectrum=lam, degenerate=True)
    return IdEstimate(
        d_hat=components_for_target(lam, target), target=target, spectrum=lam
    )


def _pick_test_samples(ds: Dataset, count: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.flatnonzero(np.isin(ds.labels, ds.test_classes))
    if pool.size == 0:
        raise ValueError("dataset test split is empty")
    if count >= pool.size:
        return pool
    return rng.choice(pool, size=count, replace=False)


def _features(spec: ModelSpec, params: ParamSet, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    params = params.detached()
    rows = []
    batch = as_model_batch(spec, images)
    for start in range(0, batch.shape[0], chunk):
        rows.append(penultimate_features(spec, params, tensor(batch[start:start + chunk])).data)
    return np.concatenate(rows)


def collect_clean_features(
    spec: ModelSpec,
    params: ParamSet,
    ds: Dataset,
    sample_count: int = 1000,
    rng: np.random.Generator | None = None,
) -> FeatureMatrix:
    """Penultimate features of random test-split samples (labels unused)."""
    rng = rng or np.random.default_rng(0)
    idx = _pick_test_samples(ds, sample_count, rng)
    return FeatureMatrix(_features(spec, params, ds.images[idx]), "clean_features")


def collect_noise_features(
    spec: ModelSpec,
    params: ParamSet,
    ds: Dataset,
    attack_cfg: AttackConfig,
    sample_count: int = 1000,
    rng: np.random.Generator | None = None,
    space: str = "feature",
) -> FeatureMatrix:
    """Displacement caused by adversarial perturbation on test-split samples.

    ``space="feature"`` (default) returns f(x_adv) - f(x_clean) rows;
    ``space="input"`` returns the raw flattened perturbations instead. The
    attack targets the model's own predicted class for each sample, so no
    episode label mapping is involved.
    """
    if space not in ("feature", "input"):
        raise ValueError(f"unknown noise space {space!r}")
    rng = rng or np.random.default_rng(0)
    params = params.detached()
    idx = _pick_test_samples(ds, sample_count, rng)
    x = as_model_batch(spec, ds.images[idx])
    pseudo = np.argmax(forward(spec, params, tensor(x)).data, axis=1)
    adv = run_attack(spec, params, x, pseudo, attack_cfg, rng)
    if space == "input":
        return FeatureMatrix(adv.delta.reshape(adv.delta.shape[0], -1), "noise")
    f_clean = _features(spec, params, ds.images[idx])
    rows = []
    for start in range(0, adv.x_adv.shape[0], 256):
        rows.append(penultimate_features(spec, params, tensor(adv.x_adv[start:start + 256])).data)
    return FeatureMatrix(np.concatenate(rows) - f_clean, "noise")


def save_features(fm: FeatureMatrix, path):
    write_flat_records(path, [("features", fm.values)], {"kind": "features", "source": fm.source})


def load_features(path) -> FeatureMatrix:
    records, sidecar = read_flat_records(path)
    values = dict(records)["features"]
    return FeatureMatrix(values, sidecar.get("source", "clean_features"))
