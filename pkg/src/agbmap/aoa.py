"""Area-of-applicability computation: correlation-based predictor clustering,
cluster-permutation importance weights, dissimilarity index, outlier-fence
threshold, and the raster mask."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .ensemble import fit_meta, loo_component_predictions
from .geodata import GridSpec, Raster
from .learners import Dataset, Hyperparams
from .seeds import mix_seed, rng_for

N_CLUSTERS = 7


@dataclass(frozen=True)
class ImportanceWeights:
    """Non-negative per-predictor weights summing to 1."""

    names: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)


@dataclass
class DIStats:
    """Standardization constants and the normalizer for the dissimilarity index.

    Zero-variance predictors are dropped (retained mask False) with their
    weight reassigned proportionally across the rest.
    """

    train_means: np.ndarray
    train_sds: np.ndarray
    retained: np.ndarray           # boolean per predictor
    mean_train_distance: float
    scaled_train: np.ndarray       # weighted, standardized training matrix
    effective_weights: np.ndarray


def cluster_predictors(X: np.ndarray) -> np.ndarray:
    """Cluster predictors on the Euclidean distance between their Spearman
    correlation profiles; average linkage cut at 7 clusters.

    Returns integer labels (0-based). With p < 7 every predictor becomes its
    own cluster and a warning is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[1]
    if p < N_CLUSTERS:
        warnings.warn(f"only {p} predictors; each forms its own cluster")
        return np.arange(p)
    ranks = np.column_stack([rankdata(X[:, j]) for j in range(p)])
    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(ranks, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)     # constant columns have no ranks to correlate
    np.fill_diagonal(corr, 1.0)
    Z = linkage(corr, method="average", metric="euclidean")
    labels = fcluster(Z, t=N_CLUSTERS, criterion="maxclust")
    return labels - 1


def _stacked_loo_rmse(ds: Dataset, hps: Hyperparams, seed: int) -> float:
    """Leave-one-out RMSE of the stacked ensemble: meta-model fitted values
    on the held-out component predictions."""
    loo = loo_component_predictions(ds, hps, seed)
    meta = fit_meta(loo, ds.y)
    fitted = np.column_stack([np.ones(ds.n), loo]) @ meta.coefficients
    return float(np.sqrt(np.mean((ds.y - fitted) ** 2)))


def permutation_importance(
    ds: Dataset,
    clusters: np.ndarray,
    seed: int,
    hps: Hyperparams | None = None,
    max_rows: int | None = None,
) -> ImportanceWeights:
    """Cluster-permutation importance for every predictor.

    For predictor p: build a design of p plus one seeded-random representative
    from each other cluster, shuffle p's column, train the stacked ensemble
    with default hyperparameters, and score leave-one-out RMSE. Importance is
    the RMSE increase over the all-predictor reference, clamped at 0 and
    normalized to sum 1 (uniform when every delta is zero).

    ``max_rows`` optionally subsamples the scoring rows (seeded) to keep the
    O(p * n) retraining affordable at desk scale.
    """
    if hps is None:
        hps = Hyperparams()
    clusters = np.asarray(clusters)
    p = ds.p
    rows = np.arange(ds.n)
    if max_rows is not None and ds.n > max_rows:
        rows = np.sort(rng_for(seed, 0x5AB5).choice(ds.n, size=max_rows, replace=False))
    scored = ds.subset(rows)

    rmse_full = _stacked_loo_rmse(scored, hps, mix_seed(seed, 0xF011))

    deltas = np.zeros(p)
    for j in range(p):
        rng = rng_for(seed, 0xC1A5, j)
        cols = [j]
        for c in sorted(set(clusters.tolist())):
            if c == clusters[j]:
                continue
            members = np.flatnonzero(clusters == c)
            cols.append(int(rng.choice(members)))
        X_design = scored.X[:, cols].copy()
        X_design[:, 0] = rng.permutation(X_design[:, 0])
        sub = Dataset(X_design, scored.y, tuple(ds.feature_names[c] for c in cols))
        rmse_j = _stacked_loo_rmse(sub, hps, mix_seed(seed, 0x9E81, j))
        deltas[j] = max(0.0, rmse_j - rmse_full)

    total = deltas.sum()
    weights = np.full(p, 1.0 / p) if total == 0.0 else deltas / total
    return ImportanceWeights(names=ds.feature_names, weights=weights)


def fit_di_stats(train_X: np.ndarray, w: ImportanceWeights) -> DIStats:
    """Standardize and weight the training matrix and compute the mean
    pairwise training distance used to normalize the index."""
    X = np.asarray(train_X, dtype=np.float64)
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    retained = sds > 0
    if not retained.any():
        raise ValueError("all predictors have zero variance")
    weights = w.weights[retained]
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(
        retained.sum(), 1.0 / retained.sum())
    scaled = (X[:, retained] - means[retained]) / sds[retained] * weights
    mean_dist = float(pdist(scaled).mean()) if X.shape[0] > 1 else 1.0
    if mean_dist == 0.0:
        mean_dist = 1.0
    return DIStats(
        train_means=means, train_sds=sds, retained=retained,
        mean_train_distance=mean_dist, scaled_train=scaled,
        effective_weights=weights,
    )


def _scale_queries(stats: DIStats, X: np.ndarray) -> np.ndarray:
    r = stats.retained
    return (X[:, r] - stats.train_means[r]) / stats.train_sds[r] * stats.effective_weights


def dissimilarity_index_batch(X: np.ndarray, stats: DIStats) -> np.ndarray:
    """DI for each query row: minimum weighted-standardized Euclidean distance
    to the training rows, over the mean pairwise training distance."""
    queries = _scale_queries(stats, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    tree = cKDTree(stats.scaled_train)
    dist, _ = tree.query(queries, k=1)
    return np.asarray(dist) / stats.mean_train_distance


def dissimilarity_index(point: np.ndarray, stats: DIStats) -> float:
    return float(dissimilarity_index_batch(np.asarray(point)[None, :], stats)[0])


def aoa_threshold(test_dis: np.ndarray) -> float:
    """Upper outlier fence of the test-partition DI values: Q75 + 1.5 IQR."""
    test_dis = np.asarray(test_dis, dtype=np.float64)
    if test_dis.size < 4:
        raise ValueError("need at least 4 test DI values")
    q25, q75 = np.percentile(test_dis, [25, 75])
    return float(q75 + 1.5 * (q75 - q25))


def aoa_mask(
    predictor_stack: dict[str, Raster],
    band_order: tuple[str, ...],
    stats: DIStats,
    threshold: float,
) -> Raster:
    """Boolean raster: 1 where DI <= threshold, 0 outside; pixels with any
    nodata predictor band are outside."""
    first = predictor_stack[band_order[0]]
    spec: GridSpec = first.spec
    n_cells = spec.n_rows * spec.n_cols
    stack = np.empty((n_cells, len(band_order)), dtype=np.float64)
    valid = np.ones(n_cells, dtype=bool)
    for k, name in enumerate(band_order):
        band = predictor_stack[name]
        flat = band.values.reshape(-1)
        stack[:, k] = flat
        valid &= flat != band.spec.nodata

    out = np.zeros(n_cells, dtype=np.float64)
    if valid.any():
        dis = dissimilarity_index_batch(stack[valid], stats)
        out[valid] = (dis <= threshold).astype(np.float64)
    return Raster(spec, out.reshape(spec.n_rows, spec.n_cols), "aoa_mask")
