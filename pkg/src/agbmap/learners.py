"""Three from-scratch base regressors and k-fold grid-search tuning.

Bagged trees and boosted trees share the CART kernels in ``trees``; the
support-vector regressor solves its RBF dual with coordinate-wise updates.
All training is a pure function of (data, hyperparameters, seed).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import trees
from .seeds import mix_seed


@dataclass
class Dataset:
    """Predictor matrix in canonical column order plus the response."""

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be n x p with y of length n")
        if np.isnan(self.X).any() or np.isnan(self.y).any():
            raise ValueError("dataset must not contain missing values")
        if self.X.shape[0] < 2 or self.X.shape[1] < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("feature_names length must match p")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.feature_names)


@dataclass(frozen=True)
class RFParams:
    n_trees: int = 500
    mtry: int | None = None        # default ceil(p / 3), resolved at fit time
    min_leaf: int = 5

    def resolve_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else int(np.ceil(p / 3))
        return max(1, min(m, p))


@dataclass(frozen=True)
class GBTParams:
    n_rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int = 3
    subsample_fraction: float = 0.75

    def __post_init__(self) -> None:
        if not (0 < self.subsample_fraction <= 1):
            raise ValueError("subsample_fraction must be in (0, 1]")


@dataclass(frozen=True)
class SVRParams:
    C: float = 10.0
    epsilon: float | None = None   # default 0.1 * sd(y), resolved at fit time
    gamma: float | None = None     # default 1 / p


@dataclass(frozen=True)
class Hyperparams:
    rf: RFParams = field(default_factory=RFParams)
    gbt: GBTParams = field(default_factory=GBTParams)
    svr: SVRParams = field(default_factory=SVRParams)


LEARNER_KINDS = ("rf", "gbt", "svr")


# ---------------------------------------------------------------------------
# Random forest


class RandomForestModel:
    kind = "rf"

    def __init__(self, features, thresholds, lefts, rights, values, training_seed):
        self.features = features
        self.thresholds = thresholds
        self.lefts = lefts
        self.rights = rights
        self.values = values
        self.training_seed = training_seed

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        out = np.empty(X.shape[0], dtype=np.float64)
        trees.forest_predict(self.features, self.thresholds, self.lefts,
                             self.rights, self.values, X, out)
        return out

    def params_payload(self) -> dict:
        return {
            "features": self.features, "thresholds": self.thresholds,
            "lefts": self.lefts, "rights": self.rights, "values": self.values,
            "training_seed": self.training_seed,
        }


def train_rf(ds: Dataset, hp: RFParams, seed: int) -> RandomForestModel:
    mtry = hp.resolve_mtry(ds.p)
    if hp.n_trees < 1 or hp.min_leaf < 1:
        raise ValueError("n_trees and min_leaf must be positive")
    max_nodes = 2 * ds.n + 1
    arrays = trees.alloc_tree_arrays(hp.n_trees, max_nodes)
    seeds = np.array([mix_seed(seed, t) | 1 for t in range(hp.n_trees)], dtype=np.uint64)
    trees.forest_fit(ds.X, ds.y, hp.n_trees, mtry, hp.min_leaf, seeds, *arrays)
    return RandomForestModel(*arrays, training_seed=seed)


# ---------------------------------------------------------------------------
# Gradient-boosted trees


class GradientBoostedModel:
    kind = "gbt"

    def __init__(self, f0, learning_rate, features, thresholds, lefts, rights, values,
                 training_seed):
        self.f0 = f0
        self.learning_rate = learning_rate
        self.features = features
        self.thresholds = thresholds
        self.lefts = lefts
        self.rights = rights
        self.values = values
        self.training_seed = training_seed

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        out = np.empty(X.shape[0], dtype=np.float64)
        trees.boost_predict(self.f0, self.learning_rate, self.features, self.thresholds,
                            self.lefts, self.rights, self.values, X, out)
        return out

    def params_payload(self) -> dict:
        return {
            "f0": self.f0, "learning_rate": self.learning_rate,
            "features": self.features, "thresholds": self.thresholds,
            "lefts": self.lefts, "rights": self.rights, "values": self.values,
            "training_seed": self.training_seed,
        }


def train_gbt(ds: Dataset, hp: GBTParams, seed: int) -> GradientBoostedModel:
    if hp.n_rounds < 1 or hp.learning_rate < 0 or hp.max_depth < 1:
        raise ValueError("invalid boosting hyperparameters")
    k_sub = max(1, int(round(hp.subsample_fraction * ds.n)))
    max_nodes = min(2 * k_sub + 1, 2 ** (hp.max_depth + 1) + 1)
    arrays = trees.alloc_tree_arrays(hp.n_rounds, max_nodes)
    seeds = np.array([mix_seed(seed, t) | 1 for t in range(hp.n_rounds)], dtype=np.uint64)
    f0 = trees.boost_fit(ds.X, ds.y, hp.n_rounds, hp.learning_rate, hp.max_depth,
                         hp.subsample_fraction, seeds, *arrays)
    return GradientBoostedModel(f0, hp.learning_rate, *arrays, training_seed=seed)


# ---------------------------------------------------------------------------
# Support-vector regression (RBF kernel, epsilon-insensitive loss)


class SVRModel:
    kind = "svr"

    def __init__(self, X_train_scaled, beta, x_mean, x_sd, gamma, converged, training_seed=0):
        self.X_train_scaled = X_train_scaled
        self.beta = beta                   # alpha_i - alpha_i*
        self.x_mean = x_mean
        self.x_sd = x_sd
        self.gamma = gamma
        self.converged = converged
        self.training_seed = training_seed

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Xs = np.ascontiguousarray((X - self.x_mean) / self.x_sd)
        out = np.empty(Xs.shape[0], dtype=np.float64)
        _svr_predict_rows(Xs, self.X_train_scaled, self.beta, self.gamma, out)
        return out

    def params_payload(self) -> dict:
        return {
            "X_train_scaled": self.X_train_scaled, "beta": self.beta,
            "x_mean": self.x_mean, "x_sd": self.x_sd, "gamma": self.gamma,
            "converged": self.converged, "training_seed": self.training_seed,
        }


@numba.njit(cache=True, parallel=True)
def _svr_predict_rows(Q, T, beta, gamma, out):
    """Row-wise kernel expansion with fixed summation order, so predictions
    are bit-identical regardless of query batching or tiling."""
    n_q, p = Q.shape
    n_t = T.shape[0]
    for i in numba.prange(n_q):
        acc = 0.0
        for j in range(n_t):
            d2 = 0.0
            for k in range(p):
                d = Q[i, k] - T[j, k]
                d2 += d * d
            acc += beta[j] * (np.exp(-gamma * d2) + 1.0)
        out[i] = acc


def _rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-gamma * d2)


SVR_KKT_TOL = 1e-3
SVR_MAX_SWEEPS = 2000


def train_svr(ds: Dataset, hp: SVRParams) -> SVRModel:
    """Coordinate-wise dual solver for epsilon-insensitive RBF regression.

    The bias is folded into the kernel (k + 1), so each dual coordinate has a
    closed-form soft-threshold update; sweeps run until the largest
    coordinate move falls below the KKT tolerance or the sweep cap.
    """
    if hp.C <= 0:
        raise ValueError("C must be positive")
    x_mean = ds.X.mean(axis=0)
    x_sd = ds.X.std(axis=0, ddof=1)
    x_sd = np.where(x_sd == 0, 1.0, x_sd)
    Xs = (ds.X - x_mean) / x_sd

    gamma = hp.gamma if hp.gamma is not None else 1.0 / ds.p
    sd_y = float(np.std(ds.y, ddof=1))
    epsilon = hp.epsilon if hp.epsilon is not None else 0.1 * sd_y
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")

    K = _rbf_kernel(Xs, Xs, gamma) + 1.0
    n = ds.n
    beta = np.zeros(n)
    f = np.zeros(n)               # K @ beta, maintained incrementally
    diag = np.diag(K).copy()
    converged = False
    for _ in range(SVR_MAX_SWEEPS):
        max_delta = 0.0
        for i in range(n):
            r = ds.y[i] - (f[i] - K[i, i] * beta[i])
            if r > epsilon:
                b_new = (r - epsilon) / diag[i]
            elif r < -epsilon:
                b_new = (r + epsilon) / diag[i]
            else:
                b_new = 0.0
            b_new = min(hp.C, max(-hp.C, b_new))
            delta = b_new - beta[i]
            if delta != 0.0:
                f += delta * K[:, i]
                beta[i] = b_new
                max_delta = max(max_delta, abs(delta))
        if max_delta < SVR_KKT_TOL:
            converged = True
            break
    if not converged:
        warnings.warn("SVR solver hit the sweep cap before reaching tolerance")
    return SVRModel(Xs, beta, x_mean, x_sd, gamma, converged)


def svr_dual_objective(model: SVRModel, y: np.ndarray, epsilon: float) -> float:
    """Dual objective value of the bias-folded formulation (for verification)."""
    K = _rbf_kernel(model.X_train_scaled, model.X_train_scaled, model.gamma) + 1.0
    b = model.beta
    return float(0.5 * b @ K @ b - b @ y + epsilon * np.sum(np.abs(b)))


# ---------------------------------------------------------------------------
# Training dispatch and grid search


def train_learner(kind: str, ds: Dataset, hp: Hyperparams, seed: int):
    if kind == "rf":
        return train_rf(ds, hp.rf, seed)
    if kind == "gbt":
        return train_gbt(ds, hp.gbt, seed)
    if kind == "svr":
        return train_svr(ds, hp.svr)
    raise ValueError(f"unknown learner kind {kind!r}")


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split into k folds with sizes differing by <= 1."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    return [np.sort(order[i::k]) for i in range(k)]


def grid_search_cv(
    ds: Dataset,
    grids: dict[str, list],
    k: int = 5,
    seed: int = 0,
) -> tuple[Hyperparams, dict[str, list[tuple[object, float]]]]:
    """Exhaustive k-fold search per learner; minimum mean out-of-fold RMSE
    wins, ties broken by earliest grid order. Returns the winning combined
    Hyperparams and the per-learner score tables."""
    if ds.n < k:
        raise ValueError("need n >= k for k-fold CV")
    folds = kfold_indices(ds.n, k, mix_seed(seed, 0xF01D))
    all_rows = np.arange(ds.n)
    scores: dict[str, list[tuple[object, float]]] = {}
    best: dict[str, object] = {}
    for kind in LEARNER_KINDS:
        grid = grids.get(kind, [])
        if not grid:
            best[kind] = None
            continue
        table = []
        for gi, params in enumerate(grid):
            fold_rmses = []
            for fi, fold in enumerate(folds):
                train_rows = np.setdiff1d(all_rows, fold, assume_unique=False)
                sub = ds.subset(train_rows)
                hp = _combined(kind, params)
                # seed depends on the fold only (common random numbers), so a
                # grid point's score is independent of its position and the
                # earliest-wins tie rule is meaningful for duplicates
                model = train_learner(kind, sub, hp, mix_seed(seed, fi))
                pred = model.predict(ds.X[fold])
                fold_rmses.append(float(np.sqrt(np.mean((ds.y[fold] - pred) ** 2))))
            score = float(np.mean(fold_rmses))
            table.append((params, score))
        scores[kind] = table
        best_idx = min(range(len(table)), key=lambda i: (table[i][1], i))
        best[kind] = table[best_idx][0]
    out = Hyperparams(
        rf=best["rf"] or RFParams(),
        gbt=best["gbt"] or GBTParams(),
        svr=best["svr"] or SVRParams(),
    )
    return out, scores


def _combined(kind: str, params) -> Hyperparams:
    hp = Hyperparams()
    return replace(hp, **{kind: params})
