"""Stacked generalization: leave-one-out base predictions feed a linear
meta-model fit by OLS (ridge fallback for singular designs)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learners import LEARNER_KINDS, Dataset, Hyperparams, train_learner
from .seeds import mix_seed

RIDGE_FALLBACK_PENALTY = 1e-6
CONDITION_LIMIT = 1e10


def loo_component_predictions(ds: Dataset, hps: Hyperparams, seed: int) -> np.ndarray:
    """n x 3 matrix: entry (i, m) is learner m's prediction for row i when
    trained on the other n-1 rows, with per-fit derived seeds."""
    if ds.n < 3:
        raise ValueError("need n >= 3 for leave-one-out stacking")
    out = np.empty((ds.n, len(LEARNER_KINDS)), dtype=np.float64)
    all_rows = np.arange(ds.n)
    for i in range(ds.n):
        train_rows = np.delete(all_rows, i)
        sub = ds.subset(train_rows)
        for m, kind in enumerate(LEARNER_KINDS):
            model = train_learner(kind, sub, hps, mix_seed(seed, i, m))
            out[i, m] = model.predict(ds.X[i:i + 1])[0]
    return out


@dataclass
class MetaFit:
    coefficients: np.ndarray       # intercept first, then one slope per learner
    ridge_fallback: bool


def fit_meta(loo: np.ndarray, y: np.ndarray) -> MetaFit:
    """OLS of y on [1, loo]; falls back to a tiny ridge penalty on the slopes
    when the normal matrix is singular or severely ill-conditioned."""
    loo = np.asarray(loo, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = loo.shape[0]
    if n <= 4:
        raise ValueError("need n > 4 observations to fit the meta-model")
    design = np.column_stack([np.ones(n), loo])
    normal = design.T @ design
    rhs = design.T @ y
    fallback = False
    try:
        cond = np.linalg.cond(normal)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        fallback = True
    else:
        try:
            coef = np.linalg.solve(normal, rhs)
        except np.linalg.LinAlgError:
            fallback = True
    if fallback:
        penalty = np.eye(design.shape[1]) * RIDGE_FALLBACK_PENALTY
        penalty[0, 0] = 0.0        # intercept unpenalized
        coef = np.linalg.solve(normal + penalty, rhs)
    return MetaFit(coefficients=coef, ridge_fallback=fallback)


@dataclass
class StackedEnsemble:
    """Three base learners fit on the full training set plus the linear
    meta-model fit only on their leave-one-out predictions."""

    rf: object
    gbt: object
    svr: object
    meta: MetaFit
    loo_matrix: np.ndarray
    hyperparams: Hyperparams
    training_seed: int

    @property
    def base_models(self) -> tuple:
        return (self.rf, self.gbt, self.svr)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict_ensemble(self, X)


def fit_stacked_ensemble(
    ds: Dataset,
    hps: Hyperparams,
    seed: int,
    loo_hps: Hyperparams | None = None,
) -> StackedEnsemble:
    """Train the full ensemble: LOO matrix, meta coefficients, and the three
    full-data base models. ``loo_hps`` optionally shrinks base-learner size
    during the n leave-one-out refits (off by default)."""
    loo = loo_component_predictions(ds, loo_hps if loo_hps is not None else hps, seed)
    meta = fit_meta(loo, ds.y)
    models = {
        kind: train_learner(kind, ds, hps, mix_seed(seed, 0xBA5E, m))
        for m, kind in enumerate(LEARNER_KINDS)
    }
    return StackedEnsemble(
        rf=models["rf"], gbt=models["gbt"], svr=models["svr"],
        meta=meta, loo_matrix=loo, hyperparams=hps, training_seed=seed,
    )


def predict_ensemble(ens: StackedEnsemble, X: np.ndarray) -> np.ndarray:
    """Meta-linear combination of base predictions; never clamps."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    coef = ens.meta.coefficients
    out = np.full(X.shape[0], coef[0], dtype=np.float64)
    for m, model in enumerate(ens.base_models):
        if coef[m + 1] != 0.0:
            out += coef[m + 1] * model.predict(X)
    return out
