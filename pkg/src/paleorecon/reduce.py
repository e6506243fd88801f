"""
Data reduction of proxy nests: every method condenses a nest's standardized
proxy panel into one reduced proxy (RP), the fitted temperature prediction,
re-standardized over the calibration window.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.model_selection import KFold

from .const import (
    LASSO_MIN_RATIO,
    R2_MIN,
    SIR_EIGEN_RATIO,
    SIR_RIDGE_FRACTION,
    SPCR_THRESHOLD_GRID,
    SPLS_ETA_GRID,
    ReductionMethod,
    ReductionSettings,
)
from .exceptions import DegenerateSeriesError, ReductionError
from .splines import adjusted_r2
from .timeseries import ProxyNest, TimeSeries

logger = logging.getLogger(__name__)


def _check_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ReductionError(f"Incompatible shapes X{X.shape}, y{y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        logger.error("Non-finite entries in reduction inputs")
        raise ReductionError("X and y must be finite")
    return X, y


def _r2(y, fitted) -> float:
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        return float("nan")
    return float(1.0 - np.sum((y - fitted) ** 2) / sst)


@dataclass(frozen=True, eq=False)
class ReductionModel:
    """
    Linear reduction y ~ intercept + X @ coef on the standardized proxy
    columns of a nest.

    Parameters:
        method (ReductionMethod): Estimator that produced the fit.
        coef (np.ndarray): One coefficient per standardized column.
        intercept (float): Constant term.
        hyperparameters (dict): Selected lambda, (K, eta), slices, PC count or threshold.
        directions (np.ndarray or None): Direction/loading matrix (p x d) where the method has one.
        column_means, column_sds (np.ndarray): Raw-unit standardization of the columns.
        r2, adj_r2 (float): Calibration fit of the training data.
        flagged (bool): Selection rule fell back (e.g. R^2 threshold never reached).
    """

    method: ReductionMethod
    coef: np.ndarray
    intercept: float
    hyperparameters: Dict = field(default_factory=dict)
    directions: Optional[np.ndarray] = None
    column_means: Optional[np.ndarray] = None
    column_sds: Optional[np.ndarray] = None
    r2: float = float("nan")
    adj_r2: float = float("nan")
    n_predictors: int = 1
    flagged: bool = False

    @property
    def n_columns(self) -> int:
        return self.coef.size

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.coef.size:
            raise ReductionError(f"Model expects {self.coef.size} columns, got {X.shape[-1]}")
        return self.intercept + X @ self.coef

    def original_coefficients(self) -> Tuple[np.ndarray, float]:
        """Coefficients and intercept on raw proxy units."""
        means = np.zeros(self.coef.size) if self.column_means is None else self.column_means
        sds = np.ones(self.coef.size) if self.column_sds is None else self.column_sds
        coef = self.coef / sds
        return coef, float(self.intercept - coef @ means)

    def with_standardization(self, means, sds) -> "ReductionModel":
        return ReductionModel(
            method=self.method,
            coef=self.coef,
            intercept=self.intercept,
            hyperparameters=self.hyperparameters,
            directions=self.directions,
            column_means=np.asarray(means, dtype=float),
            column_sds=np.asarray(sds, dtype=float),
            r2=self.r2,
            adj_r2=self.adj_r2,
            n_predictors=self.n_predictors,
            flagged=self.flagged,
        )


def _finish(method, X, y, coef, intercept, n_predictors, hyperparameters, directions=None, flagged=False):
    fitted = intercept + X @ coef
    return ReductionModel(
        method=ReductionMethod(method),
        coef=np.asarray(coef, dtype=float),
        intercept=float(intercept),
        hyperparameters=dict(hyperparameters),
        directions=directions,
        r2=_r2(y, fitted),
        adj_r2=adjusted_r2(y, fitted, n_predictors),
        n_predictors=int(n_predictors),
        flagged=flagged,
    )


# ---------------------------------------------------------------- lasso


def _soft_threshold(z, threshold):
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def _lasso_cd(gram, corr, lam, beta, tol, max_iter):
    diag = np.diag(gram)
    for _ in range(max_iter):
        max_change = 0.0
        for j in range(beta.size):
            if diag[j] <= 0:
                beta[j] = 0.0
                continue
            rho = corr[j] - gram[j] @ beta + diag[j] * beta[j]
            new = _soft_threshold(rho, lam) / diag[j]
            max_change = max(max_change, abs(new - beta[j]))
            beta[j] = new
        if max_change < tol:
            return beta
    logger.warning(f"Coordinate descent stopped after {max_iter} sweeps at lambda={lam:.3e}")
    return beta


def lasso_fit(X, y, lam: float, tol: float = 1e-10, max_iter: int = 100000, initial=None) -> np.ndarray:
    """
    Minimizes (1/2n)||y - ybar - X beta||^2 + lam ||beta||_1 by cyclic
    coordinate descent on the Gram matrix.

    Raises:
        ReductionError: lam < 0 or non-finite inputs.
    """
    X, y = _check_xy(X, y)
    if not np.isfinite(lam) or lam < 0:
        raise ReductionError(f"Lasso penalty must be >= 0, got {lam}")
    n = y.size
    gram = X.T @ X / n
    corr = X.T @ (y - y.mean()) / n
    beta = np.zeros(X.shape[1]) if initial is None else np.array(initial, dtype=float)
    return _lasso_cd(gram, corr, lam, beta, tol, max_iter)


def lasso_kkt_residual(X, y, beta, lam: float) -> float:
    """Largest violation of the lasso subgradient conditions."""
    X, y = _check_xy(X, y)
    beta = np.asarray(beta, dtype=float)
    grad = X.T @ (y - y.mean() - X @ beta) / y.size
    active = beta != 0
    violation = np.where(
        active,
        np.abs(grad - lam * np.sign(beta)),
        np.maximum(np.abs(grad) - lam, 0.0),
    )
    return float(np.max(violation, initial=0.0))


def lambda_max(X, y) -> float:
    X, y = _check_xy(X, y)
    return float(np.max(np.abs(X.T @ (y - y.mean()))) / y.size)


def lambda_grid(
    X, y, size: int = ReductionSettings.LASSO_GRID_SIZE, ratio: float = LASSO_MIN_RATIO
) -> np.ndarray:
    """`size` log-spaced penalties from lambda_max down to ratio * lambda_max."""
    top = lambda_max(X, y)
    if top <= 0:
        raise ReductionError("Response is uncorrelated with every column; lambda_max is 0")
    return np.geomspace(top, ratio * top, int(size))


def lasso_path(X, y, grid, tol: float = 1e-10) -> np.ndarray:
    """Warm-started solutions along `grid`, one row per penalty."""
    X, y = _check_xy(X, y)
    n = y.size
    gram = X.T @ X / n
    corr = X.T @ (y - y.mean()) / n
    beta = np.zeros(X.shape[1])
    path = np.empty((len(grid), X.shape[1]))
    for i, lam in enumerate(grid):
        if lam < 0:
            raise ReductionError(f"Lasso penalty must be >= 0, got {lam}")
        beta = _lasso_cd(gram, corr, float(lam), beta, tol, 100000)
        path[i] = beta
    return path


# ---------------------------------------------------------------- cross validation


@dataclass(frozen=True)
class CVSelection:
    value: object
    index: int
    errors: np.ndarray


def cv_select(
    X,
    y,
    grid: Sequence,
    fit_predict: Callable,
    folds: int = ReductionSettings.FOLDS,
    seed: int = 0,
) -> CVSelection:
    """
    K-fold cross-validation over `grid`, which must be ordered from the
    simplest model to the most complex; ties go to the simplest.

    Parameters:
        fit_predict (callable): fit_predict(X_train, y_train, X_test, grid) ->
            predictions of shape (len(grid), n_test). NaN marks a grid value
            that cannot be fitted on a fold.

    Raises:
        ReductionError: empty grid or fewer samples than folds.
    """
    X, y = _check_xy(X, y)
    grid = list(grid)
    if not grid:
        logger.error("Cross-validation called with an empty grid")
        raise ReductionError("Cross-validation grid is empty")
    if y.size < folds:
        raise ReductionError(f"{y.size} samples cannot be split into {folds} folds")
    if len(grid) == 1:
        return CVSelection(grid[0], 0, np.zeros(1))

    sse = np.zeros(len(grid))
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for train, test in splitter.split(X):
        predictions = np.asarray(fit_predict(X[train], y[train], X[test], grid), dtype=float)
        sse += np.sum((predictions - y[test][None, :]) ** 2, axis=1)
    errors = np.where(np.isnan(sse), np.inf, sse / y.size)
    if not np.any(np.isfinite(errors)):
        raise ReductionError("No grid value could be fitted on every fold")
    best = int(np.flatnonzero(errors <= errors.min())[0])
    return CVSelection(grid[best], best, errors)


def _lasso_fold(X_tr, y_tr, X_te, grid):
    means = X_tr.mean(axis=0)
    path = lasso_path(X_tr - means, y_tr, grid)
    return (y_tr.mean() + (X_te - means) @ path.T).T


def lasso_model(
    X, y, folds: int = ReductionSettings.FOLDS, seed: int = 0, grid=None
) -> ReductionModel:
    """Lasso with lambda picked by cross-validation on a decreasing grid."""
    X, y = _check_xy(X, y)
    grid = lambda_grid(X, y) if grid is None else np.asarray(grid, dtype=float)
    selection = cv_select(X, y, grid, _lasso_fold, folds, seed)
    path = lasso_path(X, y, grid[: selection.index + 1])
    beta = path[-1]
    lam = float(selection.value)
    if not np.any(beta):
        full = lasso_path(X, y, grid)
        nonzero = np.flatnonzero(np.any(full != 0, axis=1))
        if nonzero.size:
            step = int(nonzero[0])
            logger.warning(
                f"CV selected an empty lasso model; stepping down to lambda={grid[step]:.3e}"
            )
            lam, beta = float(grid[step]), full[step]
    intercept = y.mean() - X.mean(axis=0) @ beta
    return _finish(
        ReductionMethod.LASSO,
        X,
        y,
        beta,
        intercept,
        int(np.count_nonzero(beta)),
        {"lambda": lam, "nonzero": int(np.count_nonzero(beta))},
    )


# ---------------------------------------------------------------- sparse PLS


def spls_fit(X, y, eta: float, K: int) -> ReductionModel:
    """
    Sparse PLS with K components: each direction is the soft-thresholded
    covariance of the deflated block with the deflated response (threshold
    eta * max), normalized to unit length. The response is then regressed on
    the latent scores.

    Raises:
        ReductionError: K < 1, K > min(n - 1, p) or eta outside [0, 1).
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    if K < 1:
        raise ReductionError("sPLS needs at least one component")
    if K > min(n - 1, p):
        raise ReductionError(f"K={K} exceeds min(n-1, p)={min(n - 1, p)}")
    if not 0.0 <= eta < 1.0:
        raise ReductionError(f"eta must lie in [0, 1), got {eta}")

    x_mean, y_mean = X.mean(axis=0), y.mean()
    E = X - x_mean
    f = y - y_mean
    W, P = [], []
    for _ in range(K):
        z = E.T @ f
        top = np.max(np.abs(z))
        if top <= 1e-14 * max(1.0, np.abs(X).max()):
            logger.debug(f"sPLS stopped after {len(W)} components: nothing left to explain")
            break
        w = _soft_threshold(z, eta * top)
        w /= np.linalg.norm(w)
        t = E @ w
        tt = t @ t
        if tt <= 0:
            break
        loading = E.T @ t / tt
        E = E - np.outer(t, loading)
        f = f - t * (t @ f) / tt
        W.append(w)
        P.append(loading)
    if not W:
        raise ReductionError("sPLS found no direction; the response has no covariance with X")

    W = np.column_stack(W)
    P = np.column_stack(P)
    R = W @ np.linalg.inv(P.T @ W)
    scores = (X - x_mean) @ R
    q, *_ = np.linalg.lstsq(scores, y - y_mean, rcond=None)
    coef = R @ q
    return _finish(
        ReductionMethod.SPLS,
        X,
        y,
        coef,
        y_mean - x_mean @ coef,
        W.shape[1],
        {"K": int(W.shape[1]), "eta": float(eta)},
        directions=W,
    )


def spls_grid(n: int, p: int, etas=SPLS_ETA_GRID, max_components: int = ReductionSettings.SPLS_MAX_COMPONENTS):
    """(K, eta) pairs, simplest first: fewer components, then sparser."""
    top = min(max_components, n - 1, p)
    return sorted(((k, float(e)) for k in range(1, top + 1) for e in etas), key=lambda g: (g[0], -g[1]))


def _spls_fold(X_tr, y_tr, X_te, grid):
    out = np.full((len(grid), X_te.shape[0]), np.nan)
    for i, (k, eta) in enumerate(grid):
        try:
            out[i] = spls_fit(X_tr, y_tr, eta, k).predict(X_te)
        except ReductionError:
            pass
    return out


def spls_select(
    X, y, folds: int = ReductionSettings.FOLDS, seed: int = 0, etas=SPLS_ETA_GRID
) -> ReductionModel:
    X, y = _check_xy(X, y)
    grid = spls_grid(X.shape[0] - X.shape[0] // folds, X.shape[1], etas)
    if not grid:
        raise ReductionError("sPLS grid is empty")
    selection = cv_select(X, y, grid, _spls_fold, folds, seed)
    k, eta = selection.value
    return spls_fit(X, y, eta, k)


# ---------------------------------------------------------------- SIR


@dataclass(frozen=True, eq=False)
class SIRDirections:
    directions: np.ndarray
    eigenvalues: np.ndarray
    ridge: float

    def retained(self, ratio: float = SIR_EIGEN_RATIO) -> int:
        top = self.eigenvalues[0]
        if top <= 0:
            return 1
        return int(np.sum(self.eigenvalues >= ratio * top))


def sir_directions(X, y, H: int = ReductionSettings.SLICES, ridge: Optional[float] = None) -> SIRDirections:
    """
    Sliced inverse regression. Observations are sorted by y and cut into H
    near-equal slices; the directions solve M v = lambda (Sigma + ridge I) v
    with M the weighted covariance of the slice means.

    Parameters:
        ridge (float or None): None uses 0.01 * trace(Sigma) / p when p >= n
            and 0 otherwise.

    Returns:
        SIRDirections: unit-norm directions (p x p) by decreasing eigenvalue.

    Raises:
        ReductionError: H < 2, ridge < 0, or a slice with fewer than 2 points.
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    if H < 2:
        raise ReductionError(f"SIR needs at least 2 slices, got {H}")
    slices = np.array_split(np.argsort(y, kind="stable"), H)
    smallest = min(len(s) for s in slices)
    if smallest < 2:
        logger.error(f"SIR slice with {smallest} points (n={n}, H={H})")
        raise ReductionError(f"A slice holds {smallest} points; use at most {n // 2} slices")

    Xc = X - X.mean(axis=0)
    sigma = Xc.T @ Xc / n
    if ridge is None:
        ridge = SIR_RIDGE_FRACTION * np.trace(sigma) / p if p >= n else 0.0
    if ridge < 0:
        raise ReductionError(f"Ridge must be >= 0, got {ridge}")

    M = np.zeros((p, p))
    for s in slices:
        m = Xc[s].mean(axis=0)
        M += len(s) / n * np.outer(m, m)
    try:
        values, vectors = linalg.eigh(M, sigma + ridge * np.eye(p))
    except linalg.LinAlgError as e:
        logger.error(f"SIR eigenproblem failed: {e}")
        raise ReductionError(f"Predictor covariance is singular; supply a ridge ({e})")
    order = np.argsort(values)[::-1]
    vectors = vectors[:, order]
    vectors /= np.linalg.norm(vectors, axis=0)[None, :]
    return SIRDirections(vectors, np.maximum(values[order], 0.0), float(ridge))


def sir_fit(
    X, y, H: int = ReductionSettings.SLICES, ridge: Optional[float] = None, ratio: float = SIR_EIGEN_RATIO
) -> ReductionModel:
    """SIR directions followed by least squares of y on the retained scores."""
    X, y = _check_xy(X, y)
    H = min(H, X.shape[0] // 2)
    sir = sir_directions(X, y, H, ridge)
    d = sir.retained(ratio)
    V = sir.directions[:, :d]
    x_mean = X.mean(axis=0)
    scores = (X - x_mean) @ V
    b, *_ = np.linalg.lstsq(scores, y - y.mean(), rcond=None)
    coef = V @ b
    return _finish(
        ReductionMethod.SIR,
        X,
        y,
        coef,
        y.mean() - x_mean @ coef,
        d,
        {"slices": int(H), "directions": d, "ridge": sir.ridge},
        directions=V,
    )


# ---------------------------------------------------------------- PCR and sPCR


def first_crossing(values, threshold: float) -> Optional[int]:
    """1-based position of the first value >= threshold, None if there is none."""
    hits = np.flatnonzero(np.asarray(values, dtype=float) >= threshold)
    return int(hits[0]) + 1 if hits.size else None


@dataclass(frozen=True)
class PCRSelection:
    k: int
    adjusted_r2: np.ndarray
    flagged: bool


def _pcr_core(X, y):
    n = y.size
    if n <= 2:
        raise ReductionError(f"PCR needs n > 2, got {n}")
    Xc = X - X.mean(axis=0)
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    rank = int(np.sum(S > 1e-10 * max(S[0] if S.size else 0.0, 1e-300)))
    kmax = min(rank, n - 2)
    if kmax < 1:
        raise ReductionError("Calibration matrix has no principal component")
    yc = y - y.mean()
    sst = yc @ yc
    if sst == 0:
        raise DegenerateSeriesError("Constant response")
    gains = np.cumsum((U[:, :kmax].T @ yc) ** 2)
    r2 = gains / sst
    ks = np.arange(1, kmax + 1)
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - ks - 1)
    return U, S, Vt, adj


def pcr_select(X, y, r2_min: float = R2_MIN) -> PCRSelection:
    """
    Smallest number of leading principal components whose regression reaches
    adjusted R^2 >= r2_min; otherwise the adjusted-R^2 maximum, flagged.

    Raises:
        ReductionError: n <= 2.
    """
    X, y = _check_xy(X, y)
    *_, adj = _pcr_core(X, y)
    k = first_crossing(adj, r2_min)
    if k is None:
        k = int(np.argmax(adj)) + 1
        logger.warning(f"PCR adjusted R^2 never reached {r2_min}; using k={k} ({adj[k - 1]:.3f})")
        return PCRSelection(k, adj, True)
    return PCRSelection(k, adj, False)


def _pcr_coef(X, y, k):
    U, S, Vt, _ = _pcr_core(X, y)
    b = (U[:, :k].T @ (y - y.mean())) / S[:k]
    return Vt[:k].T @ b, Vt[:k].T


def pcr_fit(X, y, r2_min: float = R2_MIN) -> ReductionModel:
    X, y = _check_xy(X, y)
    selection = pcr_select(X, y, r2_min)
    coef, loadings = _pcr_coef(X, y, selection.k)
    return _finish(
        ReductionMethod.PCR,
        X,
        y,
        coef,
        y.mean() - X.mean(axis=0) @ coef,
        selection.k,
        {"components": selection.k},
        directions=loadings,
        flagged=selection.flagged,
    )


def _correlations(X, y):
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt(np.sum(Xc**2, axis=0) * (yc @ yc))
    return np.divide(Xc.T @ yc, denom, out=np.zeros(X.shape[1]), where=denom > 0)


def _spcr_predict(X_tr, y_tr, X_te, theta, r2_min):
    keep = np.flatnonzero(np.abs(_correlations(X_tr, y_tr)) >= theta)
    if keep.size == 0:
        return None
    sub = X_tr[:, keep]
    *_, adj = _pcr_core(sub, y_tr)
    k = first_crossing(adj, r2_min) or int(np.argmax(adj)) + 1
    coef, _ = _pcr_coef(sub, y_tr, k)
    return y_tr.mean() + (X_te[:, keep] - sub.mean(axis=0)) @ coef


def spcr_fit(
    X,
    y,
    thresholds: Sequence[float] = SPCR_THRESHOLD_GRID,
    folds: int = ReductionSettings.FOLDS,
    seed: int = 0,
    r2_min: float = R2_MIN,
) -> ReductionModel:
    """
    Supervised PCR: keep the columns with |corr(X_j, y)| >= theta, theta by
    cross-validation, then PCR on the survivors.

    Raises:
        ReductionError: no column survives the smallest threshold.
    """
    X, y = _check_xy(X, y)
    corr = np.abs(_correlations(X, y))
    grid = sorted((float(t) for t in thresholds if np.any(corr >= t)), reverse=True)
    if not grid:
        logger.error(f"No column reaches |r| >= {min(thresholds)} (max {corr.max():.3f})")
        raise ReductionError(
            f"No column survives the screening threshold {min(thresholds)}; max |r| = {corr.max():.3f}"
        )

    def fold(X_tr, y_tr, X_te, values):
        out = np.full((len(values), X_te.shape[0]), np.nan)
        for i, theta in enumerate(values):
            try:
                pred = _spcr_predict(X_tr, y_tr, X_te, theta, r2_min)
            except (ReductionError, DegenerateSeriesError):
                pred = None
            if pred is not None:
                out[i] = pred
        return out

    theta = cv_select(X, y, grid, fold, folds, seed).value
    keep = np.flatnonzero(corr >= theta)
    sub = X[:, keep]
    selection = pcr_select(sub, y, r2_min)
    sub_coef, loadings = _pcr_coef(sub, y, selection.k)
    coef = np.zeros(X.shape[1])
    coef[keep] = sub_coef
    directions = np.zeros((X.shape[1], selection.k))
    directions[keep] = loadings
    return _finish(
        ReductionMethod.SPCR,
        X,
        y,
        coef,
        y.mean() - X.mean(axis=0) @ coef,
        selection.k,
        {"threshold": theta, "columns": int(keep.size), "components": selection.k},
        directions=directions,
        flagged=selection.flagged,
    )


def fit_reduction(
    method,
    X,
    y,
    seed: int = 0,
    folds: int = ReductionSettings.FOLDS,
    slices: int = ReductionSettings.SLICES,
    r2_min: float = R2_MIN,
) -> ReductionModel:
    """Fits one reduction method with its own selection rule."""
    method = ReductionMethod(method)
    if method is ReductionMethod.LASSO:
        return lasso_model(X, y, folds, seed)
    if method is ReductionMethod.SPLS:
        return spls_select(X, y, folds, seed)
    if method is ReductionMethod.SIR:
        return sir_fit(X, y, slices)
    if method is ReductionMethod.PCR:
        return pcr_fit(X, y, r2_min)
    return spcr_fit(X, y, folds=folds, seed=seed, r2_min=r2_min)


# ---------------------------------------------------------------- reduced proxies


@dataclass(frozen=True, eq=False)
class ReducedProxy:
    nest_index: int
    method: ReductionMethod
    series: TimeSeries
    r2: float
    adj_r2: float
    model: Optional[ReductionModel] = None

    @property
    def calibration_fit(self) -> Tuple[float, float]:
        return self.r2, self.adj_r2


def build_reduced_proxy(nest: ProxyNest, model: ReductionModel, target: TimeSeries) -> ReducedProxy:
    """
    Applies the fitted model to the nest's standardized, infilled panel over
    its observation window and standardizes the result over the calibration
    window.

    Years where every panel member is missing stay missing in the reduced
    proxy.

    Raises:
        ReductionError: empty nest or column mismatch.
    """
    if nest.is_empty:
        raise ReductionError(f"Nest {nest.index} has no proxies")
    if model.n_columns != len(nest.panel):
        raise ReductionError(
            f"Model has {model.n_columns} columns, nest {nest.index} panel has {len(nest.panel)}"
        )
    start, end = nest.observation_window
    raw = nest.panel_matrix()
    empty = np.all(np.isnan(raw), axis=1)
    if empty.any():
        logger.warning(f"Nest {nest.index}: {int(empty.sum())} years without any observed proxy left missing")

    values = model.predict(nest.standardized_panel())
    values[empty] = np.nan
    c0, c1 = nest.calibration_window
    cal = values[c0 - start : c1 - start + 1]
    sd = np.nanstd(cal)
    if not sd > 0:
        raise DegenerateSeriesError(f"Reduced proxy of nest {nest.index} is constant over calibration")
    series = TimeSeries(start, (values - np.nanmean(cal)) / sd, name=f"RP{nest.index}-{model.method.value}")

    y = target.window(c0, c1)
    fitted = model.predict(nest.calibration_matrix)
    return ReducedProxy(
        nest_index=nest.index,
        method=model.method,
        series=series,
        r2=_r2(y, fitted),
        adj_r2=adjusted_r2(y, fitted, model.n_predictors),
        model=model.with_standardization(nest.column_means, nest.column_sds),
    )


def reduce_nest(nest: ProxyNest, target: TimeSeries, method, seed: int = 0, **kwargs) -> ReducedProxy:
    """Fits `method` on the nest's calibration matrix and builds its reduced proxy."""
    y = target.window(*nest.calibration_window)
    if np.isnan(y).any():
        raise DegenerateSeriesError("Calibration temperatures must be complete")
    model = fit_reduction(method, nest.calibration_matrix, y, seed=seed, **kwargs)
    rp = build_reduced_proxy(nest, model, target)
    logger.info(
        f"Nest {nest.index} {rp.method.value}: {model.hyperparameters}, adj. R^2 {rp.adj_r2:.3f}"
    )
    return rp


def reduce_all(
    nests: Sequence[ProxyNest],
    target: TimeSeries,
    methods: Sequence = tuple(ReductionMethod),
    seed: int = 0,
    n_jobs: Optional[int] = None,
    **kwargs,
) -> Dict[Tuple[int, ReductionMethod], ReducedProxy]:
    """Reduced proxies for every non-empty nest and method, keyed by (nest, method)."""
    jobs = []
    for nest in nests:
        if nest.is_empty:
            logger.warning(f"Nest {nest.index} is empty; skipped")
            continue
        jobs += [(nest, ReductionMethod(m)) for m in methods]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        results = list(pool.map(lambda job: reduce_nest(job[0], target, job[1], seed, **kwargs), jobs))
    return {(nest.index, method): rp for (nest, method), rp in zip(jobs, results)}


def rp_correlation_matrix(rps: Mapping) -> pd.DataFrame:
    """
    Pairwise correlations of reduced proxies (keyed by method) over their
    common years; symmetric with a unit diagonal.
    """
    labels = [getattr(k, "value", str(k)) for k in rps]
    series = list(rps.values())
    if not series:
        return pd.DataFrame()
    start = max(rp.series.start_year for rp in series)
    end = min(rp.series.end_year for rp in series)
    if end < start:
        raise ReductionError("Reduced proxies share no years")
    stacked = np.vstack([rp.series.window(start, end) for rp in series])
    stacked = stacked[:, ~np.any(np.isnan(stacked), axis=0)]
    corr = np.corrcoef(stacked) if len(series) > 1 else np.ones((1, 1))
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return pd.DataFrame(corr, index=labels, columns=labels)
