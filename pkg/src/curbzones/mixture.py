"""Diagonal-covariance Gaussian mixtures over (latitude, longitude, occupancy).

The functional core (:func:`e_step`, :func:`m_step`, :func:`em_fit`, ...)
works on min-max normalized feature matrices.  :class:`ZoneMixture` wraps it
in the scikit-learn estimator protocol and handles normalization itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from curbzones.exceptions import (
    ComponentCollapse,
    FitFailureError,
    InvalidInputError,
    InvalidModelError,
)

N_FEATURES = 3
FEATURE_NAMES = ("latitude", "longitude", "occupancy")
VAR_FLOOR = 1e-6
MASS_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EMConfig:
    epsilon: float = 1e-6
    max_iter: int = 500
    restarts: int = 10
    seed: int = 0
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if self.epsilon < 0 or self.max_iter < 1 or self.restarts < 1:
            raise InvalidInputError(f"invalid EM config {self}")

    def replace(self, **changes) -> "EMConfig":
        return EMConfig(**{**asdict(self), **changes})


# ----------------------------------------------------------------- normalization


def fit_norm_params(raw: np.ndarray) -> np.ndarray:
    """Per-column (min, max) as an array of shape (d, 2)."""
    raw = np.asarray(raw, dtype=float)
    return np.column_stack([raw.min(axis=0), raw.max(axis=0)])


def normalize(raw: np.ndarray, norm_params: np.ndarray) -> np.ndarray:
    """Min-max transform; a constant column (min == max) maps to zeros.

    Values outside the training range are not clamped.
    """
    raw = np.asarray(raw, dtype=float)
    lo, hi = norm_params[:, 0], norm_params[:, 1]
    scale = hi - lo
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, (raw - lo) / safe, 0.0)


def denormalize(features: np.ndarray, norm_params: np.ndarray) -> np.ndarray:
    lo, hi = norm_params[:, 0], norm_params[:, 1]
    return np.asarray(features, dtype=float) * (hi - lo) + lo


def raw_features(midpoints: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """Stack block-face midpoints (n, 2) and occupancy (n,) into (n, 3)."""
    midpoints = np.asarray(midpoints, dtype=float)
    occupancy = np.asarray(occupancy, dtype=float)
    if midpoints.shape != (occupancy.shape[0], 2):
        raise InvalidInputError("midpoints and occupancy lengths disagree")
    return np.column_stack([midpoints, occupancy])


# ------------------------------------------------------------------------ model


@dataclass
class ZoneModel:
    """A fitted mixture plus the normalization it was fitted under."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    norm_params: np.ndarray
    log_likelihood: float = float("nan")
    assignments: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    seed: int = 0
    n_iter: int = 0
    ll_history: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        self.norm_params = np.asarray(self.norm_params, dtype=float)
        self.assignments = np.asarray(self.assignments, dtype=int)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def validate(self, var_floor: float = VAR_FLOOR) -> None:
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.variances.shape != (k, d):
            raise InvalidModelError("inconsistent parameter shapes")
        if self.norm_params.shape != (d, 2):
            raise InvalidModelError("norm_params must have shape (d, 2)")
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise InvalidModelError("mixture weights must lie in [0, 1]")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidModelError(f"mixture weights sum to {self.weights.sum()}")
        # Relative slack absorbs the last-ulp wobble of a clamped value.
        if np.any(self.variances < var_floor * (1 - 1e-12)) or not np.all(np.isfinite(self.variances)):
            raise InvalidModelError(f"variance below floor {var_floor}")

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return normalize(raw, self.norm_params)

    def center_coordinates(self) -> np.ndarray:
        """Component means mapped back to raw units, shape (k, d)."""
        return denormalize(self.means, self.norm_params)

    def permuted(self, order: Sequence[int]) -> "ZoneModel":
        """Relabel components so new component ``j`` is old ``order[j]``."""
        order = np.asarray(order)
        inverse = np.argsort(order)
        return ZoneModel(
            self.weights[order], self.means[order], self.variances[order],
            self.norm_params.copy(), self.log_likelihood,
            inverse[self.assignments] if self.assignments.size else self.assignments,
            self.seed, self.n_iter, list(self.ll_history),
        )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "norm_params": self.norm_params.tolist(),
            "seed": int(self.seed),
            "log_likelihood": float(self.log_likelihood),
            "n_iter": int(self.n_iter),
            "assignments": self.assignments.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ZoneModel":
        model = cls(
            weights=doc["weights"], means=doc["means"], variances=doc["variances"],
            norm_params=doc["norm_params"], log_likelihood=doc["log_likelihood"],
            assignments=doc.get("assignments", []), seed=doc.get("seed", 0),
            n_iter=doc.get("n_iter", 0),
        )
        if model.k != doc["k"]:
            raise InvalidModelError("k does not match the parameter arrays")
        return model

    def to_json(self, **extra) -> str:
        # json emits floats via repr(), the shortest string that round-trips.
        return json.dumps({**self.to_dict(), **extra}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ZoneModel":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- core EM steps


def logsumexp(a: np.ndarray, axis: int = 1) -> np.ndarray:
    """``log(sum(exp(a)))`` along ``axis``, shifted by the max for stability.

    Rows that are entirely ``-inf`` give ``-inf``.
    """
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def _check_features(features, model=None) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise InvalidInputError("features must be a 2-D array")
    if model is not None and x.shape[1] != model.n_features:
        raise InvalidInputError(
            f"features have {x.shape[1]} columns, model expects {model.n_features}"
        )
    return x


def log_component_densities(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """``log N(x_i | mu_j, diag(var_j))`` as an (n, k) matrix."""
    d = x.shape[1]
    log_det = np.log(variances).sum(axis=1)
    sq = ((x[:, None, :] - means[None, :, :]) ** 2 / variances[None, :, :]).sum(axis=2)
    return -0.5 * (d * LOG_2PI + log_det[None, :] + sq)


def _weighted_log_dens(x, model):
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.weights)
    return log_component_densities(x, model.means, model.variances) + log_pi[None, :]


def log_likelihood(features, model: ZoneModel) -> float:
    """Sum over samples of the log mixture density."""
    x = _check_features(features, model)
    model.validate()
    return float(logsumexp(_weighted_log_dens(x, model), axis=1).sum())


def _responsibilities(x, model):
    wl = _weighted_log_dens(x, model)
    norm = logsumexp(wl, axis=1)
    return np.exp(wl - norm[:, None]), float(norm.sum())


def e_step(features, model: ZoneModel) -> np.ndarray:
    """Posterior component probabilities, an (n, k) row-stochastic matrix."""
    x = _check_features(features, model)
    model.validate()
    resp, _ = _responsibilities(x, model)
    return resp


def m_step(features, responsibilities, var_floor: float = VAR_FLOOR):
    """Maximize the expected complete-data log likelihood.

    Returns ``(weights, means, variances)``.  Raises
    :class:`~curbzones.exceptions.ComponentCollapse` when any component
    carries less than ``1e-8 * n`` responsibility mass.
    """
    x = _check_features(features)
    r = np.asarray(responsibilities, dtype=float)
    n = x.shape[0]
    if r.ndim != 2 or r.shape[0] != n:
        raise InvalidInputError("responsibilities must be (n, k)")
    if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("responsibilities must be row-stochastic")
    return _m_step(x, r, var_floor)


def _m_step(x, r, var_floor):
    n = x.shape[0]
    mass = r.sum(axis=0)
    collapsed = np.flatnonzero(mass < MASS_FLOOR * n)
    if collapsed.size:
        raise ComponentCollapse(collapsed.tolist())
    weights = mass / n
    weights = weights / weights.sum()
    means = (r.T @ x) / mass[:, None]
    dev = x[None, :, :] - means[:, None, :]
    variances = np.einsum("nk,knd->kd", r, dev * dev) / mass[:, None]
    return weights, means, np.maximum(variances, var_floor)


def _kmeanspp_means(x, k, rng):
    """Means drawn from the data with squared-distance weighting."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _single_run(x, k, config, rng):
    n = x.shape[0]
    col_var = np.maximum(x.var(axis=0), config.var_floor)
    model = ZoneModel(
        weights=np.full(k, 1.0 / k),
        means=_kmeanspp_means(x, k, rng),
        variances=np.tile(col_var, (k, 1)),
        norm_params=np.zeros((x.shape[1], 2)),
    )
    resp, ll = _responsibilities(x, model)
    history = [ll]
    reinitialized = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        try:
            weights, means, variances = _m_step(x, resp, config.var_floor)
        except ComponentCollapse as exc:
            if reinitialized:
                return None
            reinitialized = True
            means = model.means.copy()
            for j in exc.components:
                means[j] = x[rng.integers(n)]
            model = ZoneModel(np.full(k, 1.0 / k), means, np.tile(col_var, (k, 1)), model.norm_params)
            resp, ll = _responsibilities(x, model)
            # Reinitialization starts a fresh monotone sequence.
            history = [ll]
            continue
        model = ZoneModel(weights, means, variances, model.norm_params)
        resp, new_ll = _responsibilities(x, model)
        history.append(new_ll)
        delta = new_ll - ll
        ll = new_ll
        if delta <= config.epsilon:
            break
    model.log_likelihood = ll
    model.assignments = np.argmax(resp, axis=1)
    model.n_iter = n_iter
    model.ll_history = history
    return model


def em_fit(features, k: int, config: EMConfig | None = None, slice_id=None) -> ZoneModel:
    """Best-of-``restarts`` EM fit of a ``k``-component diagonal mixture.

    ``features`` must already be normalized; the returned model's
    ``norm_params`` default to the identity map [0, 1] and are normally
    overwritten by the caller (see :func:`fit_slice`).
    """
    config = config or EMConfig()
    x = _check_features(features)
    n = x.shape[0]
    if k < 1 or n < k:
        raise InvalidInputError(f"need 1 <= k <= n, got k={k}, n={n}")
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best = None
    for seq in seeds:
        run = _single_run(x, k, config, np.random.default_rng(seq))
        if run is None:
            continue
        if best is None or run.log_likelihood > best.log_likelihood:
            best = run
    if best is None:
        raise FitFailureError(f"all {config.restarts} restarts collapsed for k={k}", slice_id)
    best.seed = config.seed
    best.norm_params = np.tile([0.0, 1.0], (x.shape[1], 1))
    return best


def fit_slice(raw, k: int, config: EMConfig | None = None, slice_id=None) -> ZoneModel:
    """Normalize raw (lat, lon, occupancy) rows, fit, and keep the normalization."""
    raw = np.asarray(raw, dtype=float)
    params = fit_norm_params(raw)
    model = em_fit(normalize(raw, params), k, config, slice_id=slice_id)
    model.norm_params = params
    return model


def assign(features_new, model: ZoneModel) -> np.ndarray:
    """Hard labels under a fixed model; ties go to the lowest component index."""
    x = _check_features(features_new, model)
    model.validate()
    return np.argmax(_weighted_log_dens(x, model), axis=1)


def n_parameters(k: int, d: int = N_FEATURES) -> int:
    """Degrees of freedom of a diagonal mixture: d means, d variances and a weight per component."""
    return k * (2 * d + 1)


def bic(model: ZoneModel, n: int) -> float:
    if n < 1:
        raise InvalidInputError("BIC needs n >= 1")
    model.validate()
    return -2.0 * model.log_likelihood + math.log(n) * n_parameters(model.k, model.n_features)


@dataclass
class KSelection:
    k: int
    mean_bic: dict
    slice_bic: dict


def _slice_seed(seed, k, key):
    return int(np.random.SeedSequence([seed, k, *key]).generate_state(1)[0])


def select_k(grid, blockfaces, k_range=range(2, 11), config: EMConfig | None = None,
             date_range=None, return_details: bool = False):
    """Component count minimizing the BIC averaged over (day, hour) slices.

    Each slice is the per-block mean occupancy over ``date_range`` for one
    (day-of-week, hour).  Ties resolve to the smallest k.
    """
    from curbzones.ingest import slice_mean

    config = config or EMConfig()
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise InvalidInputError("k_range is empty")
    midpoints = _midpoints_for(grid, blockfaces)
    n = grid.n_blocks
    if ks[-1] > n or ks[0] < 1:
        raise InvalidInputError(f"k_range {ks} is outside [1, n={n}]")
    keys = grid.slice_keys()
    if date_range is not None:
        keys = [key for key in keys if grid.matching(*key, date_range).size]
    if not keys:
        raise InvalidInputError("no slices to select k on")
    slices = {key: raw_features(midpoints, slice_mean(grid, *key, date_range)) for key in keys}
    if len(ks) == 1 and not return_details:
        return ks[0]
    slice_bic = {}
    for k in ks:
        for key, raw in slices.items():
            cfg = config.replace(seed=_slice_seed(config.seed, k, key))
            model = fit_slice(raw, k, cfg, slice_id=key)
            slice_bic[(k, key)] = bic(model, n)
    mean_bic = {k: float(np.mean([slice_bic[(k, key)] for key in keys])) for k in ks}
    best = min(ks, key=lambda k: (mean_bic[k], k))
    if return_details:
        return KSelection(best, mean_bic, slice_bic)
    return best


def _midpoints_for(grid, blockfaces) -> np.ndarray:
    by_id = {bf.id: bf for bf in blockfaces}
    try:
        return np.array([by_id[b].midpoint for b in grid.block_ids], dtype=float)
    except KeyError as exc:
        raise InvalidInputError(f"grid block {exc.args[0]} has no block-face record") from None


# ------------------------------------------------------------ estimator facade


class MinMaxFeatures(TransformerMixin, BaseEstimator):
    """Column-wise min-max scaling to [0, 1] with constant columns sent to 0."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.norm_params_ = fit_norm_params(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "norm_params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError("feature count differs from fit")
        return normalize(X, self.norm_params_)

    def inverse_transform(self, X):
        check_is_fitted(self, "norm_params_")
        return denormalize(check_array(X, dtype=float), self.norm_params_)


class ZoneMixture(ClusterMixin, BaseEstimator):
    """Diagonal Gaussian mixture on raw (latitude, longitude, occupancy) rows.

    Parameters
    ----------
    n_components : int
        Number of zones ``k``.
    tol : float
        Stop when the log-likelihood gain of an iteration is at most ``tol``.
    max_iter : int
        Iteration cap per restart.
    n_init : int
        Number of seeded restarts; the highest log likelihood wins.
    random_state : int
        Base seed; restart seeds are spawned from it.
    var_floor : float
        Lower bound on every diagonal variance, in normalized units.

    Attributes
    ----------
    model_ : ZoneModel
    labels_ : ndarray of shape (n_samples,)
    weights_, means_, variances_ : ndarray
        Parameters in normalized feature units.
    """

    def __init__(self, n_components=4, tol=1e-6, max_iter=500, n_init=10,
                 random_state=0, var_floor=VAR_FLOOR):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state
        self.var_floor = var_floor

    def _config(self):
        return EMConfig(self.tol, self.max_iter, self.n_init, int(self.random_state or 0), self.var_floor)

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.model_ = fit_slice(X, self.n_components, self._config())
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.model_.assignments
        self.weights_ = self.model_.weights
        self.means_ = self.model_.means
        self.variances_ = self.model_.variances
        self.log_likelihood_ = self.model_.log_likelihood
        self.n_iter_ = self.model_.n_iter
        return self

    def _normalized(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return self.model_.normalize(X)

    def predict(self, X):
        return assign(self._normalized(X), self.model_)

    def predict_proba(self, X):
        return e_step(self._normalized(X), self.model_)

    def score_samples(self, X):
        x = self._normalized(X)
        return logsumexp(_weighted_log_dens(x, self.model_), axis=1)

    def score(self, X, y=None):
        """Mean per-sample log likelihood in normalized units."""
        return float(self.score_samples(X).mean())

    def bic(self, X):
        X = check_array(X, dtype=float)
        ll = float(self.score_samples(X).sum())
        return -2.0 * ll + math.log(X.shape[0]) * n_parameters(self.n_components, X.shape[1])
