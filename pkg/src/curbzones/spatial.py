"""Spatial weight matrices and global Moran's I with significance tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from curbzones.exceptions import (
    DegenerateVarianceError,
    DegenerateWeightsError,
    InvalidInputError,
)

ALPHA = 0.01
MODES = (
    "knn", "global_distance", "area_connections", "area_distance",
    "gmm_connections", "gmm_distance",
)
MIN_PERMUTATIONS = 100


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    w: np.ndarray
    mode: str
    k: int | None = None
    # rows with no admissible neighbour (singleton label groups)
    isolated: tuple[int, ...] = ()

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise InvalidInputError("weight matrix must be square")
        if np.any(w < 0):
            raise InvalidInputError("weights must be nonnegative")
        if np.any(np.diag(w) != 0):
            raise InvalidInputError("weight matrix diagonal must be zero")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def tag(self) -> str:
        return f"knn{self.k}" if self.mode == "knn" else self.mode

    def symmetrized(self) -> "WeightMatrix":
        return WeightMatrix((self.w + self.w.T) / 2.0, self.mode, self.k, self.isolated)


@dataclass
class MoranReport:
    I: float
    expected_I: float
    z_score: float
    p_value: float
    significant: bool
    mode: str = ""
    slice_id: object = None
    method: str = "analytic"


def _coords(points) -> np.ndarray:
    """Midpoint coordinates from block-faces or an (n, 2) array."""
    if len(points) and hasattr(points[0], "midpoint"):
        return np.array([bf.midpoint for bf in points], dtype=float)
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInputError("coordinates must have shape (n, 2)")
    return pts


def _ids(points, ids):
    if ids is not None:
        return list(ids)
    if len(points) and hasattr(points[0], "id"):
        return [bf.id for bf in points]
    return list(range(len(points)))


def _row_closeness(dist_row: np.ndarray, admissible: np.ndarray) -> np.ndarray:
    """Nearest admissible neighbour -> 1, farthest -> 0, linear in between."""
    out = np.zeros_like(dist_row)
    if not admissible.any():
        return out
    d = dist_row[admissible]
    lo, hi = d.min(), d.max()
    out[admissible] = 1.0 if hi == lo else (hi - d) / (hi - lo)
    return out


def build_weights(points, mode: str, *, k: int | None = None, labels=None,
                  ids: Sequence | None = None) -> WeightMatrix:
    """Spatial weights for block-faces under one of six designs.

    Parameters
    ----------
    points : sequence of BlockFace or array of shape (n, 2)
        Midpoints as (latitude, longitude) degrees.
    mode : str
        One of ``knn``, ``global_distance``, ``area_connections``,
        ``area_distance``, ``gmm_connections``, ``gmm_distance``.
    k : int
        Neighbour count for ``knn``.
    labels : sequence
        Paid-area labels (``area_*``) or component assignments (``gmm_*``).
        For ``area_*`` modes, block-face ``paid_area`` is used when omitted.
    ids : sequence, optional
        Sort keys used to break kNN distance ties.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown weight mode {mode!r}")
    xy = _coords(points)
    n = xy.shape[0]
    if n < 2:
        raise InvalidInputError("need at least two block-faces")
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2))
    off_diag = ~np.eye(n, dtype=bool)
    w = np.zeros((n, n))
    isolated = ()

    if mode == "knn":
        if k is None or not 1 <= k < n:
            raise InvalidInputError(f"knn needs 1 <= k < n, got k={k}, n={n}")
        block_ids = _ids(points, ids)
        rank = np.empty(n, dtype=int)
        rank[sorted(range(n), key=lambda i: block_ids[i])] = np.arange(n)
        for i in range(n):
            others = np.flatnonzero(off_diag[i])
            order = np.lexsort((rank[others], dist[i, others]))
            w[i, others[order[:k]]] = 1.0
    elif mode == "global_distance":
        for i in range(n):
            w[i] = _row_closeness(dist[i], off_diag[i])
    else:
        if labels is None:
            if mode.startswith("area") and len(points) and hasattr(points[0], "paid_area"):
                labels = [bf.paid_area for bf in points]
            else:
                raise InvalidInputError(f"mode {mode} needs labels")
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise InvalidInputError("labels must have one entry per block-face")
        same = (labels[:, None] == labels[None, :]) & off_diag
        if mode.endswith("connections"):
            w[same] = 1.0
        else:
            for i in range(n):
                w[i] = _row_closeness(dist[i], same[i])
        isolated = tuple(np.flatnonzero(~same.any(axis=1)).tolist())
    return WeightMatrix(w, mode, k if mode == "knn" else None, isolated)


def _centered(occupancy, n):
    o = np.asarray(occupancy, dtype=float)
    if o.shape != (n,):
        raise InvalidInputError(f"occupancy has shape {o.shape}, expected ({n},)")
    if np.ptp(o) == 0:
        raise DegenerateVarianceError("occupancy is constant; Moran's I is undefined")
    return o - o.mean()


def _weights_array(weights):
    return weights.w if isinstance(weights, WeightMatrix) else np.asarray(weights, dtype=float)


def morans_i(occupancy, weights) -> float:
    """Global Moran's I of ``occupancy`` under ``weights``."""
    w = _weights_array(weights)
    z = _centered(occupancy, w.shape[0])
    s0 = w.sum()
    if s0 <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    return float(w.shape[0] / s0 * (z @ w @ z) / (z @ z))


def randomization_moments(occupancy, weights) -> tuple[float, float]:
    """Mean and variance of I over random relabellings of ``occupancy``.

    Cliff and Ord's randomization-assumption moments; requires n >= 4.
    """
    w = _weights_array(weights)
    n = w.shape[0]
    if n < 4:
        raise InvalidInputError("randomization variance needs n >= 4")
    z = _centered(occupancy, n)
    s0 = w.sum()
    if s0 <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    s1 = 0.5 * ((w + w.T) ** 2).sum()
    s2 = ((w.sum(axis=1) + w.sum(axis=0)) ** 2).sum()
    m2 = (z ** 2).sum()
    b2 = n * (z ** 4).sum() / m2 ** 2
    expected = -1.0 / (n - 1)
    second = (
        n * ((n * n - 3 * n + 3) * s1 - n * s2 + 3 * s0 * s0)
        - b2 * ((n * n - n) * s1 - 2 * n * s2 + 6 * s0 * s0)
    ) / ((n - 1) * (n - 2) * (n - 3) * s0 * s0)
    return expected, second - expected * expected


def significance(occupancy, weights, method: str = "analytic", permutations: int = 9999,
                 seed: int = 0, slice_id=None, alpha: float = ALPHA) -> MoranReport:
    """Two-sided test of Moran's I against spatial randomness.

    ``method="analytic"`` uses a normal approximation with the
    randomization-assumption variance.  ``method="permutation"`` reports the
    fraction of ``permutations`` shuffles whose I deviates from E[I] at least
    as much as the observed one, with +1 smoothing.
    """
    w = _weights_array(weights)
    stat = morans_i(occupancy, w)
    expected, variance = randomization_moments(occupancy, w)
    mode = weights.tag if isinstance(weights, WeightMatrix) else ""
    z = (stat - expected) / np.sqrt(variance) if variance > 0 else 0.0
    if method == "analytic":
        if variance <= 0:
            raise DegenerateWeightsError("non-positive variance of I")
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    elif method == "permutation":
        if permutations < MIN_PERMUTATIONS:
            raise InvalidInputError(f"need at least {MIN_PERMUTATIONS} permutations")
        sims = permutation_distribution(occupancy, w, permutations, seed)
        extreme = np.abs(sims - expected) >= abs(stat - expected) - 1e-12
        p = float((extreme.sum() + 1) / (permutations + 1))
    else:
        raise InvalidInputError(f"unknown significance method {method!r}")
    return MoranReport(float(stat), expected, float(z), p, p < alpha, mode, slice_id, method)


def permutation_distribution(occupancy, weights, permutations: int, seed: int = 0,
                             batch: int = 2000) -> np.ndarray:
    """Moran's I of ``permutations`` random shuffles of ``occupancy``."""
    w = _weights_array(weights)
    n = w.shape[0]
    z = _centered(occupancy, n)
    scale = n / w.sum() / (z @ z)
    rng = np.random.default_rng(seed)
    out = np.empty(permutations)
    for start in range(0, permutations, batch):
        m = min(batch, permutations - start)
        zp = rng.permuted(np.tile(z, (m, 1)), axis=1)
        out[start:start + m] = scale * np.einsum("mi,mi->m", zp @ w, zp)
    return out


@dataclass
class SweepResult:
    reports: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    @property
    def n_tested(self) -> int:
        return len(self.reports)

    @property
    def percent_significant(self) -> float:
        if not self.reports:
            return float("nan")
        return 100.0 * sum(r.significant for r in self.reports) / len(self.reports)


def significance_sweep(grid, weights, timestamps=None, method: str = "analytic",
                       permutations: int = 9999, seed: int = 0) -> SweepResult:
    """Test every (date, hour) instance of ``grid`` and tally significance.

    ``weights`` is a :class:`WeightMatrix` shared by all instances or a
    callable ``(day_of_week, hour) -> WeightMatrix`` (for zone-dependent
    designs).  Instances with constant occupancy or empty weights are counted
    in ``degenerate`` rather than tested.
    """
    if timestamps is None:
        cols = range(len(grid.timestamps))
    else:
        wanted = np.asarray(timestamps, dtype="datetime64[h]")
        cols = np.flatnonzero(np.isin(grid.timestamps, wanted))
    cols = list(cols)
    if not cols:
        raise InvalidInputError("sweep needs at least one slice")
    dows, hours = grid.days_of_week, grid.hours
    result = SweepResult()
    for c in cols:
        ts = grid.timestamps[c]
        slice_id = (str(ts.astype("datetime64[D]")), int(hours[c]))
        wm = weights(int(dows[c]), int(hours[c])) if callable(weights) else weights
        try:
            report = significance(
                grid.values[:, c], wm, method=method, permutations=permutations,
                seed=_perm_seed(seed, c), slice_id=slice_id,
            )
        except (DegenerateVarianceError, DegenerateWeightsError) as exc:
            result.degenerate.append((slice_id, str(exc)))
            continue
        result.reports.append(report)
    return result


def _perm_seed(seed, column):
    return int(np.random.SeedSequence([seed, column]).generate_state(1)[0])


def sweep_rows(result: SweepResult):
    """Rows for the sweep CSV: slice_date, slice_hour, mode, I, z, p, significant."""
    for r in result.reports:
        date, hour = r.slice_id
        yield (date, hour, r.mode, f"{r.I:.10g}", f"{r.z_score:.10g}", f"{r.p_value:.10g}",
               int(r.significant))
