"""Week-to-week stability of fitted zones and occupancy change summaries."""

from __future__ import annotations

import datetime as dt
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from curbzones.exceptions import (
    CurbzonesError,
    EmptySliceError,
    InvalidInputError,
)
from curbzones.ingest import DAY_NAMES, parse_day
from curbzones.mixture import (
    EMConfig,
    _midpoints_for,
    assign,
    fit_slice,
    raw_features,
)

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
RELATIVE_FLOOR = 0.01


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_M):
    """Great-circle distance in meters between points given in degrees."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


# ------------------------------------------------------------------ consistency


@dataclass
class ConsistencyReport:
    day_of_week: int
    hour: int
    anchor_percentages: dict
    dates: list
    skipped_anchors: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    @property
    def mean(self) -> float:
        values = [self.anchor_percentages[d] for d in sorted(self.anchor_percentages)]
        return float(np.mean(values))


def date_seed(seed: int, date) -> int:
    """Deterministic per-date seed for anchor fits."""
    ordinal = dt.date.fromisoformat(str(date)).toordinal()
    return int(np.random.SeedSequence([seed, ordinal]).generate_state(1)[0])


def consistency_metric(grid, blockfaces, day_of_week, hour, k: int,
                       config: EMConfig | None = None, date_range=None) -> ConsistencyReport:
    """Repeatability of zone labels across dates at one (day, hour).

    Every matching date takes a turn as anchor: a model is fitted on its
    occupancy, the other dates are labelled with that fixed model (using the
    anchor's normalization), and the share of block-faces keeping their
    anchor label is averaged, first over comparison dates and then over
    anchors.  The anchor itself is not a comparison date.
    """
    config = config or EMConfig()
    dow = parse_day(day_of_week)
    cols = grid.matching(dow, hour, date_range)
    if cols.size < 2:
        raise EmptySliceError(f"need >= 2 dates at {DAY_NAMES[dow]} {hour}:00, found {cols.size}")
    midpoints = _midpoints_for(grid, blockfaces)
    dates = [str(grid.timestamps[c].astype("datetime64[D]")) for c in cols]
    raw = {d: raw_features(midpoints, grid.values[:, c]) for d, c in zip(dates, cols)}

    report = ConsistencyReport(dow, int(hour), {}, dates)
    for anchor in dates:
        try:
            model = fit_slice(raw[anchor], k, config.replace(seed=date_seed(config.seed, anchor)),
                              slice_id=(anchor, int(hour)))
        except CurbzonesError as exc:
            report.skipped_anchors[anchor] = str(exc)
            logger.warning("anchor %s skipped: %s", anchor, exc)
            continue
        report.models[anchor] = model
        reference = model.assignments
        n = len(reference)
        pcts = []
        for other in dates:
            if other == anchor:
                continue
            labels = assign(model.normalize(raw[other]), model)
            pcts.append(100.0 * int((labels == reference).sum()) / n)
        report.anchor_percentages[anchor] = float(np.mean(pcts))
    if len(report.anchor_percentages) < 2:
        raise CurbzonesError(
            f"fewer than two usable anchors at {DAY_NAMES[dow]} {hour}:00"
        )
    return report


def consistency_table(grid, blockfaces, k: int, config: EMConfig | None = None,
                      date_range=None):
    """Consistency means laid out by day (rows) and hour (columns).

    Returns ``(days, hours, table, reports)`` where ``table[i, j]`` is NaN for
    combinations without enough dates.
    """
    keys = grid.slice_keys()
    days = sorted({d for d, _ in keys})
    hours = sorted({h for _, h in keys})
    table = np.full((len(days), len(hours)), np.nan)
    reports = {}
    for d, h in keys:
        if grid.matching(d, h, date_range).size < 2:
            continue
        rep = consistency_metric(grid, blockfaces, d, h, k, config, date_range)
        reports[(d, h)] = rep
        table[days.index(d), hours.index(h)] = rep.mean
    return days, hours, table, reports


def hour_label(hour: int) -> str:
    suffix = "AM" if hour < 12 else "PM"
    return f"{(hour - 1) % 12 + 1}{suffix}"


def consistency_rows(days, hours, table):
    """Rows for the day-by-hour consistency CSV, with Daily and Hourly margins."""
    def fmt(v):
        return "" if np.isnan(v) else f"{v:.1f}"

    yield ["day"] + [hour_label(h) for h in hours] + ["Daily"]
    for i, d in enumerate(days):
        row = table[i]
        daily = np.nanmean(row) if np.isfinite(row).any() else np.nan
        yield [DAY_NAMES[d]] + [fmt(v) for v in row] + [fmt(daily)]
    hourly = [np.nanmean(table[:, j]) if np.isfinite(table[:, j]).any() else np.nan
              for j in range(len(hours))]
    yield ["Hourly"] + [fmt(v) for v in hourly] + [""]


# ------------------------------------------------------------------ dispersion


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list


def _kmeans_once(points, k, rng, max_iter=300):
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    centers = np.array(centers, dtype=float)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(centers, labels, history[-1], history)


def kmeans(points, k: int, restarts: int = 10, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; lowest inertia over restarts."""
    points = np.asarray(points, dtype=float)
    if not 1 <= k <= len(points):
        raise InvalidInputError(f"need 1 <= k <= n, got k={k}, n={len(points)}")
    best = None
    for seq in np.random.SeedSequence(seed).spawn(restarts):
        run = _kmeans_once(points, k, np.random.default_rng(seq))
        if best is None or run.inertia < best.inertia:
            best = run
    return best


@dataclass
class CentroidDispersion:
    day_of_week: int | None
    hour: int | None
    k: int
    mean_distance_m: float


def centroid_dispersion(models, k: int | None = None, day_of_week=None, hour=None,
                        restarts: int = 10, seed: int = 0) -> CentroidDispersion:
    """Mean haversine distance of pooled component centers to their k-means centroid.

    The (latitude, longitude) centers of every model's components, mapped
    back to degrees, are clustered into ``k`` groups.
    """
    models = list(models)
    if len(models) < 2:
        raise InvalidInputError("need at least two models")
    ks = {m.k for m in models}
    if len(ks) != 1:
        raise InvalidInputError(f"models disagree on component count: {sorted(ks)}")
    k = k if k is not None else ks.pop()
    if k != models[0].k:
        raise InvalidInputError(f"k={k} differs from the models' component count")
    centers = np.vstack([m.center_coordinates()[:, :2] for m in models])
    result = kmeans(centers, k, restarts=restarts, seed=seed)
    own = result.centers[result.labels]
    dist = haversine(centers[:, 0], centers[:, 1], own[:, 0], own[:, 1])
    return CentroidDispersion(
        None if day_of_week is None else parse_day(day_of_week),
        None if hour is None else int(hour), k, float(dist.mean()),
    )


# ------------------------------------------------------------- change summaries


def _range_mask(grid, date_range):
    lo, hi = (np.datetime64(d, "D") for d in date_range)
    if lo > hi:
        raise InvalidInputError(f"date range {date_range} is reversed")
    return (grid.dates >= lo) & (grid.dates <= hi)


@dataclass
class SeasonalRow:
    hour: int
    mean_increase: float
    mean_decrease: float
    percent_increasing: float
    n_blocks: int
    n_excluded: int


def seasonal_delta(grid, season_a, season_b) -> list[SeasonalRow]:
    """Per paid hour, how block-face mean occupancy moved from season a to b.

    Changes are in percentage points of occupancy.  ``mean_decrease`` is
    reported as a positive magnitude; unchanged blocks count as
    non-increasing.  Blocks without data in either season are excluded.
    """
    mask_a, mask_b = _range_mask(grid, season_a), _range_mask(grid, season_b)
    if not mask_a.any() or not mask_b.any():
        raise EmptySliceError("a season has no timestamps")
    rows = []
    for h in sorted(set(grid.hours.tolist())):
        at_hour = grid.hours == h
        cols_a, cols_b = mask_a & at_hour, mask_b & at_hour
        if not cols_a.any() or not cols_b.any():
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean_a = np.nanmean(grid.values[:, cols_a], axis=1)
            mean_b = np.nanmean(grid.values[:, cols_b], axis=1)
        ok = np.isfinite(mean_a) & np.isfinite(mean_b)
        delta = 100.0 * (mean_b[ok] - mean_a[ok])
        up, down = delta[delta > 0], delta[delta < 0]
        rows.append(SeasonalRow(
            int(h),
            float(up.mean()) if up.size else 0.0,
            float(-down.mean()) if down.size else 0.0,
            100.0 * up.size / delta.size if delta.size else float("nan"),
            int(ok.sum()), int((~ok).sum()),
        ))
    return rows


@dataclass
class DiffRow:
    zone: str
    day_of_week: int
    hour: int
    mean_a: float
    mean_b: float
    relative_change: float
    floored: bool


def occupancy_diff(grid, period_a, period_b, zone_labels) -> list[DiffRow]:
    """Relative change of zone mean occupancy, per zone and (day, hour).

    The change is ``100 * (b - a) / max(a, 0.01)``; rows where the floor
    applied are flagged.
    """
    labels = np.asarray(zone_labels)
    if labels.shape != (grid.n_blocks,):
        raise InvalidInputError("one zone label per block-face is required")
    mask_a, mask_b = _range_mask(grid, period_a), _range_mask(grid, period_b)
    if not mask_a.any() or not mask_b.any():
        raise EmptySliceError("a period has no timestamps")
    rows = []
    for zone in sorted(set(labels.tolist()), key=str):
        members = labels == zone
        for d, h in grid.slice_keys():
            at = (grid.days_of_week == d) & (grid.hours == h)
            ca, cb = at & mask_a, at & mask_b
            if not ca.any() or not cb.any():
                continue
            a = float(grid.values[np.ix_(members, ca)].mean())
            b = float(grid.values[np.ix_(members, cb)].mean())
            floored = a < RELATIVE_FLOOR
            rel = 100.0 * (b - a) / max(a, RELATIVE_FLOOR)
            rows.append(DiffRow(str(zone), d, h, a, b, rel, floored))
    return rows


def zone_variance(grid, labels, timestamps=None) -> float:
    """Mean within-zone population variance of occupancy.

    For each timestamp, groups of two or more block-faces contribute their
    variance weighted by group size; the result averages over timestamps.
    ``labels`` is a per-block array or a callable ``(day_of_week, hour) ->
    labels`` for zones that change with the slice.
    """
    cols = range(len(grid.timestamps)) if timestamps is None else np.flatnonzero(
        np.isin(grid.timestamps, np.asarray(timestamps, dtype="datetime64[h]")))
    dows, hours = grid.days_of_week, grid.hours
    per_slice = []
    for c in cols:
        lab = np.asarray(labels(int(dows[c]), int(hours[c])) if callable(labels) else labels)
        if lab.shape != (grid.n_blocks,):
            raise InvalidInputError("one label per block-face is required")
        values = grid.values[:, c]
        total, weight = 0.0, 0
        for zone in np.unique(lab):
            v = values[lab == zone]
            if v.size >= 2:
                total += v.size * v.var()
                weight += v.size
        if weight == 0:
            raise InvalidInputError("every zone is a singleton; within-zone variance undefined")
        per_slice.append(total / weight)
    if not per_slice:
        raise EmptySliceError("no timestamps selected")
    return float(np.mean(per_slice))
