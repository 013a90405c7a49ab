"""Seeded synthetic parking data and direct-formula reference oracles.

The oracles at the bottom of this module are deliberately naive loops.  They
share no code with the production paths they are used to check.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from curbzones.exceptions import DegenerateVarianceError, InvalidInputError
from curbzones.ingest import (
    BlockFace,
    OccupancyGrid,
    Schedule,
    Transaction,
    write_blockfaces,
    write_transactions,
)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic neighbourhood.

    Cluster centers sit on a regular polygon (``layout="polygon"``) or a
    square lattice (``layout="grid"``, filled row by row) with side or
    spacing ``separation * spatial_std`` degrees.  Hourly occupancy of block ``i`` in
    cluster ``c`` is ``levels[c] + block offset + noise``, clipped to
    [0, 1.5]; the block offset persists across dates, the noise does not
    (unless ``identical_weeks``).
    """

    n_blocks: int = 200
    center: tuple[float, float] = (47.6150, -122.3450)
    n_clusters: int = 3
    spatial_std: float = 0.001
    separation: float = 10.0
    levels: tuple[float, ...] = (0.2, 0.5, 0.8)
    block_std: float = 0.02
    noise_std: float = 0.03
    profile_amplitude: float = 0.0
    weeks: int = 13
    start_date: dt.date = dt.date(2017, 6, 5)
    schedule: Schedule = field(default_factory=Schedule)
    supply_range: tuple[int, int] = (6, 16)
    half_length: float = 0.0004
    identical_weeks: bool = False
    layout: str = "polygon"
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1 or self.n_clusters < 1 or self.weeks < 1:
            raise InvalidInputError("n_blocks, n_clusters and weeks must be positive")
        if self.spatial_std <= 0 or self.separation <= 0:
            raise InvalidInputError("spatial_std and separation must be positive")
        if self.noise_std < 0 or self.block_std < 0:
            raise InvalidInputError("noise levels cannot be negative")
        if len(self.levels) != self.n_clusters:
            raise InvalidInputError("need one occupancy level per cluster")
        if any(not 0.0 <= lv <= 1.5 for lv in self.levels):
            raise InvalidInputError("occupancy levels must lie in [0, 1.5]")
        if self.layout not in ("polygon", "grid"):
            raise InvalidInputError(f"unknown layout {self.layout!r}")
        lo, hi = self.supply_range
        if lo < 1 or hi < lo:
            raise InvalidInputError(
                f"supply range {self.supply_range} cannot realise positive occupancy targets"
            )

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=7 * self.weeks - 1)

    def cluster_centers(self) -> np.ndarray:
        if self.layout == "grid":
            cols = math.ceil(math.sqrt(self.n_clusters))
            step = self.separation * self.spatial_std
            idx = np.arange(self.n_clusters)
            rows, cols_ = idx // cols, idx % cols
            lat = self.center[0] + step * (rows - rows.mean())
            lon = self.center[1] + step * (cols_ - cols_.mean())
            return np.column_stack([lat, lon])
        if self.n_clusters == 1:
            return np.array([self.center], dtype=float)
        side = self.separation * self.spatial_std
        radius = side / (2 * math.sin(math.pi / self.n_clusters))
        angles = math.pi / 2 + 2 * math.pi * np.arange(self.n_clusters) / self.n_clusters
        lat = self.center[0] + radius * np.sin(angles)
        lon = self.center[1] + radius * np.cos(angles)
        return np.column_stack([lat, lon])


@dataclass
class SynthData:
    spec: SynthSpec
    blockfaces: list
    labels: np.ndarray
    grid: OccupancyGrid
    schedule: Schedule

    def transactions(self) -> list[Transaction]:
        return list(iter_transactions(self))


def generate(spec: SynthSpec) -> SynthData:
    """Block-faces, target occupancy grid and ground-truth cluster labels.

    Targets are quantized to whole space-minutes so that the transactions
    from :func:`iter_transactions` reproduce them exactly through ingest.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_blocks
    labels = np.sort(rng.integers(spec.n_clusters, size=n)) if spec.n_clusters > 1 else np.zeros(n, int)
    centers = spec.cluster_centers()
    mid = centers[labels] + rng.normal(0.0, spec.spatial_std, size=(n, 2))
    bearing = rng.uniform(0, math.pi, size=n)
    offset = spec.half_length * np.column_stack([np.cos(bearing), np.sin(bearing)])
    end_a, end_b = mid - offset, mid + offset
    supply = rng.integers(spec.supply_range[0], spec.supply_range[1] + 1, size=n)
    # Arbitrary two-zone split on latitude, standing in for designated paid areas.
    north = mid[:, 0] >= np.median(mid[:, 0])
    width = len(str(n - 1))
    blockfaces = [
        BlockFace(
            id=f"B{i:0{width}d}",
            endpoint_a=(float(end_a[i, 0]), float(end_a[i, 1])),
            endpoint_b=(float(end_b[i, 0]), float(end_b[i, 1])),
            supply=int(supply[i]),
            paid_area="North" if north[i] else "South",
            neighborhood="Synthtown",
        )
        for i in range(n)
    ]
    schedule = Schedule(
        days=spec.schedule.days, start_hour=spec.schedule.start_hour,
        end_hour=spec.schedule.end_hour, start_date=spec.start_date, end_date=spec.end_date,
    )
    dates = schedule.paid_dates(spec.start_date, spec.end_date)
    hours = schedule.hours
    per_week = len([d for d in dates if d < spec.start_date + dt.timedelta(days=7)]) * len(hours)
    n_cols = len(dates) * len(hours)

    base = np.asarray(spec.levels, dtype=float)[labels] + rng.normal(0.0, spec.block_std, size=n)
    hour_of_col = np.tile(np.asarray(hours), len(dates))
    phase = (hour_of_col - schedule.start_hour) / max(len(hours) - 1, 1)
    profile = spec.profile_amplitude * np.sin(math.pi * phase)
    if spec.identical_weeks:
        noise = np.tile(rng.normal(0.0, spec.noise_std, size=(n, per_week)), (1, spec.weeks))
    else:
        noise = rng.normal(0.0, spec.noise_std, size=(n, n_cols))
    target = np.clip(base[:, None] + profile[None, :] + noise, 0.0, 1.5)
    space_minutes = np.rint(target * supply[:, None] * 60).astype(np.int64)
    values = space_minutes / (60.0 * supply[:, None])

    timestamps = np.array(
        [np.datetime64(d, "h") + np.timedelta64(h, "h") for d in dates for h in hours],
        dtype="datetime64[h]",
    )
    grid = OccupancyGrid(tuple(bf.id for bf in blockfaces), timestamps, np.minimum(values, 1.5))
    return SynthData(spec, blockfaces, labels, grid, schedule)


def iter_transactions(data: SynthData):
    """Transactions realising the target grid.

    Per block and hour, ``q = space_minutes // 60`` stubs cover the whole hour
    and one more stub covers the remaining ``space_minutes % 60`` minutes.
    Paid-by-phone and pay-station sources alternate deterministically.
    """
    supply = np.array([bf.supply for bf in data.blockfaces])
    minutes = np.rint(data.grid.values * supply[:, None] * 60).astype(np.int64)
    starts = [ts.astype(dt.datetime) for ts in data.grid.timestamps]
    for i, bf in enumerate(data.blockfaces):
        count = 0
        for j, start in enumerate(starts):
            full, rest = divmod(int(minutes[i, j]), 60)
            for _ in range(full):
                yield Transaction(bf.id, start, 60, "paystation" if count % 2 == 0 else "payphone")
                count += 1
            if rest:
                yield Transaction(bf.id, start, rest, "paystation" if count % 2 == 0 else "payphone")
                count += 1


def write_synth(data: SynthData, out_dir) -> dict:
    """Write blockfaces.csv, transactions.csv, labels.csv and schedule.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "blockfaces": out / "blockfaces.csv",
        "transactions": out / "transactions.csv",
        "labels": out / "labels.csv",
        "schedule": out / "schedule.txt",
    }
    with open(paths["blockfaces"], "w", newline="") as fh:
        write_blockfaces(data.blockfaces, fh)
    with open(paths["transactions"], "w", newline="") as fh:
        write_transactions(iter_transactions(data), fh)
    with open(paths["labels"], "w") as fh:
        fh.write("block_id,cluster\n")
        for bf, lab in zip(data.blockfaces, data.labels):
            fh.write(f"{bf.id},{int(lab)}\n")
    paths["schedule"].write_text(data.schedule.to_text())
    return paths


# ---------------------------------------------------------------------- oracles


def oracle_mean(values) -> float:
    total = 0.0
    count = 0
    for v in values:
        total += float(v)
        count += 1
    return total / count


def oracle_morans_i(occupancy, weights) -> float:
    """Moran's I by literal double summation."""
    o = [float(v) for v in occupancy]
    n = len(o)
    w = [[float(weights[i][j]) for j in range(n)] for i in range(n)]
    mean = sum(o) / n
    denom = sum((v - mean) ** 2 for v in o)
    if denom == 0.0:
        raise DegenerateVarianceError("constant occupancy")
    s0 = 0.0
    num = 0.0
    for i in range(n):
        for j in range(n):
            s0 += w[i][j]
            num += w[i][j] * (o[i] - mean) * (o[j] - mean)
    return n / s0 * num / denom


def oracle_weighted_moments(features, responsibilities):
    """Mixture M-step by explicit loops (no variance floor)."""
    x = [[float(v) for v in row] for row in features]
    r = [[float(v) for v in row] for row in responsibilities]
    n, d, k = len(x), len(x[0]), len(r[0])
    weights, means, variances = [], [], []
    for j in range(k):
        mass = sum(r[i][j] for i in range(n))
        mu = [sum(r[i][j] * x[i][c] for i in range(n)) / mass for c in range(d)]
        var = [sum(r[i][j] * (x[i][c] - mu[c]) ** 2 for i in range(n)) / mass for c in range(d)]
        weights.append(mass / n)
        means.append(mu)
        variances.append(var)
    return np.array(weights), np.array(means), np.array(variances)


def _gauss_diag(x, mu, var):
    d = len(x)
    quad = sum((x[c] - mu[c]) ** 2 / var[c] for c in range(d))
    det = 1.0
    for v in var:
        det *= v
    return math.exp(-0.5 * quad) / ((2 * math.pi) ** (d / 2) * math.sqrt(det))


def oracle_log_likelihood(features, weights, means, variances) -> float:
    """Log likelihood from densities in linear space (small inputs only)."""
    total = 0.0
    for x in features:
        p = sum(weights[j] * _gauss_diag(x, means[j], variances[j]) for j in range(len(weights)))
        total += math.log(p)
    return total


def oracle_responsibilities(features, weights, means, variances) -> np.ndarray:
    rows = []
    for x in features:
        dens = [weights[j] * _gauss_diag(x, means[j], variances[j]) for j in range(len(weights))]
        s = sum(dens)
        rows.append([v / s for v in dens])
    return np.array(rows)


def oracle_hourly_means(minute_values, minutes_per_hour: int = 60) -> list[float]:
    out = []
    for start in range(0, len(minute_values), minutes_per_hour):
        out.append(oracle_mean(minute_values[start:start + minutes_per_hour]))
    return out
