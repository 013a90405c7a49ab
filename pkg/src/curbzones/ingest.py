"""Transaction, supply and geometry ingest; minute and hourly occupancy.

Occupancy of a block-face at minute ``m`` is the number of paid transactions
active at ``m`` divided by the block-face supply, clipped at 150%.  Hourly
values are the arithmetic mean of the 60 minute values inside the hour.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from curbzones.exceptions import EmptySliceError, InvalidInputError, ParseError

logger = logging.getLogger(__name__)

OCCUPANCY_CLIP = 1.5
FEET_PER_SPACE = 25.0
SOURCES = ("paystation", "payphone")
DAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")

TRANSACTION_COLUMNS = ("block_id", "start", "duration_minutes", "source")
BLOCKFACE_COLUMNS = (
    "block_id", "lat_a", "lon_a", "lat_b", "lon_b", "supply", "paid_area", "neighborhood",
)
GRID_COLUMNS = ("block_id", "timestamp", "occupancy")
START_FORMAT = "%Y-%m-%dT%H:%M"
HOUR_FORMAT = "%Y-%m-%dT%H:00"


def parse_day(value) -> int:
    """Day of week as 0=Mon .. 6=Sun from an int or a (prefix of a) day name."""
    if isinstance(value, (int, np.integer)):
        if not 0 <= int(value) <= 6:
            raise InvalidInputError(f"day of week out of range: {value}")
        return int(value)
    text = str(value).strip()
    if text.isdigit():
        return parse_day(int(text))
    for i, name in enumerate(DAY_NAMES):
        if text[:3].lower() == name.lower():
            return i
    raise InvalidInputError(f"unknown day of week: {value!r}")


def _check_coordinate(lat, lon):
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise InvalidInputError(f"coordinate out of range: ({lat}, {lon})")


@dataclass(frozen=True)
class BlockFace:
    id: str
    endpoint_a: tuple[float, float]
    endpoint_b: tuple[float, float]
    supply: int
    paid_area: str = ""
    neighborhood: str = ""

    def __post_init__(self):
        _check_coordinate(*self.endpoint_a)
        _check_coordinate(*self.endpoint_b)
        if self.supply < 0:
            raise InvalidInputError(f"negative supply for block {self.id}")

    @property
    def midpoint(self) -> tuple[float, float]:
        return (
            (self.endpoint_a[0] + self.endpoint_b[0]) / 2.0,
            (self.endpoint_a[1] + self.endpoint_b[1]) / 2.0,
        )


@dataclass(frozen=True)
class Transaction:
    block_id: str
    start: dt.datetime
    duration_minutes: int
    source: str = "paystation"

    def __post_init__(self):
        if self.duration_minutes < 1:
            raise InvalidInputError(
                f"transaction duration must be >= 1 minute, got {self.duration_minutes}"
            )
        if self.source not in SOURCES:
            raise InvalidInputError(f"unknown transaction source {self.source!r}")


@dataclass(frozen=True)
class Schedule:
    """Paid-parking schedule in local clock time.

    ``end_hour`` is exclusive: the default 8..20 covers 8AM-8PM.  The optional
    date bounds are inclusive; when absent, the grid spans the transactions.
    """

    days: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    start_hour: int = 8
    end_hour: int = 20
    start_date: dt.date | None = None
    end_date: dt.date | None = None

    def __post_init__(self):
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise InvalidInputError(
                f"invalid paid hours {self.start_hour}..{self.end_hour}"
            )
        if not self.days:
            raise InvalidInputError("schedule has no paid days")
        object.__setattr__(self, "days", tuple(sorted({parse_day(d) for d in self.days})))
        if self.start_date and self.end_date and self.start_date > self.end_date:
            raise InvalidInputError("schedule start_date is after end_date")

    @property
    def hours(self) -> tuple[int, ...]:
        return tuple(range(self.start_hour, self.end_hour))

    @property
    def window_minutes(self) -> int:
        return (self.end_hour - self.start_hour) * 60

    def paid_dates(self, first: dt.date, last: dt.date) -> list[dt.date]:
        n = (last - first).days + 1
        dates = (first + dt.timedelta(days=i) for i in range(n))
        return [d for d in dates if d.weekday() in self.days]

    @classmethod
    def from_text(cls, text: str) -> "Schedule":
        """Parse ``key = value`` lines (``#`` starts a comment)."""
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line and ":" not in line:
                raise ParseError(f"expected key = value, got {raw!r}", line=lineno)
            sep = "=" if "=" in line else ":"
            key, value = (part.strip() for part in line.split(sep, 1))
            key = key.lower().replace("-", "_")
            try:
                if key in ("days", "paid_days"):
                    kwargs["days"] = tuple(parse_day(v) for v in value.split(",") if v.strip())
                elif key in ("start_hour", "end_hour"):
                    kwargs[key] = int(value)
                elif key in ("start_date", "end_date"):
                    kwargs[key] = dt.date.fromisoformat(value)
                else:
                    raise ParseError(f"unknown schedule key {key!r}", line=lineno)
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(f"bad value for {key}: {exc}", line=lineno) from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "Schedule":
        try:
            return cls.from_text(Path(path).read_text())
        except ParseError as exc:
            raise ParseError(str(exc).split(": ", 1)[-1], line=exc.line, path=path) from None

    def to_text(self) -> str:
        lines = [
            "days = " + ",".join(DAY_NAMES[d] for d in self.days),
            f"start_hour = {self.start_hour}",
            f"end_hour = {self.end_hour}",
        ]
        if self.start_date:
            lines.append(f"start_date = {self.start_date.isoformat()}")
        if self.end_date:
            lines.append(f"end_date = {self.end_date.isoformat()}")
        return "\n".join(lines) + "\n"


@dataclass
class IngestReport:
    """Bookkeeping from :func:`build_grid`; nothing is dropped silently."""

    n_transactions: int = 0
    n_used: int = 0
    unresolved_block_ids: int = 0
    out_of_range: int = 0
    outside_paid_hours: int = 0
    truncated_at_boundary: int = 0
    excluded_blocks: dict = field(default_factory=dict)
    clipped_minutes: int = 0
    total_minutes: int = 0
    clipped_hours: int = 0
    total_hours: int = 0
    duplicate_policy: str = "every active transaction is counted; no deduplication"

    @property
    def clip_fraction(self) -> float:
        """Fraction of hourly cells whose unclipped mean exceeded the clip."""
        return self.clipped_hours / self.total_hours if self.total_hours else 0.0

    @property
    def minute_clip_fraction(self) -> float:
        return self.clipped_minutes / self.total_minutes if self.total_minutes else 0.0

    def to_dict(self) -> dict:
        return {
            "n_transactions": self.n_transactions,
            "n_used": self.n_used,
            "unresolved_block_ids": self.unresolved_block_ids,
            "out_of_range": self.out_of_range,
            "outside_paid_hours": self.outside_paid_hours,
            "truncated_at_boundary": self.truncated_at_boundary,
            "excluded_blocks": dict(sorted(self.excluded_blocks.items())),
            "clipped_minutes": self.clipped_minutes,
            "total_minutes": self.total_minutes,
            "minute_clip_fraction": self.minute_clip_fraction,
            "clipped_hours": self.clipped_hours,
            "total_hours": self.total_hours,
            "clip_fraction": self.clip_fraction,
            "duplicate_policy": self.duplicate_policy,
        }


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Block-face x hour matrix of occupancy fractions.

    ``timestamps`` are hour-resolution ``datetime64[h]`` values in local time;
    row ``i`` of ``values`` belongs to ``block_ids[i]``.
    """

    block_ids: tuple[str, ...]
    timestamps: np.ndarray
    values: np.ndarray
    report: IngestReport | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.block_ids), len(ts)):
            raise InvalidInputError(
                f"grid values have shape {values.shape}, expected "
                f"({len(self.block_ids)}, {len(ts)})"
            )
        if np.any(values > OCCUPANCY_CLIP) or np.any(values < 0):
            raise InvalidInputError("grid values must lie in [0, 1.5]")
        ts.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "block_ids", tuple(self.block_ids))
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", values)

    @property
    def n_blocks(self) -> int:
        return len(self.block_ids)

    @property
    def dates(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    @property
    def hours(self) -> np.ndarray:
        return (self.timestamps - self.dates).astype(int)

    @property
    def days_of_week(self) -> np.ndarray:
        # 1970-01-01 was a Thursday
        return (self.dates.astype(int) + 3) % 7

    def slice_keys(self) -> list[tuple[int, int]]:
        """Sorted distinct (day_of_week, hour) pairs present in the grid."""
        return sorted(set(zip(self.days_of_week.tolist(), self.hours.tolist())))

    def matching(self, day_of_week, hour, date_range=None) -> np.ndarray:
        """Column indices for timestamps at (day_of_week, hour) inside ``date_range``."""
        mask = (self.days_of_week == parse_day(day_of_week)) & (self.hours == int(hour))
        if date_range is not None:
            lo, hi = (np.datetime64(d, "D") if d is not None else None for d in date_range)
            if lo is not None:
                mask &= self.dates >= lo
            if hi is not None:
                mask &= self.dates <= hi
        return np.flatnonzero(mask)

    def column(self, timestamp) -> np.ndarray:
        idx = np.flatnonzero(self.timestamps == np.datetime64(timestamp, "h"))
        if idx.size == 0:
            raise EmptySliceError(f"timestamp {timestamp} not in grid")
        return self.values[:, idx[0]]

    def subset(self, block_ids: Sequence[str]) -> "OccupancyGrid":
        index = {b: i for i, b in enumerate(self.block_ids)}
        try:
            rows = [index[b] for b in block_ids]
        except KeyError as exc:
            raise InvalidInputError(f"block {exc.args[0]} not in grid") from None
        return OccupancyGrid(tuple(block_ids), self.timestamps, self.values[rows], self.report)


def estimate_supply(length_feet: float) -> int:
    """Number of spaces in a curb of ``length_feet``, one per 25-foot increment."""
    if not length_feet > 0 or not math.isfinite(length_feet):
        raise InvalidInputError(f"curb length must be positive, got {length_feet}")
    return int(math.floor(length_feet / FEET_PER_SPACE))


def minute_occupancy(active_count: int, supply: int) -> float:
    if supply <= 0:
        raise InvalidInputError("supply must be positive; such blocks are excluded from grids")
    if active_count < 0:
        raise InvalidInputError("active transaction count cannot be negative")
    return min(active_count / supply, OCCUPANCY_CLIP)


def _date_bounds(transactions, schedule):
    first, last = schedule.start_date, schedule.end_date
    if first is None or last is None:
        starts = [t.start.date() for t in transactions]
        if not starts:
            raise InvalidInputError("no transactions and no schedule date range")
        first = first or min(starts)
        last = last or max(starts)
    return first, last


def active_counts(
    transactions: Iterable[Transaction],
    blockfaces: Sequence[BlockFace],
    schedule: Schedule,
) -> tuple[list[BlockFace], list[dt.date], np.ndarray, IngestReport]:
    """Per-minute active-transaction counts over the paid windows.

    Returns the retained block-faces, the paid dates, an integer array of
    shape ``(n_blocks, n_dates * window_minutes)`` and the report.  A
    transaction contributes to the paid window of the day it starts in,
    truncated at both window edges.
    """
    transactions = list(transactions)
    report = IngestReport(n_transactions=len(transactions))
    first, last = _date_bounds(transactions, schedule)

    known = {}
    for bf in blockfaces:
        if bf.id in known:
            raise InvalidInputError(f"duplicate block-face id {bf.id!r}")
        known[bf.id] = bf
    kept = []
    for bf in blockfaces:
        if bf.supply <= 0:
            report.excluded_blocks[bf.id] = "zero or missing supply"
        else:
            kept.append(bf)
    row_of = {bf.id: i for i, bf in enumerate(kept)}

    dates = schedule.paid_dates(first, last)
    date_index = {d: i for i, d in enumerate(dates)}
    width = schedule.window_minutes
    open_m = schedule.start_hour * 60
    close_m = schedule.end_hour * 60
    span = len(dates) * width

    rows, lo_idx, hi_idx = [], [], []
    for t in transactions:
        if t.block_id not in known:
            report.unresolved_block_ids += 1
            continue
        if t.block_id not in row_of:
            continue
        day = t.start.date()
        if day < first or day > last:
            report.out_of_range += 1
            continue
        p = date_index.get(day)
        s = t.start.hour * 60 + t.start.minute
        lo = max(s, open_m)
        hi = min(s + t.duration_minutes, close_m)
        if p is None or hi <= lo:
            report.outside_paid_hours += 1
            continue
        if s + t.duration_minutes > close_m:
            report.truncated_at_boundary += 1
        report.n_used += 1
        rows.append(row_of[t.block_id])
        lo_idx.append(p * width + lo - open_m)
        hi_idx.append(p * width + hi - open_m)
    if report.unresolved_block_ids:
        logger.warning("skipped %d transactions with unknown block ids", report.unresolved_block_ids)

    diff = np.zeros(len(kept) * (span + 1), dtype=np.int64)
    if rows:
        rows = np.asarray(rows, dtype=np.int64)
        np.add.at(diff, rows * (span + 1) + np.asarray(lo_idx), 1)
        np.add.at(diff, rows * (span + 1) + np.asarray(hi_idx), -1)
    counts = np.cumsum(diff.reshape(len(kept), span + 1), axis=1)[:, :span]
    return kept, dates, counts, report


def build_grid(
    transactions: Iterable[Transaction],
    blockfaces: Sequence[BlockFace],
    schedule: Schedule | None = None,
) -> OccupancyGrid:
    """Hourly occupancy grid for every positive-supply block-face.

    Blocks with zero supply are left out and listed in ``grid.report``.
    """
    schedule = schedule or Schedule()
    kept, dates, counts, report = active_counts(transactions, blockfaces, schedule)
    supply = np.array([bf.supply for bf in kept], dtype=float)[:, None]
    n_hours = len(dates) * len(schedule.hours)
    # Work in space-minutes: the cap 1.5 * supply is a half-integer at worst,
    # so hourly sums are exact and each value comes from a single division.
    cap = OCCUPANCY_CLIP * supply
    clipped = counts > cap
    used = np.minimum(counts, cap).reshape(len(kept), n_hours, 60).sum(axis=2)
    hourly = used / (60.0 * supply) if kept else used.astype(float)
    raw_hours = counts.reshape(len(kept), n_hours, 60).sum(axis=2)
    report.clipped_minutes = int(clipped.sum())
    report.total_minutes = int(clipped.size)
    report.clipped_hours = int((raw_hours > 60 * cap).sum())
    report.total_hours = int(hourly.size)

    timestamps = np.array(
        [np.datetime64(d, "h") + np.timedelta64(h, "h") for d in dates for h in schedule.hours],
        dtype="datetime64[h]",
    )
    return OccupancyGrid(tuple(bf.id for bf in kept), timestamps, hourly, report)


def slice_mean(grid: OccupancyGrid, day_of_week, hour, date_range=None) -> np.ndarray:
    """Per-block mean occupancy over timestamps at (day_of_week, hour)."""
    cols = grid.matching(day_of_week, hour, date_range)
    if cols.size == 0:
        raise EmptySliceError(
            f"no timestamps for day {day_of_week} hour {hour} in range {date_range}"
        )
    return grid.values[:, cols].mean(axis=1)


# --------------------------------------------------------------------------- I/O


def _reader(path, required):
    handle = open(path, newline="")
    reader = csv.DictReader(handle)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        handle.close()
        raise ParseError(f"missing column(s): {', '.join(missing)}", line=1, path=path)
    return handle, reader


def read_blockfaces(path) -> list[BlockFace]:
    handle, reader = _reader(path, BLOCKFACE_COLUMNS)
    out = []
    with handle:
        for row in reader:
            line = reader.line_num
            try:
                supply_text = (row["supply"] or "").strip()
                supply = int(float(supply_text)) if supply_text else 0
                out.append(
                    BlockFace(
                        id=row["block_id"].strip(),
                        endpoint_a=(float(row["lat_a"]), float(row["lon_a"])),
                        endpoint_b=(float(row["lat_b"]), float(row["lon_b"])),
                        supply=supply,
                        paid_area=(row["paid_area"] or "").strip(),
                        neighborhood=(row["neighborhood"] or "").strip(),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=line, path=path) from None
    return out


def read_transactions(path) -> list[Transaction]:
    handle, reader = _reader(path, TRANSACTION_COLUMNS)
    out = []
    with handle:
        for row in reader:
            line = reader.line_num
            try:
                out.append(
                    Transaction(
                        block_id=row["block_id"].strip(),
                        start=dt.datetime.strptime(row["start"].strip(), START_FORMAT),
                        duration_minutes=int(row["duration_minutes"]),
                        source=row["source"].strip(),
                    )
                )
            except (TypeError, ValueError, AttributeError) as exc:
                raise ParseError(str(exc), line=line, path=path) from None
    return out


def write_blockfaces(blockfaces: Iterable[BlockFace], handle) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(BLOCKFACE_COLUMNS)
    for bf in blockfaces:
        writer.writerow([
            bf.id, repr(bf.endpoint_a[0]), repr(bf.endpoint_a[1]),
            repr(bf.endpoint_b[0]), repr(bf.endpoint_b[1]),
            bf.supply, bf.paid_area, bf.neighborhood,
        ])


def write_transactions(transactions: Iterable[Transaction], handle) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(TRANSACTION_COLUMNS)
    for t in transactions:
        writer.writerow([t.block_id, t.start.strftime(START_FORMAT), t.duration_minutes, t.source])


def write_grid(grid: OccupancyGrid, handle) -> None:
    """Write the long-format grid CSV, rows ordered by block then time."""
    stamps = [ts.astype(dt.datetime).strftime(HOUR_FORMAT) for ts in grid.timestamps]
    handle.write(",".join(GRID_COLUMNS) + "\n")
    for block_id, row in zip(grid.block_ids, grid.values):
        for stamp, value in zip(stamps, row):
            handle.write(f"{block_id},{stamp},{value:.6f}\n")


def read_grid(path) -> OccupancyGrid:
    handle, reader = _reader(path, GRID_COLUMNS)
    cells = {}
    blocks, stamps = {}, {}
    with handle:
        for row in reader:
            try:
                ts = np.datetime64(dt.datetime.strptime(row["timestamp"], START_FORMAT), "h")
                value = float(row["occupancy"])
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=reader.line_num, path=path) from None
            b = row["block_id"]
            blocks.setdefault(b, len(blocks))
            stamps.setdefault(ts, None)
            cells[(b, ts)] = value
    ts_sorted = sorted(stamps)
    col = {t: j for j, t in enumerate(ts_sorted)}
    values = np.full((len(blocks), len(ts_sorted)), np.nan)
    for (b, t), v in cells.items():
        values[blocks[b], col[t]] = v
    if np.isnan(values).any():
        raise ParseError("grid file is not a complete block x timestamp matrix", path=path)
    return OccupancyGrid(tuple(blocks), np.array(ts_sorted, dtype="datetime64[h]"), values)
