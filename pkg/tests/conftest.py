import datetime as dt

import numpy as np
import pytest

from curbzones.ingest import BlockFace, OccupancyGrid

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_blocks(coords, supply=10, areas=None):
    out = []
    for i, (lat, lon) in enumerate(coords):
        out.append(BlockFace(
            id=f"b{i:03d}",
            endpoint_a=(lat - 1e-4, lon),
            endpoint_b=(lat + 1e-4, lon),
            supply=supply,
            paid_area=areas[i] if areas is not None else "A",
        ))
    return out


def make_grid(block_ids, dates, hours, values):
    """Grid with columns ordered date-major, hour-minor."""
    stamps = np.array(
        [np.datetime64(d, "h") + np.timedelta64(h, "h") for d in dates for h in hours],
        dtype="datetime64[h]",
    )
    return OccupancyGrid(tuple(block_ids), stamps, np.asarray(values, dtype=float))


def weekly(start, weekday, count):
    """``count`` consecutive dates falling on ``weekday`` (0=Mon) from ``start``."""
    first = start + dt.timedelta(days=(weekday - start.weekday()) % 7)
    return [first + dt.timedelta(days=7 * i) for i in range(count)]
