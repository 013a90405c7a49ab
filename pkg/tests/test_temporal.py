import datetime as dt

import numpy as np
import pytest

from conftest import make_blocks, make_grid, weekly
from curbzones.exceptions import EmptySliceError, InvalidInputError
from curbzones.mixture import EMConfig, ZoneModel
from curbzones.temporal import (
    centroid_dispersion,
    consistency_metric,
    consistency_rows,
    consistency_table,
    haversine,
    hour_label,
    kmeans,
    occupancy_diff,
    seasonal_delta,
    zone_variance,
)

FAST = EMConfig(restarts=3)
MONDAY = dt.date(2017, 6, 5)


def test_haversine_one_degree_on_equator():
    # 6_371_000 * pi / 180
    assert haversine(0.0, 0.0, 0.0, 1.0) == pytest.approx(111194.92664455874, abs=1e-6)
    assert haversine(47.6, -122.3, 47.6, -122.3) == 0.0


def test_hour_labels():
    assert [hour_label(h) for h in (8, 11, 12, 13, 19)] == ["8AM", "11AM", "12PM", "1PM", "7PM"]


# ---------------------------------------------------------------- consistency


def one_flip_grid():
    blocks = make_blocks([(47.61, -122.34)] * 10)
    first = [0.1] * 5 + [0.9] * 5
    second = [0.9] + [0.1] * 4 + [0.9] * 5
    dates = weekly(MONDAY, 0, 2)
    grid = make_grid([b.id for b in blocks], dates, [10], np.column_stack([first, second]))
    return blocks, grid


def test_one_flip_gives_ninety():
    blocks, grid = one_flip_grid()
    rep = consistency_metric(grid, blocks, "Mon", 10, 2, FAST)
    assert rep.anchor_percentages == {"2017-06-05": 90.0, "2017-06-12": 90.0}
    assert rep.mean == 90.0


def test_identical_dates_give_hundred(rng):
    coords = rng.normal([47.61, -122.34], 0.002, (30, 2))
    blocks = make_blocks(coords)
    occ = np.where(coords[:, 0] > 47.61, 0.8, 0.2) + rng.normal(0, 0.02, 30)
    dates = weekly(MONDAY, 0, 4)
    grid = make_grid([b.id for b in blocks], dates, [10], np.tile(occ[:, None], (1, 4)))
    rep = consistency_metric(grid, blocks, 0, 10, 3, FAST)
    assert set(rep.anchor_percentages.values()) == {100.0}
    assert len(rep.models) == 4


def test_consistency_ignores_column_order(rng):
    blocks, grid = one_flip_grid()
    flipped = make_grid(grid.block_ids, weekly(MONDAY, 0, 2)[::-1], [10], grid.values[:, ::-1])
    a = consistency_metric(grid, blocks, 0, 10, 2, FAST).mean
    b = consistency_metric(flipped, blocks, 0, 10, 2, FAST).mean
    assert a == b


def test_consistency_needs_two_dates():
    blocks, grid = one_flip_grid()
    with pytest.raises(EmptySliceError):
        consistency_metric(grid, blocks, 0, 10, 2, FAST, date_range=(MONDAY, MONDAY))


def test_consistency_table_layout():
    blocks, grid = one_flip_grid()
    days, hours, table, reports = consistency_table(grid, blocks, 2, FAST)
    rows = list(consistency_rows(days, hours, table))
    assert rows == [["day", "10AM", "Daily"], ["Mon", "90.0", "90.0"], ["Hourly", "90.0", ""]]


# ---------------------------------------------------------------- dispersion


def _centered_model(centers):
    k = len(centers)
    means = np.column_stack([np.asarray(centers, float), np.zeros(k)])
    return ZoneModel(np.full(k, 1 / k), means, np.ones((k, 3)), np.tile([0.0, 1.0], (3, 1)))


def test_identical_models_have_zero_dispersion():
    centers = [[0.1, 0.2], [0.5, 0.9], [0.3, 0.3]]
    res = centroid_dispersion([_centered_model(centers)] * 5)
    assert res.mean_distance_m == 0.0 and res.k == 3


def test_two_centers_one_degree_apart():
    # both sit half a degree of longitude on the equator from the centroid
    res = centroid_dispersion([_centered_model([[0.0, 0.0]]), _centered_model([[0.0, 1.0]])], k=1)
    assert res.mean_distance_m == pytest.approx(55597.46332227937, abs=1e-3)


def test_dispersion_invariant_to_component_order(rng):
    models = [_centered_model(rng.uniform(0, 1, (3, 2))) for _ in range(4)]
    shuffled = [m.permuted(rng.permutation(3)) for m in models]
    a = centroid_dispersion(models).mean_distance_m
    b = centroid_dispersion(shuffled).mean_distance_m
    assert a == pytest.approx(b, rel=1e-12)


def test_dispersion_rejects_mixed_k():
    with pytest.raises(InvalidInputError):
        centroid_dispersion([_centered_model([[0, 0]]), _centered_model([[0, 0], [1, 1]])])


def test_kmeans_inertia_never_increases(rng):
    pts = rng.normal(size=(200, 2))
    res = kmeans(pts, 5, restarts=3, seed=1)
    assert np.all(np.diff(res.history) <= 1e-12)
    assert len(set(res.labels.tolist())) == 5


# ----------------------------------------------------------- change summaries


def two_season_grid(values_a, values_b):
    dates = [dt.date(2017, 6, 5), dt.date(2017, 9, 4)]
    vals = np.column_stack([values_a, values_b])
    grid = make_grid([f"b{i}" for i in range(len(values_a))], dates, [10], vals)
    return grid, (dates[0], dates[0]), (dates[1], dates[1])


def test_seasonal_same_season_is_zero(rng):
    grid, a, _ = two_season_grid(rng.uniform(0, 1, 5), rng.uniform(0, 1, 5))
    (row,) = seasonal_delta(grid, a, a)
    assert (row.mean_increase, row.mean_decrease, row.percent_increasing) == (0.0, 0.0, 0.0)


def test_seasonal_two_blocks():
    grid, a, b = two_season_grid([0.5, 0.5], [0.6, 0.3])
    (row,) = seasonal_delta(grid, a, b)
    assert row.mean_increase == pytest.approx(10.0, abs=1e-12)
    assert row.mean_decrease == pytest.approx(20.0, abs=1e-12)
    assert row.percent_increasing == 50.0


def test_seasonal_matches_direct_computation(rng):
    a_vals, b_vals = rng.uniform(0, 1, 40), rng.uniform(0, 1, 40)
    grid, a, b = two_season_grid(a_vals, b_vals)
    (row,) = seasonal_delta(grid, a, b)
    delta = [100 * (y - x) for x, y in zip(a_vals, b_vals)]
    ups = [d for d in delta if d > 0]
    downs = [-d for d in delta if d < 0]
    assert row.mean_increase == pytest.approx(sum(ups) / len(ups), abs=1e-10)
    assert row.mean_decrease == pytest.approx(sum(downs) / len(downs), abs=1e-10)
    assert row.percent_increasing == pytest.approx(100 * len(ups) / 40, abs=1e-12)
    assert len(ups) + len(downs) == row.n_blocks


def test_seasonal_reversed_range():
    grid, a, b = two_season_grid([0.1], [0.2])
    with pytest.raises(InvalidInputError):
        seasonal_delta(grid, (b[1], a[0]), b)


def test_occupancy_diff_examples():
    grid, a, b = two_season_grid([0.5, 0.5, 0.2], [0.4, 0.4, 0.2])
    rows = {r.zone: r for r in occupancy_diff(grid, a, b, ["X", "X", "Y"])}
    assert rows["X"].relative_change == pytest.approx(-20.0, abs=1e-12)
    assert rows["Y"].relative_change == 0.0
    assert not rows["X"].floored


def test_occupancy_diff_floor():
    grid, a, b = two_season_grid([0.0], [0.05])
    (row,) = occupancy_diff(grid, a, b, ["Z"])
    assert row.floored and row.relative_change == pytest.approx(500.0)


def test_zone_variance_examples():
    grid, _, _ = two_season_grid([0.4, 0.6, 0.3, 0.3], [0.5, 0.5, 0.5, 0.5])
    lab = [0, 0, 1, 1]
    # slice 1: groups {.4,.6} var .01 and {.3,.3} var 0 -> .005; slice 2: 0
    assert zone_variance(grid, lab) == pytest.approx(0.0025, abs=1e-15)
    assert zone_variance(grid, lab, grid.timestamps[:1]) == pytest.approx(0.005, abs=1e-15)
    pair, _, _ = two_season_grid([0.4, 0.6], [0.4, 0.6])
    assert zone_variance(pair, [1, 1]) == pytest.approx(0.01, abs=1e-15)


def test_zone_variance_constant_is_zero():
    grid, _, _ = two_season_grid([0.3] * 4, [0.7] * 4)
    assert zone_variance(grid, [0, 0, 1, 1]) == 0.0


def test_zone_variance_needs_a_real_group():
    grid, _, _ = two_season_grid([0.1, 0.9], [0.2, 0.8])
    with pytest.raises(InvalidInputError):
        zone_variance(grid, [0, 1])
