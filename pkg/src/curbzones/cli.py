"""Command-line pipeline: synth -> ingest -> fit -> report -> export-geojson.

Every command reads one JSON run config (``--config``); command-line flags
override its keys.  Relative paths in the config resolve against the
config file's directory.  Exit codes: 0 success, 2 input error, 3
computation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from curbzones.exceptions import CurbzonesError, InvalidInputError, ParseError
from curbzones.ingest import (
    DAY_NAMES,
    Schedule,
    build_grid,
    read_blockfaces,
    read_grid,
    read_transactions,
    slice_mean,
    write_grid,
)
from curbzones.mixture import EMConfig, ZoneModel, _midpoints_for, fit_slice, raw_features, select_k
from curbzones.spatial import MODES, build_weights, significance_sweep, sweep_rows
from curbzones.synth import SynthSpec, generate, write_synth
from curbzones.temporal import (
    centroid_dispersion,
    consistency_rows,
    consistency_table,
    occupancy_diff,
    seasonal_delta,
    zone_variance,
)

logger = logging.getLogger("curbzones")

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3
DEFAULT_WEIGHTS = (
    "knn:3", "knn:5", "knn:10", "global_distance",
    "area_connections", "area_distance", "gmm_connections", "gmm_distance",
)


@dataclass
class RunConfig:
    transactions: Path | None = None
    blockfaces: Path | None = None
    schedule: Path | None = None
    out: Path = Path("out")
    seed: int = 0
    k_min: int = 2
    k_max: int = 10
    em: dict = field(default_factory=dict)
    weights: tuple = DEFAULT_WEIGHTS
    significance: str = "analytic"
    permutations: int = 999
    date_range: tuple | None = None
    seasons: dict = field(default_factory=dict)
    price_change: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max <= 50:
            raise InvalidInputError(f"k range [{self.k_min}, {self.k_max}] must lie within [1, 50]")
        if self.significance not in ("analytic", "permutation"):
            raise InvalidInputError(f"unknown significance method {self.significance!r}")
        for spec in self.weights:
            parse_weight_spec(spec)
        for name, rng in {**self.seasons, **self.price_change}.items():
            _date_pair(rng, name)
        if self.date_range is not None:
            _date_pair(self.date_range, "date_range")

    @property
    def em_config(self) -> EMConfig:
        return EMConfig(seed=self.seed, **self.em)

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)


def _date_pair(value, name):
    try:
        lo, hi = (dt.date.fromisoformat(str(v)) for v in value)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"{name}: expected [start, end] ISO dates ({exc})") from None
    if lo > hi:
        raise InvalidInputError(f"{name}: start {lo} is after end {hi}")
    return lo, hi


def parse_weight_spec(spec: str) -> tuple[str, int | None]:
    text = spec.strip().lower()
    if text.startswith("knn"):
        tail = text[3:].lstrip(":=")
        if not tail.isdigit():
            raise InvalidInputError(f"knn weight spec needs a neighbour count: {spec!r}")
        return "knn", int(tail)
    if text not in MODES:
        raise InvalidInputError(f"unknown weight mode {spec!r}; expected one of {MODES}")
    return text, None


def load_config(args) -> RunConfig:
    doc, base = {}, Path.cwd()
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, line=exc.lineno, path=path) from None
        base = path.resolve().parent
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
    overrides = {
        "seed": args.seed, "out": args.out, "k_min": args.k_min, "k_max": args.k_max,
        "significance": args.sig, "permutations": args.permutations,
        "weights": args.weights.split(",") if args.weights else None,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("transactions", "blockfaces", "schedule", "out"):
        if doc.get(key) is not None:
            p = Path(doc[key])
            from_flag = key == "out" and args.out is not None
            doc[key] = p if p.is_absolute() or from_flag else base / p
    if "weights" in doc:
        doc["weights"] = tuple(doc["weights"])
    if doc.get("date_range") is not None:
        doc["date_range"] = tuple(doc["date_range"])
    return RunConfig(**doc)


# ------------------------------------------------------------------ file output


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to a temporary sibling, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def slice_name(day: int, hour: int) -> str:
    return f"{DAY_NAMES[day]}_{hour:02d}"


def _require(path, what):
    if path is None:
        raise InvalidInputError(f"config is missing the {what} path")
    if not Path(path).exists():
        raise InvalidInputError(f"{what} file not found: {path}")
    return Path(path)


# --------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    params = dict(cfg.synth)
    params.setdefault("seed", cfg.seed)
    if "start_date" in params:
        params["start_date"] = dt.date.fromisoformat(params["start_date"])
    if "schedule" in params:
        params["schedule"] = Schedule.from_text(params["schedule"])
    for key in ("center", "levels", "supply_range"):
        if key in params:
            params[key] = tuple(params[key])
    try:
        spec = SynthSpec(**params)
    except TypeError as exc:
        raise InvalidInputError(f"bad synth parameters: {exc}") from None
    data = generate(spec)
    cfg.out.mkdir(parents=True, exist_ok=True)
    paths = write_synth(data, cfg.out)
    run_config = {
        "transactions": paths["transactions"].name,
        "blockfaces": paths["blockfaces"].name,
        "schedule": paths["schedule"].name,
        "out": "run",
        "seed": cfg.seed,
        "k_min": cfg.k_min,
        "k_max": cfg.k_max,
        "weights": list(cfg.weights),
        "significance": cfg.significance,
        "permutations": cfg.permutations,
    }
    half = spec.start_date + dt.timedelta(days=7 * max(spec.weeks // 2, 1) - 1)
    if spec.weeks >= 2:
        run_config["seasons"] = {
            "first_half": [spec.start_date.isoformat(), half.isoformat()],
            "second_half": [(half + dt.timedelta(days=1)).isoformat(), spec.end_date.isoformat()],
        }
        run_config["price_change"] = run_config["seasons"]
    write_atomic(cfg.out / "config.json", _json_text(run_config))
    print(f"wrote synthetic inputs for {spec.n_blocks} block-faces to {cfg.out}")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig) -> int:
    blockfaces = read_blockfaces(_require(cfg.blockfaces, "blockfaces"))
    transactions = read_transactions(_require(cfg.transactions, "transactions"))
    schedule = Schedule.from_file(cfg.schedule) if cfg.schedule else Schedule()
    grid = build_grid(transactions, blockfaces, schedule)
    buf = io.StringIO()
    write_grid(grid, buf)
    write_atomic(cfg.out / "grid.csv", buf.getvalue())
    write_atomic(cfg.out / "ingest_report.json", _json_text(grid.report.to_dict()))
    print(f"grid: {grid.n_blocks} block-faces x {len(grid.timestamps)} hours; "
          f"clip fraction {grid.report.clip_fraction:.4%}")
    return EXIT_OK


def _load_grid_and_blocks(cfg):
    grid = read_grid(_require(cfg.out / "grid.csv", "grid (run `ingest` first)"))
    blockfaces = read_blockfaces(_require(cfg.blockfaces, "blockfaces"))
    return grid, blockfaces


def cmd_fit(cfg: RunConfig) -> int:
    grid, blockfaces = _load_grid_and_blocks(cfg)
    em = cfg.em_config
    searched = cfg.k_min != cfg.k_max
    selection = select_k(grid, blockfaces, cfg.k_range, em, cfg.date_range, return_details=searched)
    if searched:
        k = selection.k
        mean_bic = {str(kk): v for kk, v in sorted(selection.mean_bic.items())}
    else:
        k, mean_bic = selection, {}
    midpoints = _midpoints_for(grid, blockfaces)
    models_dir = cfg.out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    for stale in models_dir.glob("*.json"):
        stale.unlink()
    for day, hour in grid.slice_keys():
        if cfg.date_range and not grid.matching(day, hour, cfg.date_range).size:
            continue
        raw = raw_features(midpoints, slice_mean(grid, day, hour, cfg.date_range))
        model = fit_slice(raw, k, em.replace(seed=_slice_model_seed(cfg.seed, day, hour)),
                          slice_id=slice_name(day, hour))
        text = model.to_json(day=DAY_NAMES[day], hour=hour, block_ids=list(grid.block_ids))
        write_atomic(models_dir / f"{slice_name(day, hour)}.json", text + "\n")
    summary = {"k": k, "k_range": [cfg.k_min, cfg.k_max], "searched": searched,
               "mean_bic": mean_bic, "n_slices": len(grid.slice_keys())}
    write_atomic(cfg.out / "selection.json", _json_text(summary))
    print(f"chosen k = {k}")
    return EXIT_OK


def _slice_model_seed(seed, day, hour):
    return int(np.random.SeedSequence([seed, 7919, day, hour]).generate_state(1)[0])


def _load_models(cfg, grid):
    models = {}
    for day, hour in grid.slice_keys():
        path = cfg.out / "models" / f"{slice_name(day, hour)}.json"
        if path.exists():
            doc = json.loads(path.read_text())
            if doc.get("block_ids") != list(grid.block_ids):
                raise InvalidInputError(f"{path} was fitted on different block-faces")
            models[(day, hour)] = ZoneModel.from_dict(doc)
    if not models:
        raise InvalidInputError("no fitted models found (run `fit` first)")
    return models


def cmd_report(cfg: RunConfig) -> int:
    grid, blockfaces = _load_grid_and_blocks(cfg)
    models = _load_models(cfg, grid)
    selection = json.loads(_require(cfg.out / "selection.json", "selection").read_text())
    k = int(selection["k"])
    by_id = {bf.id: bf for bf in blockfaces}
    blocks = [by_id[b] for b in grid.block_ids]
    paid_areas = np.array([bf.paid_area for bf in blocks])
    failures = []
    reports_dir = cfg.out / "reports"

    def gmm_labels(day, hour):
        return models[(day, hour)].assignments

    # Consistency and centroid dispersion
    try:
        days, hours, table, per_slice = consistency_table(grid, blockfaces, k, cfg.em_config,
                                                          cfg.date_range)
        write_atomic(reports_dir / "consistency.csv", _csv_text(consistency_rows(days, hours, table)))
        rows = [("day", "hour", "k", "mean_distance_m")]
        for (day, hour), rep in sorted(per_slice.items()):
            fitted = [rep.models[d] for d in sorted(rep.models)]
            if len(fitted) < 2:
                continue
            disp = centroid_dispersion(fitted, k, day, hour, seed=cfg.seed)
            rows.append((DAY_NAMES[day], hour, k, f"{disp.mean_distance_m:.3f}"))
        write_atomic(reports_dir / "dispersion.csv", _csv_text(rows))
    except CurbzonesError as exc:
        failures.append(f"consistency: {exc}")

    # Moran's I sweeps
    sweep = [("slice_date", "slice_hour", "mode", "I", "z", "p", "significant")]
    summary = [("mode", "n_tested", "n_degenerate", "percent_significant")]
    timestamps = _timestamps_in(grid, cfg.date_range)
    for spec in cfg.weights:
        mode, kk = parse_weight_spec(spec)
        try:
            if mode.startswith("gmm"):
                cache = {}

                def weights(day, hour, mode=mode, cache=cache):
                    if (day, hour) not in cache:
                        cache[(day, hour)] = build_weights(blocks, mode, labels=gmm_labels(day, hour))
                    return cache[(day, hour)]
            else:
                weights = build_weights(blocks, mode, k=kk, labels=paid_areas if mode.startswith("area") else None)
            result = significance_sweep(grid, weights, timestamps, cfg.significance,
                                        cfg.permutations, cfg.seed)
        except CurbzonesError as exc:
            failures.append(f"sweep {spec}: {exc}")
            continue
        sweep.extend(sweep_rows(result))
        summary.append((result.reports[0].mode if result.reports else mode, result.n_tested,
                        len(result.degenerate), f"{result.percent_significant:.2f}"))
    write_atomic(reports_dir / "moran_sweep.csv", _csv_text(sweep))
    write_atomic(reports_dir / "sweep_summary.csv", _csv_text(summary))

    # Within-zone variance
    rows = [("zones", "mean_within_zone_variance")]
    for name, labels in (("gmm", gmm_labels), ("paid_area", paid_areas)):
        try:
            rows.append((name, f"{zone_variance(grid, labels, timestamps):.8f}"))
        except CurbzonesError as exc:
            failures.append(f"zone variance {name}: {exc}")
    write_atomic(reports_dir / "zone_variance.csv", _csv_text(rows))

    # Seasonal and price-change tables
    if cfg.seasons:
        rows = [("from", "to", "hour", "mean_increase_pct", "mean_decrease_pct",
                 "percent_increasing", "n_blocks", "n_excluded")]
        names = list(cfg.seasons)
        for a, b in zip(names, names[1:]):
            try:
                for r in seasonal_delta(grid, cfg.seasons[a], cfg.seasons[b]):
                    rows.append((a, b, r.hour, f"{r.mean_increase:.4f}", f"{r.mean_decrease:.4f}",
                                 f"{r.percent_increasing:.2f}", r.n_blocks, r.n_excluded))
            except CurbzonesError as exc:
                failures.append(f"seasonal {a}->{b}: {exc}")
        write_atomic(reports_dir / "seasonal_delta.csv", _csv_text(rows))
    if cfg.price_change:
        (a_name, a), (b_name, b) = list(cfg.price_change.items())[:2]
        try:
            rows = [("zone", "day", "hour", f"mean_{a_name}", f"mean_{b_name}",
                     "relative_change_pct", "floored")]
            for r in occupancy_diff(grid, a, b, paid_areas):
                rows.append((r.zone, DAY_NAMES[r.day_of_week], r.hour, f"{r.mean_a:.6f}",
                             f"{r.mean_b:.6f}", f"{r.relative_change:.4f}", int(r.floored)))
            write_atomic(reports_dir / "occupancy_diff.csv", _csv_text(rows))
        except CurbzonesError as exc:
            failures.append(f"price change: {exc}")

    if failures:
        for msg in failures:
            print(f"report failure: {msg}", file=sys.stderr)
        return EXIT_COMPUTE
    print(f"reports written to {reports_dir}")
    return EXIT_OK


def _timestamps_in(grid, date_range):
    if date_range is None:
        return None
    lo, hi = _date_pair(date_range, "date_range")
    mask = (grid.dates >= np.datetime64(lo)) & (grid.dates <= np.datetime64(hi))
    return grid.timestamps[mask]


def cmd_export_geojson(cfg: RunConfig) -> int:
    grid, blockfaces = _load_grid_and_blocks(cfg)
    models = _load_models(cfg, grid)
    by_id = {bf.id: bf for bf in blockfaces}
    out_dir = cfg.out / "geojson"
    for (day, hour), model in sorted(models.items()):
        occupancy = slice_mean(grid, day, hour, cfg.date_range)
        features = []
        for i, block_id in enumerate(grid.block_ids):
            bf = by_id[block_id]
            features.append({
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[bf.endpoint_a[1], bf.endpoint_a[0]],
                                    [bf.endpoint_b[1], bf.endpoint_b[0]]],
                },
                "properties": {
                    "block_id": block_id,
                    "label": int(model.assignments[i]),
                    "occupancy": float(occupancy[i]),
                    "paid_area": bf.paid_area,
                },
            })
        doc = {"type": "FeatureCollection", "name": slice_name(day, hour), "features": features}
        write_atomic(out_dir / f"{slice_name(day, hour)}.geojson", json.dumps(doc, indent=1) + "\n")
    print(f"exported {len(models)} slices to {out_dir}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "report": cmd_report,
    "export-geojson": cmd_export_geojson,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, metavar="DIR")
    common.add_argument("--k-min", type=int)
    common.add_argument("--k-max", type=int)
    common.add_argument("--weights", metavar="MODE[,MODE...]",
                        help="e.g. knn:5,global_distance,gmm_connections")
    common.add_argument("--sig", choices=("analytic", "permutation"))
    common.add_argument("--permutations", type=int, metavar="M")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="curbzones", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CurbzonesError as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
