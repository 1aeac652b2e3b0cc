"""``pkss-align`` command line: register, perturb and bench.

Exit codes: 0 success, 1 I/O error, 2 registration failure, 3 empty or
invalid corpus, 4 bad flags.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .evalgen import BandSpec, Metrics, NoiseSpec, PerturbationRecord, compute_metrics, perturb, registration_recall
from .geometry import PointCloud, apply_transform
from .io import CloudParseError, load_cloud, save_cloud
from .pipeline import RegistrationReport, RunConfig, register
from .preprocess import DegenerateCloudError
from .search import RegistrationFailed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_PREFIX = "PKSS_ALIGN_"
CSV_FIELDS = ("item_id", "time_s", "mse", "mse_n", "gt_cos", "success")

EXIT_OK, EXIT_IO, EXIT_FAILED, EXIT_CORPUS, EXIT_USAGE = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _coerce(name: str, value):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields:
        raise CommandError(f"unknown config key {name!r}", EXIT_USAGE)
    default = fields[name].default
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return text in ("1", "true", "yes", "on")
        return type(default)(value)
    except (TypeError, ValueError):
        raise CommandError(f"bad value {value!r} for config key {name!r}", EXIT_USAGE) from None


def read_config_file(path) -> dict:
    """Flat key/value document: a JSON object or ``key = value`` lines."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CommandError(f"{path}: line {lineno}: expected key = value", EXIT_USAGE) from None
            key, value = (part.strip() for part in line.split("=", 1))
            data[key] = value.strip("\"'")
    if not isinstance(data, dict):
        raise CommandError(f"{path}: config must be a flat mapping", EXIT_USAGE)
    return {k: _coerce(k, v) for k, v in data.items()}


def resolve_config(config_file, overrides: dict, environ=None) -> RunConfig:
    """Defaults, then the config file, then environment, then explicit flags."""
    environ = os.environ if environ is None else environ
    values = read_config_file(config_file) if config_file else {}
    for f in dataclasses.fields(RunConfig):
        env = environ.get(ENV_PREFIX + f.name.upper())
        if env is not None:
            values[f.name] = _coerce(f.name, env)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None


def _load(path) -> PointCloud:
    try:
        return load_cloud(path)
    except (OSError, CloudParseError) as exc:
        raise CommandError(f"cannot load {path}: {exc}", EXIT_IO) from None


def _write_json(path, payload) -> None:
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _register(source: PointCloud, template: PointCloud, cfg: RunConfig) -> RegistrationReport:
    try:
        return register(source, template, cfg)
    except (RegistrationFailed, DegenerateCloudError) as exc:
        raise CommandError(f"registration failed: {exc}", EXIT_FAILED) from None


def report_payload(report: RegistrationReport, source_path=None, template_path=None) -> dict:
    t = report.transform
    s = report.search
    return {
        "schema_version": SCHEMA_VERSION,
        "source": None if source_path is None else str(source_path),
        "template": None if template_path is None else str(template_path),
        "matrix": t.as_matrix().tolist(),
        "scale": t.scale,
        "best_measure": report.final_measure,
        "grid_measure": float(s.measures.min()) if s.measures is not None else None,
        "rotation_index": s.best_rotation_index,
        "translation_index": s.best_translation_index,
        "matched_cells": s.alignment.matched_count,
        "evaluations": s.evaluations,
        "timings": report.timings,
        "config": report.config,
    }


def _common_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(dir_okay=False), help="Flat key/value config file."),
        click.option("--target-count", type=click.IntRange(min=1), help="Resampling size m."),
        click.option("--rotation-steps", type=click.IntRange(min=1), help="Rotation grid steps per axis."),
        click.option("--translation-steps", type=click.IntRange(min=1), help="Offset grid steps per axis (odd)."),
        click.option("--workers", "worker_count", type=click.IntRange(min=0), help="Worker threads, 0 = all cores."),
        click.option("--seed", type=int, help="Seed recorded in the config snapshot."),
        click.option("--features/--no-features", "use_features", default=None, help="Use feature samples."),
        click.option("--mse-condition/--no-mse-condition", "enable_mse_condition", default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _overrides(kwargs: dict) -> dict:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return {k: kwargs.pop(k) for k in list(kwargs) if k in names}


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging.")
def cli(verbose):
    """Similarity registration of point clouds by exhaustive shape-space search."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command("register")
@click.argument("source", type=click.Path(dir_okay=False))
@click.argument("template", type=click.Path(dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Aligned source cloud to write.")
@click.option("-r", "--report", type=click.Path(dir_okay=False), help="JSON report to write (default: stdout).")
@_common_options
def register_cmd(source, template, output, report, config_file, **kwargs):
    """Align SOURCE onto TEMPLATE."""
    cfg = resolve_config(config_file, _overrides(kwargs))
    src, tmpl = _load(source), _load(template)
    rep = _register(src, tmpl, cfg)
    if output:
        try:
            save_cloud(output, apply_transform(rep.transform, src))
        except OSError as exc:
            raise CommandError(f"cannot write {output}: {exc}", EXIT_IO) from None
    payload = report_payload(rep, source, template)
    if report:
        _write_json(report, payload)
    else:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


@cli.command("perturb")
@click.argument("input_path", metavar="INPUT", type=click.Path(dir_okay=False))
@click.option("-d", "--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=click.IntRange(min=1), default=1, show_default=True, help="Items to generate.")
@click.option("--name", help="Item name prefix (default: input stem).")
@click.option("--rotate", is_flag=True, help="Random rotation, each Euler angle in [-pi, pi].")
@click.option("--scale", is_flag=True, help="Random scale in [0.5, 2].")
@click.option("--translate", is_flag=True, help="Random translation up to half the bbox diagonal per axis.")
@click.option("--noise", type=click.Choice(["gaussian", "mean"]), help="Noise kind along normals.")
@click.option("--r", "noise_r", type=float, help="Noise range, sigma = r * l_k.")
@click.option("--noise-k", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--defect", type=float, help="Fraction of points removed around a random seed point.")
@click.option("--bands", type=int, help="Number of kept bands for band decimation.")
@click.option("--band-axis", type=click.Choice(["x", "y", "z", "longest"]), help="Axis for band decimation.")
@click.option("--ascii", "ascii_ply", is_flag=True, help="Write ascii PLY.")
def perturb_cmd(input_path, out_dir, seed, count, name, rotate, scale, translate, noise, noise_r, noise_k, defect,
                bands, band_axis, ascii_ply):  # fmt: skip
    """Write perturbed copies of INPUT with sidecar records."""
    if noise_r is not None and noise is None:
        raise click.UsageError("--r requires --noise")
    if noise is not None and noise_r is None:
        raise click.UsageError("--noise requires --r")
    if noise_r is not None and not noise_r > 0:
        raise click.BadParameter("must be positive", param_hint="--r")
    if defect is not None and not 0 <= defect < 1:
        raise click.BadParameter("must lie in [0, 1)", param_hint="--defect")
    if band_axis is not None and bands is None:
        raise click.UsageError("--band-axis requires --bands")
    if bands is not None and bands < 2:
        raise click.BadParameter("must be at least 2", param_hint="--bands")

    cloud = _load(input_path)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create {out}: {exc}", EXIT_IO) from None
    stem = name or Path(input_path).stem
    template_ref = os.path.relpath(Path(input_path).resolve(), out.resolve())
    for i in range(count):
        item_seed = seed ^ i
        item = stem if count == 1 else f"{stem}_{i:04d}"
        pert, record = perturb(
            cloud,
            item_seed,
            rotation_range=(-np.pi, np.pi) if rotate else (0.0, 0.0),
            scale_range=(0.5, 2.0) if scale else (1.0, 1.0),
            translation_frac=0.5 if translate else 0.0,
            noise=None if noise is None else NoiseSpec(noise, noise_r, noise_k),
            defect_fraction=defect,
            bands=None if bands is None else BandSpec(bands, band_axis or "longest"),
        )
        source_name = f"{item}.source.ply"
        try:
            save_cloud(out / source_name, pert, binary=not ascii_ply)
        except OSError as exc:
            raise CommandError(f"cannot write {out / source_name}: {exc}", EXIT_IO) from None
        payload = {"schema_version": SCHEMA_VERSION, "item_id": item, "source": source_name, "template": template_ref}
        payload.update(record.to_dict())
        _write_json(out / f"{item}.json", payload)
        click.echo(str(out / source_name))
    return EXIT_OK


def discover_items(corpus: Path):
    """``(item_id, source_path, record_path or None)`` for every ``*.source.*`` file, sorted."""
    items = []
    for path in sorted(corpus.glob("*.source.*")):
        item_id = path.name.split(".source.", 1)[0]
        sidecar = corpus / f"{item_id}.json"
        items.append((item_id, path, sidecar if sidecar.exists() else None))
    return items


def _bench_item(corpus: Path, item_id: str, source_path: Path, sidecar: Path, cfg: RunConfig) -> dict:
    data = json.loads(sidecar.read_text(encoding="utf-8"))
    record = PerturbationRecord.from_dict(data)
    template_path = corpus / data.get("template", "")
    source, template = _load(source_path), _load(template_path)
    t0 = time.perf_counter()
    try:
        rep = register(source, template, cfg)
    except (RegistrationFailed, DegenerateCloudError) as exc:
        logger.warning("%s: %s", item_id, exc)
        nan = float("nan")
        return {"item_id": item_id, "time_s": time.perf_counter() - t0, "mse": nan, "mse_n": nan, "gt_cos": nan,
                "success": False}  # fmt: skip
    elapsed = time.perf_counter() - t0
    aligned = apply_transform(rep.transform, rep.source.cloud)
    m = compute_metrics(
        aligned, rep.template.cloud, record.transform.rotation, rep.transform.rotation.T, cfg.enable_mse_condition
    )
    return {"item_id": item_id, "time_s": elapsed, **m.to_dict()}


def _mean(values) -> float | None:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else None


@cli.command("bench")
@click.argument("corpus", type=click.Path(file_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Per-item CSV (default: CORPUS/bench.csv).")
@click.option("-r", "--report", type=click.Path(dir_okay=False), help="Aggregate JSON (default: stdout).")
@_common_options
def bench_cmd(corpus, csv_path, report, config_file, **kwargs):
    """Register every item of CORPUS and score it against its record."""
    cfg = resolve_config(config_file, _overrides(kwargs))
    corpus = Path(corpus)
    if not corpus.is_dir():
        raise CommandError(f"no such corpus directory: {corpus}", EXIT_IO)
    found = discover_items(corpus)
    items = [it for it in found if it[2] is not None]
    skipped = [it[0] for it in found if it[2] is None]
    for item_id in skipped:
        logger.warning("%s: missing sidecar record, skipped", item_id)
    if not items:
        raise CommandError(f"no items in corpus {corpus}", EXIT_CORPUS)

    workers = cfg.search_config.worker_count()
    inner = dataclasses.replace(cfg, worker_count=1) if workers > 1 and len(items) > 1 else cfg

    def run(item):
        return _bench_item(corpus, item[0], item[1], item[2], inner)

    if inner is cfg:
        rows = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            rows = list(pool.map(run, items))

    csv_path = Path(csv_path) if csv_path else corpus / "bench.csv"
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "success": int(row["success"])})
    except OSError as exc:
        raise CommandError(f"cannot write {csv_path}: {exc}", EXIT_IO) from None

    metrics = [Metrics(r["mse"], r["mse_n"], r["gt_cos"], r["success"]) for r in rows]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "items": len(rows),
        "skipped": len(skipped),
        "skipped_items": skipped,
        "mean_time_s": _mean(r["time_s"] for r in rows),
        "mean_mse": _mean(r["mse"] for r in rows),
        "mean_mse_n": _mean(r["mse_n"] for r in rows),
        "mean_gt_cos": _mean(r["gt_cos"] for r in rows),
        "rr": registration_recall(metrics, cfg.enable_mse_condition),
        "config": cfg.to_dict(),
    }
    if report:
        _write_json(report, summary)
    else:
        click.echo(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    """Entry point; maps failures onto the documented exit codes."""
    try:
        code = cli.main(args=argv, prog_name="pkss-align", standalone_mode=False)
    except CommandError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
