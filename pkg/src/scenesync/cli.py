"""Command-line front end: gen -> fit-priors -> learn-hyper -> optimize -> eval.

Conventions shared by all subcommands:

* every source of randomness flows from an explicit --seed flag;
* JSON config files can be partially overridden by flags;
* directory-producing commands write a manifest.json echoing the
  effective configuration, single-file commands write a sidecar
  <out>.manifest.json;
* exit codes: 0 success, 1 usage error, 2 data/schema error,
  3 numerical failure (partial outputs are removed);
* SCENESYNC_LOG in {error, warn, info, debug} enables line-delimited
  JSON logs on stderr.

Corpus directories use index-aligned file names: ground truth scenes
``scene_NNNN.json``; predictions ``pred_NNNN.json`` with the relative
tensor sidecar ``edges_NNNN.json``; optimizer outputs ``final_NNNN.json``
and ``report_NNNN.json``.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .hyperlearn import HyperLearnConfig, learn_hyper
from .metrics import (
    attribute_l2,
    indicator_pr,
    penetration_rate,
    relative_histogram_kl,
)
from .objective import HyperParams, PredictionBundle, default_robust_params
from .optimize import OptimizeConfig, synchronize
from .priors import PriorModel, fit_priors
from .relative import RelativeTensor
from .scene import (
    SceneParseError,
    SceneSchemaError,
    load_scene,
    save_scene,
)
from .synthgen import CorruptionConfig, GrammarConfig, corrupt, generate

logger = logging.getLogger("scenesync")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class DataError(Exception):
    """Bad or missing input data (exit code 2)."""


class NumericalError(Exception):
    """Computation produced no valid result (exit code 3)."""


class _JsonLogFormatter(logging.Formatter):
    def format(self, record):
        doc = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(doc)


def _setup_logging():
    level_name = os.environ.get("SCENESYNC_LOG", "").lower()
    levels = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    if level_name not in levels:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLogFormatter())
    root = logging.getLogger("scenesync")
    root.handlers[:] = [handler]
    root.setLevel(levels[level_name])


class _Outputs:
    """Tracks files written by a command so failures can clean them up."""

    def __init__(self):
        self.paths = []

    def write(self, path, text):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.paths.append(path)

    def discard(self):
        for p in self.paths:
            try:
                p.unlink()
            except OSError:
                pass


def _load_json_config(path, cls, overrides=None):
    base = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(base, dict):
            raise DataError(f"config {path} must be a JSON object")
    for key, val in (overrides or {}).items():
        if val is not None:
            base[key] = val
    try:
        return cls.from_dict(base) if base or path is not None else cls()
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid config: {exc}") from exc


def _read_text(path, what):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc


def _load_scene_file(path):
    try:
        return load_scene(Path(path))
    except (SceneParseError, SceneSchemaError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_bundle(pred_path, edges_path):
    node = _load_scene_file(pred_path)
    try:
        edges = RelativeTensor.from_json(_read_text(edges_path, "edge tensor"))
        return PredictionBundle(node, edges)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{edges_path}: {exc}") from exc


def _corpus_scenes(directory, pattern="scene_*.json"):
    files = sorted(Path(directory).glob(pattern))
    if not files:
        raise DataError(f"no {pattern} files in {directory}")
    return files


def _manifest(out, command, config, files, seed=None):
    doc = {"command": command, "config": config, "files": [str(f) for f in files]}
    if seed is not None:
        doc["seed"] = seed
    return json.dumps(doc, indent=1)


@click.group()
def cli():
    """Synchronize noisy scene-object predictions into consistent layouts."""
    _setup_logging()


@cli.command()
@click.option("--grammar", default="bedroom", show_default=True,
              help="Scene grammar name.")
@click.option("--n", required=True, type=int, help="Number of scenes.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="GrammarConfig JSON; flags override file values.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def gen(grammar, n, seed, config_path, out_dir):
    """Generate ground-truth scenes into a directory."""
    if grammar != "bedroom":
        raise DataError(f"unknown grammar {grammar!r}")
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    cfg = _load_json_config(config_path, GrammarConfig)
    outputs = _Outputs()
    scenes = generate(cfg, n, seed=seed)
    files = []
    for k, scene in enumerate(scenes):
        name = f"scene_{k:04d}.json"
        outputs.write(Path(out_dir) / name, save_scene(scene))
        files.append(name)
    outputs.write(
        Path(out_dir) / "manifest.json",
        _manifest(out_dir, "gen", {"grammar": grammar, "n": n, **cfg.to_dict()},
                  files, seed=seed),
    )
    logger.info("generated %d scenes into %s", n, out_dir)
    return outputs


@cli.command(name="corrupt")
@click.option("--scenes", "in_dir", required=True, type=click.Path(),
              help="Directory of ground-truth scene_*.json files.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="CorruptionConfig JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def corrupt_cmd(in_dir, seed, config_path, out_dir):
    """Corrupt clean scenes into noisy prediction bundles."""
    cfg = _load_json_config(config_path, CorruptionConfig)
    files = _corpus_scenes(in_dir)
    outputs = _Outputs()
    names = []
    for k, path in enumerate(files):
        scene = _load_scene_file(path)
        try:
            bundle = corrupt(scene, cfg, seed=seed + k)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        pred = f"pred_{k:04d}.json"
        edges = f"edges_{k:04d}.json"
        outputs.write(Path(out_dir) / pred, save_scene(bundle.node_preds))
        outputs.write(Path(out_dir) / edges, bundle.edge_preds.to_json())
        names += [pred, edges]
    outputs.write(
        Path(out_dir) / "manifest.json",
        _manifest(out_dir, "corrupt", cfg.to_dict(), names, seed=seed),
    )
    logger.info("corrupted %d scenes into %s", len(files), out_dir)
    return outputs


@cli.command(name="fit-priors")
@click.option("--train", "train_dir", required=True, type=click.Path(),
              help="Directory of ground-truth scene_*.json files.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--hyper-out", "hyper_out", type=click.Path(), default=None,
              help="Also write a full hyperparameter file combining the "
                   "fitted priors with default robust-loss parameters.")
def fit_priors_cmd(train_dir, seed, out_path, hyper_out):
    """Fit translation, relative and count priors from clean scenes."""
    scenes = [_load_scene_file(p) for p in _corpus_scenes(train_dir)]
    outputs = _Outputs()
    try:
        prior = fit_priors(scenes, seed=seed)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"prior fitting failed: {exc}") from exc
    outputs.write(out_path, prior.to_json())
    if hyper_out is not None:
        hyper = HyperParams(
            default_robust_params(scenes[0].class_table), prior, edge_gating=True
        )
        outputs.write(hyper_out, hyper.to_json())
    outputs.write(
        str(out_path) + ".manifest.json",
        _manifest(out_path, "fit-priors", {"train": str(train_dir)},
                  [out_path] + ([hyper_out] if hyper_out else []), seed=seed),
    )
    logger.info("fit priors from %d scenes", len(scenes))
    return outputs


def _load_hyper(hyper_path, priors_path):
    try:
        hyper = HyperParams.from_json(_read_text(hyper_path, "hyperparameters"))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{hyper_path}: {exc}") from exc
    if priors_path is not None:
        try:
            prior = PriorModel.from_json(_read_text(priors_path, "priors"))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{priors_path}: {exc}") from exc
        hyper = HyperParams(hyper.robust, prior, hyper.edge_gating)
    return hyper


def _optimize_one(args):
    hyper, bundle, config = args
    scene, report = synchronize(hyper, bundle, config=config)
    return scene, report


@cli.command()
@click.option("--pred", "pred_path", required=True, type=click.Path(),
              help="Prediction scene JSON, or a directory of pred_*.json.")
@click.option("--edges", "edges_path", type=click.Path(), default=None,
              help="Relative tensor JSON (single-scene mode).")
@click.option("--hyper", "hyper_path", required=True, type=click.Path())
@click.option("--priors", "priors_path", type=click.Path(), default=None,
              help="Optional prior file overriding the one embedded in --hyper.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="OptimizeConfig JSON.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--jobs", default=1, show_default=True, type=int,
              help="Worker processes in directory mode.")
def optimize(pred_path, edges_path, hyper_path, priors_path, config_path,
             out_path, report_path, jobs):
    """Synchronize prediction bundles into consistent hard scenes."""
    hyper = _load_hyper(hyper_path, priors_path)
    config = _load_json_config(config_path, OptimizeConfig)
    outputs = _Outputs()
    if Path(pred_path).is_dir():
        preds = sorted(Path(pred_path).glob("pred_*.json"))
        if not preds:
            raise DataError(f"no pred_*.json files in {pred_path}")
        bundles = []
        for p in preds:
            e = p.with_name(p.name.replace("pred_", "edges_"))
            if not e.exists():
                raise DataError(f"missing edge tensor {e}")
            bundles.append(_load_bundle(p, e))
        t0 = time.perf_counter()
        work = [(hyper, b, config) for b in bundles]
        try:
            if jobs > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(_optimize_one, work))
            else:
                results = [_optimize_one(w) for w in work]
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            outputs.discard()
            raise NumericalError(f"optimization failed: {exc}") from exc
        names = []
        for k, (scene, report) in enumerate(results):
            fn = f"final_{k:04d}.json"
            rn = f"report_{k:04d}.json"
            outputs.write(Path(out_path) / fn, save_scene(scene))
            outputs.write(
                Path(out_path) / rn,
                json.dumps(report.to_dict(), indent=1),
            )
            names += [fn, rn]
        outputs.write(
            Path(out_path) / "manifest.json",
            _manifest(out_path, "optimize",
                      {"config": config.to_dict(), "jobs": jobs}, names),
        )
        logger.info("optimized %d scenes in %.1fs", len(bundles),
                    time.perf_counter() - t0)
    else:
        if edges_path is None:
            raise click.UsageError("--edges is required for single-scene --pred")
        bundle = _load_bundle(pred_path, edges_path)
        try:
            scene, report = synchronize(hyper, bundle, config=config)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            outputs.discard()
            raise NumericalError(f"optimization failed: {exc}") from exc
        outputs.write(out_path, save_scene(scene))
        if report_path is not None:
            doc = report.to_dict()
            doc["config"] = config.to_dict()
            outputs.write(report_path, json.dumps(doc, indent=1))
        outputs.write(
            str(out_path) + ".manifest.json",
            _manifest(out_path, "optimize", {"config": config.to_dict()},
                      [out_path] + ([report_path] if report_path else [])),
        )
    return outputs


@cli.command(name="learn-hyper")
@click.option("--val", "val_dir", required=True, type=click.Path(),
              help="Directory with scene_*.json ground truth and "
                   "pred_*.json / edges_*.json predictions.")
@click.option("--init", "init_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="HyperLearnConfig JSON.")
@click.option("--seed", default=None, type=int,
              help="Overrides the config seed.")
@click.option("--out", "out_path", required=True, type=click.Path())
def learn_hyper_cmd(val_dir, init_path, config_path, seed, out_path):
    """Learn robust-loss and prior hyperparameters on a validation split."""
    config = _load_json_config(config_path, HyperLearnConfig,
                               overrides={"seed": seed})
    hyper = _load_hyper(init_path, None)
    gts = [_load_scene_file(p) for p in _corpus_scenes(val_dir)]
    instances = []
    for k, gt in enumerate(gts):
        pred = Path(val_dir) / f"pred_{k:04d}.json"
        edges = Path(val_dir) / f"edges_{k:04d}.json"
        if not pred.exists() or not edges.exists():
            raise DataError(f"missing predictions for scene {k} in {val_dir}")
        instances.append((_load_bundle(pred, edges), gt.harden()))
    outputs = _Outputs()
    try:
        learned, report = learn_hyper(hyper, instances, config)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"hyperparameter learning failed: {exc}") from exc
    outputs.write(out_path, learned.to_json())
    outputs.write(
        str(out_path) + ".manifest.json",
        _manifest(out_path, "learn-hyper",
                  {"config": config.to_dict(), "report": report},
                  [out_path]),
    )
    logger.info("learned hyperparameters over %d instances", len(instances))
    return outputs


@cli.command(name="eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(),
              help="Directory of predicted scenes (final_*.json or scene_*.json).")
@click.option("--gt", "gt_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(pred_dir, gt_dir, out_path):
    """Score predicted scenes against ground truth; writes metrics JSON."""
    pred_files = sorted(Path(pred_dir).glob("final_*.json")) or sorted(
        Path(pred_dir).glob("scene_*.json")
    )
    if not pred_files:
        raise DataError(f"no final_*.json or scene_*.json files in {pred_dir}")
    gt_files = _corpus_scenes(gt_dir)
    if len(pred_files) != len(gt_files):
        raise DataError(
            f"{len(pred_files)} predictions vs {len(gt_files)} ground-truth scenes"
        )
    preds = [_load_scene_file(p).harden() for p in pred_files]
    gts = [_load_scene_file(p) for p in gt_files]
    doc = {
        "format": 1,
        "attribute_l2": attribute_l2(preds, gts),
        "indicator_pr": indicator_pr(preds, gts),
        "penetration_rate": {
            "pred": penetration_rate(preds),
            "gt": penetration_rate(gts),
        },
        "inputs": {"pred": str(pred_dir), "gt": str(gt_dir),
                   "scenes": len(preds)},
    }
    table = gts[0].class_table
    if "bed" in table.classes and "nightstand" in table.classes:
        doc["relative_kl_bed_nightstand"] = list(
            relative_histogram_kl(preds, gts, "bed", "nightstand")
        )
    outputs = _Outputs()
    outputs.write(out_path, json.dumps(doc, indent=1))
    logger.info("evaluated %d scenes", len(preds))
    return outputs


# Click reserves exit code 2 for usage errors; the documented contract
# wants 1, so dispatch runs the group in non-standalone mode and maps
# every failure class explicitly.
def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (SceneParseError, SceneSchemaError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except NumericalError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
