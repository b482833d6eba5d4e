"""
Command-line interface.

    metapu make-dataset --out data/demo --builtin torus sphere --patches 4 --n-max 256
    metapu train --manifest data/demo --out runs/tiny.mpu --steps 200
    metapu upsample --checkpoint runs/tiny.mpu --input in.xyz --scale 2.5 --output out.xyz
    metapu eval --checkpoint runs/tiny.mpu --manifest data/demo --scales 2,2.5,4 --report report.json
    metapu analyze-rf --checkpoint runs/tiny.mpu --input in.xyz --scales 2,4 --out rf/

Settings resolve as defaults -> profile -> ``--config`` JSON -> flags, and
the resolved view is echoed into every output. Exit codes: 0 success,
2 usage/config error, 3 data error, 4 numeric failure.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import checkpoint_hash, load_checkpoint
from .config import Config, ConfigRecord
from .data import DataConfig, make_pair, pair_sizes, read_manifest, resolve_meshes, build_dataset
from .errors import ConfigError, DataFormatError, MetaPUError, NumericError
from .fileio import list_meshes, read_xyz, write_xyz
from .geom import denormalize, normalize_unit_sphere
from .metrics import MetricConfig, MetricReport, aggregate, evaluate_shape
from .net import (
    NetConfig,
    check_scale,
    closest_output_index,
    dense_then_downsample,
    input_gradient_magnitudes,
    metapu_dense_forward,
    metapu_forward,
    output_count,
    replicate_upsample,
    upsample_cloud,
)
from .plots import write_metric_curves, write_receptive_field
from .train import TrainConfig, train_loop, write_trace

logger = logging.getLogger(__name__)

BASELINES = ("replicate", "dense_random", "dense_farthest")
RF_THRESHOLD = 0.01


# ============================================================================
# Run configuration
# ============================================================================

@dataclass
class RunConfig(ConfigRecord):
    """Fully resolved settings of one command."""

    profile: str = Config.PROFILE
    seed: int = Config.DEFAULT_SEED
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        for name, cls in (("net", NetConfig), ("train", TrainConfig), ("data", DataConfig),
                          ("metrics", MetricConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls.from_dict(getattr(self, name)))
        # the training scale range always follows the network
        if self.train.r_max != self.net.r_max:
            self.train = self.train.replace(r_max=self.net.r_max)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path: Optional[str]) -> dict:
    """
    Read a JSON config with optional sections net, loss, train, data, metrics.

    The ``loss`` section is folded into ``train.loss``.
    """
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - {"profile", "seed", "net", "loss", "train", "data", "metrics"})
    if unknown:
        raise ConfigError(f"config file {path}: unknown sections {unknown}")
    if "loss" in doc:
        doc = dict(doc)
        doc["train"] = _merge(doc.get("train", {}), {"loss": doc.pop("loss")})
    return doc


def resolve_run_config(profile: Optional[str] = None, config_path: Optional[str] = None,
                       overrides: Optional[dict] = None) -> RunConfig:
    """defaults -> profile -> config file -> flag overrides."""
    file_doc = load_config_file(config_path)
    profile = profile or file_doc.get("profile") or Config.PROFILE
    doc = {"profile": profile, "net": Config.profile_overrides(profile)}
    doc = _merge(doc, file_doc)
    doc = _merge(doc, overrides or {})
    doc["profile"] = profile
    if "r_max" in doc.get("net", {}):
        doc.setdefault("train", {})["r_max"] = doc["net"]["r_max"]
    if "seed" in doc:
        doc.setdefault("train", {}).setdefault("seed", doc["seed"])
        doc.setdefault("metrics", {}).setdefault("seed", doc["seed"])
    return RunConfig.from_dict(doc)


def _flag_overrides(args, mapping: Dict[str, tuple]) -> dict:
    """Nested override dict from the argparse attributes that were given."""
    out: dict = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if section is None:
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    return out


# ============================================================================
# Logging and provenance
# ============================================================================

class KeyValueFormatter(logging.Formatter):
    """``ts=... level=... logger=... msg="..."`` lines."""

    def format(self, record: logging.LogRecord) -> str:
        line = (f"ts={self.formatTime(record, '%Y-%m-%dT%H:%M:%S')} level={record.levelname} "
                f"logger={record.name} msg={json.dumps(record.getMessage())}")
        if record.exc_info:
            line += f" exc={json.dumps(self.formatException(record.exc_info))}"
        return line


def configure_logging(level: Optional[str] = None):
    """One line-buffered stdout handler on the root logger."""
    name = (level or Config.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"Unknown log level: {level}")
    if hasattr(sys.stdout, "reconfigure"):
        try:
            sys.stdout.reconfigure(line_buffering=True)
        except (ValueError, OSError):
            pass
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(KeyValueFormatter())
    root = logging.getLogger()
    for old in list(root.handlers):
        if isinstance(old.formatter, KeyValueFormatter):
            root.removeHandler(old)
    root.addHandler(handler)
    root.setLevel(name)


def provenance_path(path: Path) -> Path:
    return path.with_name(path.name + ".provenance.json")


def write_provenance(path: Path, command: str, run: RunConfig, extra: Optional[dict] = None) -> Path:
    """Sidecar JSON next to an output file: command, version, seed and resolved config."""
    doc = {
        "command": command,
        "version": __version__,
        "seed": run.seed,
        "config": run.to_dict(),
    }
    doc.update(extra or {})
    side = provenance_path(Path(path))
    side.parent.mkdir(parents=True, exist_ok=True)
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


def parse_scales(text: str) -> List[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"scales must be a comma-separated list of numbers, got {text!r}") from e
    if not scales:
        raise ConfigError("no scales given")
    return scales


def data_path(path: str) -> Path:
    """A relative path that does not exist here is looked up under ``Config.DATA_DIR``."""
    p = Path(path)
    if not p.is_absolute() and not p.exists() and (Config.DATA_DIR / p).exists():
        return Config.DATA_DIR / p
    return p


def _run_from_checkpoint(ckpt, args) -> RunConfig:
    """Run config for commands that use a trained model: the checkpoint's network wins."""
    run = resolve_run_config(args.profile, args.config, _flag_overrides(args, {"seed": (None, "seed")}))
    return run.replace(net=ckpt.net_config.to_dict(), train=run.train.replace(r_max=ckpt.net_config.r_max).to_dict())


# ============================================================================
# Commands
# ============================================================================

def cmd_make_dataset(args) -> int:
    run = resolve_run_config(args.profile, args.config, _flag_overrides(args, {
        "seed": (None, "seed"),
        "patches": ("data", "patches_per_model"),
        "n_max": ("data", "n_max"),
        "resolution": ("data", "builtin_resolution"),
    }))
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force)")

    mesh_paths = list_meshes(data_path(args.meshes)) if args.meshes else []
    builtin = args.builtin or []
    meshes = resolve_meshes(builtin, mesh_paths, run.data.builtin_resolution)
    manifest = build_dataset(meshes, out_dir, run.data, seed=run.seed)
    write_provenance(out_dir / "manifest.json", "make-dataset", run,
                     {"builtin": builtin, "meshes": [str(p) for p in mesh_paths]})
    logger.info("dataset written to %s: %d train, %d test records", out_dir,
                len(manifest.split("train")), len(manifest.split("test")))
    return Config.EXIT_OK


def cmd_train(args) -> int:
    run = resolve_run_config(args.profile, args.config, _flag_overrides(args, {
        "seed": (None, "seed"),
        "steps": ("train", "steps"),
        "batch_size": ("train", "batch_size"),
        "r_max": ("net", "r_max"),
        "checkpoint_every": ("train", "checkpoint_every"),
    }))
    manifest = read_manifest(data_path(args.manifest))
    data_config = manifest.data_config()
    # the dataset was cut with its own data settings; echo those
    run = run.replace(data=data_config.to_dict())
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        run = run.replace(net=resume.net_config.to_dict(),
                          train=run.train.replace(r_max=resume.net_config.r_max).to_dict())

    def strict_check(row: dict):
        if args.strict and row["nonconverged"]:
            raise NumericError(f"sinkhorn did not converge at step {row['step']} (--strict)")

    result = train_loop(manifest, run.net, run.train, data_config=data_config, resume=resume,
                        checkpoint_path=out, run_config=run.to_dict(), on_step=strict_check)
    write_trace(trace_path, result.trace, append=resume is not None)
    write_provenance(out, "train", run, {
        "manifest": str(manifest.root),
        "trace": str(trace_path),
        "resumed_from": str(args.resume) if args.resume else None,
        "checkpoint_sha256": checkpoint_hash(out),
    })
    logger.info("training finished at step %d; checkpoint %s", result.checkpoint.step, out)
    return Config.EXIT_OK


def cmd_upsample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(ckpt, args)
    scale = check_scale(args.scale, ckpt.net_config.r_max)
    if args.meta_scale is not None:
        check_scale(args.meta_scale, ckpt.net_config.r_max)

    raw = read_xyz(args.input)
    cloud, centroid, radius = normalize_unit_sphere(raw)
    out = upsample_cloud(cloud, scale, ckpt.params, ckpt.net_config, meta_scale=args.meta_scale)
    result = denormalize(out, centroid, radius)
    write_xyz(args.output, result)
    write_provenance(Path(args.output), "upsample", run, {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": checkpoint_hash(args.checkpoint),
        "input": str(args.input),
        "scale": scale,
        "meta_scale": args.meta_scale,
    })
    logger.info("upsampled %d -> %d points (R=%s) to %s", len(raw), len(result), scale, args.output)
    return Config.EXIT_OK


def _baseline(name: str, x: np.ndarray, scale: float, ckpt, seed: int) -> np.ndarray:
    if name == "replicate":
        return replicate_upsample(x, scale, ckpt.net_config.r_max)
    method = "random" if name == "dense_random" else "farthest"
    return dense_then_downsample(x, scale, ckpt.params, ckpt.net_config, method=method,
                                 rng=np.random.default_rng(seed))


def evaluate_checkpoint(ckpt, manifest, scales: Sequence[float], run: RunConfig,
                        input_size: Optional[int] = None, mesh_metrics: bool = False,
                        mesh_dir: Optional[Path] = None, baselines: Sequence[str] = (),
                        timing: bool = False) -> List[MetricReport]:
    """Metric reports for every (scale, test record, method)."""
    records = manifest.split("test")
    if not records:
        raise DataFormatError("manifest has no test records", str(manifest.root))
    n_max = manifest.data_config().n_max
    reports = []
    for scale in scales:
        check_scale(scale, ckpt.net_config.r_max)
        for index, record in enumerate(records):
            dense = manifest.load_cloud(record).points
            if input_size is not None:
                n = input_size
            elif record.kind == "model":
                n = Config.test_input_size(scale)
            else:
                n, _ = pair_sizes(scale, n_max)
            if output_count(scale, n) > len(dense):
                fitted = int(len(dense) // scale)
                logger.warning("%s holds %d points; input size %d lowered to %d at R=%s",
                               record.record_id, len(dense), n, fitted, scale)
                n = fitted
            rng = np.random.default_rng([run.seed, index, int(round(scale * 1000))])
            pair = make_pair(dense, scale, n, rng, sigma=manifest.data_config().density_sigma,
                             source_id=record.record_id)
            mesh = None
            if mesh_metrics and record.kind == "model":
                mesh = manifest.load_mesh(record, mesh_dir)

            started = time.perf_counter()
            pred = metapu_forward(pair.input.points, scale, ckpt.params, ckpt.net_config).data
            seconds = time.perf_counter() - started if timing else None
            outputs = [("model", pred, seconds)]
            for name in baselines:
                outputs.append((name, _baseline(name, pair.input.points, scale, ckpt, run.seed), None))

            for method, points, secs in outputs:
                report = evaluate_shape(points, pair.target.points, record.record_id, scale, mesh=mesh,
                                        cfg=run.metrics, seconds=secs)
                report.method = method
                reports.append(report)
        logger.info("evaluated R=%s on %d test records", scale, len(records))
    return reports


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(ckpt, args)
    scales = parse_scales(args.scales)
    manifest = read_manifest(data_path(args.manifest))
    run = run.replace(data=manifest.data_config().to_dict())
    baselines = list(BASELINES) if args.baselines else []

    reports = evaluate_checkpoint(ckpt, manifest, scales, run, input_size=args.input_size,
                                  mesh_metrics=args.mesh_metrics or args.mesh_dir is not None,
                                  mesh_dir=data_path(args.mesh_dir) if args.mesh_dir else None,
                                  baselines=baselines, timing=args.timing)
    table = aggregate(reports)
    results = []
    for scale in scales:
        for method in ["model"] + baselines:
            agg = table[(table["scale"] == scale) & (table["method"] == method)]
            results.append({
                "scale": scale,
                "method": method,
                "aggregate": json.loads(agg.drop(columns=["scale", "method"]).iloc[0].to_json())
                if len(agg) else {},
                "shapes": [r.to_json_dict() for r in reports if r.scale == scale and r.method == method],
            })
    flags = sorted({flag for r in reports for flag in r.flags})
    doc = {
        "command": "eval",
        "version": __version__,
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": checkpoint_hash(args.checkpoint),
        "manifest": str(manifest.root),
        "config": run.to_dict(),
        "scales": scales,
        "results": results,
        "flags": flags,
    }
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.plot:
        write_metric_curves(args.plot, table)
    logger.info("report written to %s (%d shape evaluations)", report_path, len(reports))
    if flags and args.strict:
        raise NumericError(f"evaluation flagged {flags} (--strict)")
    return Config.EXIT_OK


def label_receptive_field(points: np.ndarray, mags: np.ndarray, centroid: int,
                          threshold: float = RF_THRESHOLD) -> pd.DataFrame:
    """x, y, z, gradient and label (centroid / in_field / out_of_field) per input point."""
    peak = mags.max()
    inside = mags > threshold * peak if peak > 0 else np.zeros(len(mags), dtype=bool)
    labels = np.where(inside, "in_field", "out_of_field").astype(object)
    labels[centroid] = "centroid"
    return pd.DataFrame({"x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
                         "gradient": mags, "label": labels})


def rf_csv_name(scale: float, centroid: int) -> str:
    return f"rf_R{scale:g}_p{centroid}.csv"


def cmd_analyze_rf(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _run_from_checkpoint(ckpt, args)
    scales = parse_scales(args.scales)
    cloud, _, _ = normalize_unit_sphere(read_xyz(args.input))
    x = cloud.points
    rng = np.random.default_rng(run.seed)
    centroids = rng.choice(len(x), size=min(args.centroids, len(x)), replace=False)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = {"scales": [], "threshold": args.threshold, "centroids": centroids.tolist()}
    labelled = {}
    for scale in scales:
        check_scale(scale, ckpt.net_config.r_max)
        dense = metapu_dense_forward(x, scale, ckpt.params, ckpt.net_config).data
        sizes, files = [], []
        for j, c in enumerate(centroids):
            index = closest_output_index(dense, x[c])
            mags = input_gradient_magnitudes(x, scale, ckpt.params, ckpt.net_config, index)
            df = label_receptive_field(x, mags, int(c), args.threshold)
            sizes.append(int((df["label"] != "out_of_field").sum()))
            name = rf_csv_name(scale, int(c))
            df.to_csv(out_dir / name, index=False)
            files.append(name)
            if j == 0:
                labelled[scale] = df
        summary["scales"].append({"scale": scale, "field_sizes": sizes, "files": files,
                                  "mean_field_size": float(np.mean(sizes))})
        logger.info("R=%s: receptive field #P=%s", scale, sizes)

    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_provenance(summary_path, "analyze-rf", run, {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": checkpoint_hash(args.checkpoint),
        "input": str(args.input),
    })
    if args.html:
        write_receptive_field(args.html, labelled)
    return Config.EXIT_OK


# ============================================================================
# Parser and entry point
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections net, loss, train, data, metrics)")
    common.add_argument("--profile", choices=sorted(Config.PROFILES), default=None,
                        help=f"network profile (default: {Config.PROFILE})")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--log-level", default=None, help=f"log level (default: {Config.LOG_LEVEL})")
    common.add_argument("--strict", action="store_true",
                        help="treat Sinkhorn non-convergence and metric flags as numeric failures (exit 4)")

    parser = argparse.ArgumentParser(prog="metapu", description="Arbitrary-scale point cloud upsampling")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="build training/test patches from meshes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--builtin", nargs="+", default=None, help="builtin shapes: sphere torus relief cylinder")
    p.add_argument("--meshes", default=None, help="directory of OFF/PLY meshes")
    p.add_argument("--patches", type=int, default=None, help=f"patches per model (default {Config.PATCHES_PER_MODEL})")
    p.add_argument("--n-max", dest="n_max", type=int, default=None, help=f"points per target (default {Config.N_MAX})")
    p.add_argument("--resolution", type=int, default=None, help="builtin mesh resolution")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset manifest")
    p.add_argument("--manifest", required=True, help="manifest.json or dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", default=None, help="loss-trace CSV (default: <out>.trace.csv)")
    p.add_argument("--steps", type=int, default=None, help="number of optimizer steps")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--r-max", dest="r_max", type=int, default=None, help="largest training scale")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", parents=[common], help="upsample an XYZ cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=float, required=True, help="scale factor R (1 < R <= r_max)")
    p.add_argument("--meta-scale", dest="meta_scale", type=float, default=None,
                   help="scale fed to the meta block instead of R")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", default="2,2.5,4", help="comma-separated scale factors")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--mesh-dir", dest="mesh_dir", default=None, help="directory holding the test meshes")
    p.add_argument("--mesh-metrics", dest="mesh_metrics", action="store_true",
                   help="compute NUC and deviation (needs meshes)")
    p.add_argument("--input-size", dest="input_size", type=int, default=None,
                   help="input points per test shape (default: scale-dependent)")
    p.add_argument("--baselines", action="store_true", help="also evaluate the naive baselines")
    p.add_argument("--timing", action="store_true", help="record forward seconds per shape")
    p.add_argument("--plot", default=None, help="HTML figure of metrics against scale")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-rf", parents=[common], help="receptive-field analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--scales", default="2,4")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--centroids", type=int, default=1,
                   help="number of sampled input points; one labelled CSV each per scale")
    p.add_argument("--threshold", type=float, default=RF_THRESHOLD, help="fraction of the maximum gradient")
    p.add_argument("--html", default=None, help="HTML figure of the first centroid's labelled cloud per scale")
    p.set_defaults(func=cmd_analyze_rf)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else Config.EXIT_OK
    try:
        configure_logging(args.log_level)
        return args.func(args)
    except ConfigError as e:
        logger.error("%s", e)
        return Config.EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as e:
        logger.error("%s", e)
        return Config.EXIT_DATA
    except NumericError as e:
        logger.error("%s", e)
        return Config.EXIT_NUMERIC
    except MetaPUError as e:
        logger.error("%s", e)
        return Config.EXIT_USAGE
