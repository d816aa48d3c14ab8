"""Operator-facing command line: train, eval, gradcheck, ablate,
bench-neighbors, generate-data, and predict.

Configuration comes from a JSON file with four top-level sections
(model, train, data, out_dir); repeated `--set dotted.key=value`
overrides win over the file, which wins over defaults. Every run echoes
its merged config and the tool version into the output directory before
doing any work, and all emitted artifacts are plain CSV.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from . import tensor as T
from .data import (
    DataConfig,
    Normalizer,
    Sample,
    fit_normalizer,
    generate_dataset,
    load_csv_pointcloud,
    make_sample,
    write_csv_pointcloud,
    write_manifest,
)
from .context import GeometrySample, LocalStream
from .errors import ConfigError, GaleError
from .harness import neighbor_bench, tiny_model_gradcheck
from .model import ModelConfig, checkpoint_load, init_model, model_from_checkpoint
from .training import TrainConfig, evaluate_model, fit, predict_sample

GRADCHECK_TOLERANCE = 1e-4


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    out_dir: str = "runs/latest"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": _data_to_dict(self.data),
            "out_dir": self.out_dir,
        }


def _data_to_dict(cfg: DataConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["kinds"] = list(cfg.kinds)
    d["radius_range"] = list(cfg.radius_range)
    d["aspect_range"] = list(cfg.aspect_range)
    d["speed_range"] = list(cfg.speed_range)
    d["fractions"] = list(cfg.fractions)
    return d


_SECTION_FIELDS = {
    "model": {f.name for f in dataclasses.fields(ModelConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "data": {f.name for f in dataclasses.fields(DataConfig)},
}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_keys(section: str, entries: dict) -> None:
    for key, value in entries.items():
        if key not in _SECTION_FIELDS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = getattr(_default_section(section), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
        elif isinstance(default, int) and not isinstance(value, bool):
            if not isinstance(value, (int, float)) or int(value) != value:
                raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{section}.{key} expects a string, got {value!r}")


def _default_section(section: str):
    return {"model": ModelConfig(), "train": TrainConfig(), "data": DataConfig()}[section]


def parse_config(path=None, overrides=()) -> RunConfig:
    """Defaults < file < overrides; unknown keys are rejected by name."""
    merged = {"model": {}, "train": {}, "data": {}, "out_dir": "runs/latest"}
    if path:
        with open(path) as f:
            text = f.read().strip()
        loaded = json.loads(text) if text else {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key == "out_dir":
                merged["out_dir"] = value
            elif key in merged:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                merged[key].update(value)
            else:
                raise ConfigError(f"unknown config key {key}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = _parse_value(raw)
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] == "out_dir":
            merged["out_dir"] = str(raw)
        elif len(parts) == 2 and parts[0] in ("model", "train", "data"):
            merged[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unknown config key {dotted}")
    for section in ("model", "train", "data"):
        _check_keys(section, merged[section])
    try:
        model = ModelConfig(**merged["model"])
        train = TrainConfig(**merged["train"])
        data = DataConfig(**merged["data"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    data.kinds = tuple(data.kinds)
    data.radius_range = tuple(data.radius_range)
    data.aspect_range = tuple(data.aspect_range)
    data.speed_range = tuple(data.speed_range)
    data.fractions = tuple(data.fractions)
    return RunConfig(model=model, train=train, data=data, out_dir=str(merged["out_dir"]))


def echo_config(cfg: RunConfig) -> None:
    """Write the merged config and tool version before producing results."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(cfg.out_dir, "version.txt"), "w") as f:
        f.write(__version__ + "\n")


def _prepare_samples(cfg: RunConfig, model_cfg: ModelConfig, normalizer=None):
    dataset = generate_dataset(cfg.data)
    train_cases = dataset.by_split("train")
    if normalizer is None:
        normalizer = fit_normalizer(train_cases)
    splits = {
        tag: [make_sample(c, model_cfg, normalizer) for c in dataset.by_split(tag)]
        for tag in ("train", "val", "test")
    }
    return dataset, splits, normalizer


def _set_precision(train_cfg: TrainConfig) -> None:
    T.set_default_dtype(np.float64 if train_cfg.precision == "float64" else np.float32)


def cmd_train(cfg: RunConfig) -> int:
    echo_config(cfg)
    _set_precision(cfg.train)
    _, splits, normalizer = _prepare_samples(cfg, cfg.model)
    model = init_model(cfg.model)
    print(f"model parameters: {model.param_count()}")
    result = fit(splits, model, cfg.train, normalizer, cfg.out_dir)
    print(f"best val loss {result.best_val_loss:.6g}; checkpoint at {result.best_checkpoint}")
    print(f"training log at {result.log_path}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint_path: str) -> int:
    echo_config(cfg)
    ckpt = checkpoint_load(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    normalizer = Normalizer.from_dict(ckpt.normalizer) if ckpt.normalizer else None
    if normalizer is None:
        raise ConfigError("checkpoint holds no normalizer; cannot evaluate")
    _, splits, _ = _prepare_samples(cfg, ckpt.config, normalizer)
    report = evaluate_model(model, splits["test"], normalizer)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    trend_path = os.path.join(cfg.out_dir, "trend_j.csv")
    report.write_csv(metrics_path)
    report.trend.write_csv(trend_path)
    for name in sorted(report.field_metrics):
        rel = report.field_metrics[name]["relative_l1"]
        rel_str = f"{rel:.4f}" if rel is not None else "undefined"
        print(f"{name}: relative_l1={rel_str} mae={report.field_metrics[name]['mae']:.6g}")
    for name in sorted(report.r2):
        val = report.r2[name]
        print(f"r2[{name}]: {val if val is None else f'{val:.4f}'}")
    print(f"wrote {metrics_path} and {trend_path}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    echo_config(cfg)
    err = tiny_model_gradcheck()
    print(f"gradcheck max relative error: {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if err < GRADCHECK_TOLERANCE else 1


def _apply_axis(cfg: RunConfig, key: str, raw_value: str) -> RunConfig:
    base = cfg.to_dict()
    if key == "schedule":
        if not raw_value.endswith("scale"):
            raise ConfigError(f"schedule axis values look like '2scale', got {raw_value!r}")
        n_scales = int(raw_value[: -len("scale")])
        full = base["model"]["schedule"]
        if not (1 <= n_scales <= len(full)):
            raise ConfigError(f"cannot keep {n_scales} of {len(full)} schedule scales")
        base["model"]["schedule"] = full[:n_scales]
    elif key.startswith("model."):
        field_name = key.split(".", 1)[1]
        if field_name not in _SECTION_FIELDS["model"]:
            raise ConfigError(f"unknown config key {key}")
        base["model"][field_name] = _parse_value(raw_value)
    elif key.startswith("train."):
        field_name = key.split(".", 1)[1]
        if field_name not in _SECTION_FIELDS["train"]:
            raise ConfigError(f"unknown config key {key}")
        base["train"][field_name] = _parse_value(raw_value)
    else:
        raise ConfigError(f"ablation axis must be schedule, model.*, or train.*, got {key!r}")
    return RunConfig(
        model=ModelConfig(**base["model"]),
        train=TrainConfig(**base["train"]),
        data=cfg.data,
        out_dir=cfg.out_dir,
    )


def cmd_ablate(cfg: RunConfig, axis: str) -> int:
    """Train/eval the cross-product of one axis over a shared dataset."""
    if "=" not in axis:
        raise ConfigError(f"--axis must be key=v1,v2,... got {axis!r}")
    echo_config(cfg)
    key, raw_values = axis.split("=", 1)
    values = [v.strip() for v in raw_values.split(",") if v.strip()]
    if not values:
        raise ConfigError("ablation axis needs at least one value")
    rows = []
    for value in values:
        variant = _apply_axis(cfg, key, value)
        variant.out_dir = os.path.join(cfg.out_dir, f"{key.replace('.', '_')}_{value}")
        os.makedirs(variant.out_dir, exist_ok=True)
        echo_config(variant)
        _set_precision(variant.train)
        _, splits, normalizer = _prepare_samples(variant, variant.model)
        model = init_model(variant.model)
        result = fit(splits, model, variant.train, normalizer, variant.out_dir)
        report = evaluate_model(model, splits["test"], normalizer)
        rows.append(
            {
                "axis": key,
                "value": value,
                "param_count": model.param_count(),
                "train_loss": result.log_rows[-1]["train_loss"],
                "surface_cp_rel_l1": report.field_metrics["surface_cp"]["relative_l1"],
                "volume_cp_rel_l1": report.field_metrics["volume_cp"]["relative_l1"],
                "volume_velocity_rel_l1": report.field_metrics["volume_velocity"]["relative_l1"],
                "j_r2": report.r2["j"],
            }
        )
        print(f"{key}={value}: params={rows[-1]['param_count']} train_loss={rows[-1]['train_loss']:.4g}")
    summary_path = os.path.join(cfg.out_dir, "ablation_summary.csv")
    with open(summary_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {summary_path}")
    return 0


def cmd_bench_neighbors(cfg: RunConfig, n_points: int, n_queries: int) -> int:
    echo_config(cfg)
    result = neighbor_bench(n_points=n_points, n_queries=n_queries)
    status = "PASS" if result["passed"] else "FAIL"
    print(
        f"oracle equivalence: {status}; {result['queries_per_sec']:.0f} queries/s "
        f"({result['n_points']} points, radii {result['radii']}, caps {result['caps']})"
    )
    with open(os.path.join(cfg.out_dir, "bench_neighbors.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_points", "n_queries", "queries_per_sec", "passed"])
        writer.writerow([result["n_points"], result["n_queries"], repr(result["queries_per_sec"]), result["passed"]])
    return 0 if result["passed"] else 1


def cmd_generate_data(cfg: RunConfig) -> int:
    echo_config(cfg)
    dataset = generate_dataset(cfg.data)
    case_dir = os.path.join(cfg.out_dir, "cases")
    os.makedirs(case_dir, exist_ok=True)
    for case in dataset.cases:
        write_csv_pointcloud(
            os.path.join(case_dir, f"{case.case_id}_surface.csv"),
            case.surface_positions,
            {
                "nx": case.surface_normals[:, 0],
                "ny": case.surface_normals[:, 1],
                "nz": case.surface_normals[:, 2],
                "area": case.surface_area,
                "cp": case.surface_cp,
            },
        )
        write_csv_pointcloud(
            os.path.join(case_dir, f"{case.case_id}_volume.csv"),
            case.volume_positions,
            {
                "cp": case.volume_cp,
                "ux": case.volume_velocity[:, 0],
                "uy": case.volume_velocity[:, 1],
                "uz": case.volume_velocity[:, 2],
            },
        )
    manifest = os.path.join(cfg.out_dir, "manifest.tsv")
    write_manifest(manifest, dataset)
    print(f"wrote {len(dataset.cases)} cases and {manifest}")
    return 0


def cmd_predict(cfg: RunConfig, checkpoint_path, surface_csv, volume_csv, speed: float, onset) -> int:
    echo_config(cfg)
    ckpt = checkpoint_load(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    normalizer = Normalizer.from_dict(ckpt.normalizer) if ckpt.normalizer else None
    if normalizer is None:
        raise ConfigError("checkpoint holds no normalizer; cannot predict")
    surf_stream, quad_cols, _ = load_csv_pointcloud(
        surface_csv, feature_columns=("nx", "ny", "nz", "area"), name="surface"
    )
    vol_stream, _, _ = load_csv_pointcloud(volume_csv, name="volume")
    surf_feat = normalizer.apply("surface.features", surf_stream.features)
    vol_feat = normalizer.apply("volume.features", np.zeros((vol_stream.n_tokens, 4)))
    streams = {
        "surface": LocalStream("surface", surf_stream.positions, surf_feat),
        "volume": LocalStream("volume", vol_stream.positions, vol_feat),
    }
    rng = np.random.default_rng(ckpt.config.seed)
    n_geom = min(ckpt.config.geom_token_cap, surf_stream.n_tokens)
    geom_idx = np.sort(rng.choice(surf_stream.n_tokens, size=n_geom, replace=False))
    onset = np.asarray(onset, dtype=np.float64)
    onset /= np.linalg.norm(onset)
    geom = GeometrySample(
        points=surf_stream.positions[geom_idx],
        features=surf_stream.features[geom_idx, 0:3],
        params=normalizer.apply("params", np.concatenate([[speed], onset])),
    )
    sample = Sample(
        case_id="predict",
        streams=streams,
        geom=geom,
        targets={},
        raw_targets={},
        quadrature=None,
        j_true=0.0,
        speed=speed,
        body_scale=1.0,
    )
    preds = predict_sample(model, sample, normalizer)
    for name, stream in streams.items():
        out_path = os.path.join(cfg.out_dir, f"predictions_{name}.csv")
        cols = {f"pred_{i}": preds[name][:, i] for i in range(preds[name].shape[1])}
        write_csv_pointcloud(out_path, stream.positions, cols)
        print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gale", description="Geometry-aware physics-attention surrogate")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p_train = sub.add_parser("train", help="fit a model; writes log + best checkpoint")
    common(p_train)
    p_eval = sub.add_parser("eval", help="metric + trend CSVs for a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the tiny frozen model")
    common(p_grad)
    p_abl = sub.add_parser("ablate", help="run one config axis and emit a summary CSV")
    common(p_abl)
    p_abl.add_argument("--axis", required=True, metavar="KEY=V1,V2,...")
    p_bench = sub.add_parser("bench-neighbors", help="neighbor search throughput + oracle check")
    common(p_bench)
    p_bench.add_argument("--points", type=int, default=1000)
    p_bench.add_argument("--queries", type=int, default=100)
    p_gen = sub.add_parser("generate-data", help="write dataset manifest and case files")
    common(p_gen)
    p_pred = sub.add_parser("predict", help="per-point predictions for input clouds")
    common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--surface", required=True, help="surface CSV with nx,ny,nz,area")
    p_pred.add_argument("--volume", required=True, help="volume CSV with x,y,z")
    p_pred.add_argument("--speed", type=float, default=1.0)
    p_pred.add_argument("--onset", type=float, nargs=3, default=(1.0, 0.0, 0.0))
    return parser


def _apply_thread_env() -> None:
    n = os.environ.get("GALE_NUM_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))
    except Exception:
        pass


def run_command(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis)
        if args.command == "bench-neighbors":
            return cmd_bench_neighbors(cfg, args.points, args.queries)
        if args.command == "generate-data":
            return cmd_generate_data(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.surface, args.volume, args.speed, args.onset)
    except GaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command}")


def main() -> None:
    sys.exit(run_command())
