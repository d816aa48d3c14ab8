"""Loss computation, first-order optimizers, and the training loop.

One sample (a whole geometry) per optimizer step. Momentum SGD and an
adaptive per-parameter second-moment update are available; gradients are
clipped by global norm. Per-epoch losses and periodic evaluation metrics
stream to a CSV log; the best-by-validation checkpoint is retained.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .context import build_neighbor_cache
from .data import Sample
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericError,
    TrainingError,
    UndefinedMetricError,
)
from .metrics import (
    MetricReport,
    design_trend_table,
    force_coefficients,
    mae,
    r_squared,
    relative_l1,
    surface_force,
)
from .model import Checkpoint, GaleModel, checkpoint_save, model_forward
from .tensor import ParamStore, Tensor


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 1
    lr: float = 2e-3
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    loss: str = "mse"  # mse | relative_l1
    stream_weights: dict = field(default_factory=lambda: {"surface": 1.0, "volume": 1.0})
    grad_clip: float = 1.0
    lr_schedule: str = "constant"  # constant | cosine
    eval_interval: int = 5
    seed: int = 0
    precision: str = "float32"  # float32 | float64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "relative_l1"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if any(w < 0 for w in self.stream_weights.values()) or not any(
            w > 0 for w in self.stream_weights.values()
        ):
            raise ConfigError("stream loss weights must be >= 0 and not all zero")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "loss": self.loss,
            "stream_weights": dict(self.stream_weights),
            "grad_clip": self.grad_clip,
            "lr_schedule": self.lr_schedule,
            "eval_interval": self.eval_interval,
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def compute_loss(preds: dict, targets: dict, config: TrainConfig) -> T.Tensor:
    """Weighted sum over streams of the configured per-stream loss."""
    total = None
    for name, pred in preds.items():
        weight = config.stream_weights.get(name, 1.0)
        target = Tensor(np.asarray(targets[name]), dtype=pred.dtype)
        if pred.shape != target.shape:
            raise TrainingError(f"stream {name!r}: pred {pred.shape} vs target {target.shape}")
        diff = T.sub(pred, target)
        if config.loss == "mse":
            term = T.sum_all(T.mul(diff, diff)) * (1.0 / target.data.size)
        else:
            denom = float(np.abs(target.data).sum())
            if denom == 0:
                raise UndefinedMetricError("relative_l1 loss needs nonzero targets")
            term = T.sum_all(T.abs_(diff)) * (1.0 / denom)
        term = term * weight
        total = term if total is None else T.add(total, term)
    return total


def _global_grad_norm(params: ParamStore) -> float:
    sq = 0.0
    for _, t in params.items():
        if t.grad is not None:
            sq += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(sq)


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    norm = _global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= scale
    return norm


def init_optimizer_state(config: TrainConfig) -> dict:
    if config.optimizer == "sgd":
        return {"kind": "sgd", "velocity": {}}
    return {"kind": "adam", "m": {}, "v": {}, "t": 0}


def optimizer_step(params: ParamStore, state: dict, config: TrainConfig) -> None:
    """Apply one in-place update; every parameter must carry a gradient."""
    for name, t in params.items():
        if t.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    lr = config.lr * state.get("lr_scale", 1.0)
    if state["kind"] == "sgd":
        vel = state["velocity"]
        for name, t in params.items():
            g = t.grad
            if config.weight_decay:
                g = g + config.weight_decay * t.data
            v = vel.get(name)
            v = g.copy() if v is None else config.momentum * v + g
            vel[name] = v
            t.data = t.data - lr * v
    else:
        state["t"] += 1
        step = state["t"]
        b1, b2 = config.momentum, config.beta2
        for name, t in params.items():
            g = t.grad
            if config.weight_decay:
                g = g + config.weight_decay * t.data
            m = state["m"].get(name, np.zeros_like(t.data))
            v = state["v"].get(name, np.zeros_like(t.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            state["m"][name], state["v"][name] = m, v
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict_sample(model: GaleModel, sample: Sample, normalizer, cache=None) -> dict:
    """Raw-unit predictions per stream for one sample."""
    with T.no_grad():
        preds = model_forward(model, sample.streams, sample.geom, neighbor_cache=cache)
    out = {}
    for name, tensor in preds.items():
        out[name] = normalizer.invert(f"{name}.targets", tensor.data.astype(np.float64))
    return out


def evaluate_model(model: GaleModel, samples: list, normalizer, caches=None) -> MetricReport:
    """Field errors, forces, integral quantities, and the design trend."""
    report = MetricReport()
    surf_cp_t, surf_cp_p = [], []
    vol_cp_t, vol_cp_p = [], []
    vol_vel_t, vol_vel_p = [], []
    shear_t, shear_p = [], []
    j_true, j_pred = [], []
    cd_t, cd_p, cl_t, cl_p = [], [], [], []
    trend_cases = []
    for i, sample in enumerate(samples):
        cache = caches[i] if caches is not None else None
        pred = predict_sample(model, sample, normalizer, cache)
        true_s, true_v = sample.raw_targets["surface"], sample.raw_targets["volume"]
        surf_cp_t.append(true_s[:, 0])
        surf_cp_p.append(pred["surface"][:, 0])
        shear_t.append(true_s[:, 1:4])
        shear_p.append(pred["surface"][:, 1:4])
        vol_cp_t.append(true_v[:, 0])
        vol_cp_p.append(pred["volume"][:, 0])
        vol_vel_t.append(true_v[:, 1:4])
        vol_vel_p.append(pred["volume"][:, 1:4])
        quad = sample.quadrature
        f_true = surface_force(quad)
        f_pred = surface_force(quad, pressure=pred["surface"][:, 0], shear=pred["surface"][:, 1:4])
        cdt, clt = force_coefficients(f_true)
        cdp, clp = force_coefficients(f_pred)
        cd_t.append(cdt), cd_p.append(cdp), cl_t.append(clt), cl_p.append(clp)
        jp = float((pred["surface"][:, 0] ** 2 * quad.area).sum())
        j_true.append(sample.j_true), j_pred.append(jp)
        trend_cases.append((sample.case_id, sample.j_true, jp))
        report.cases.append(
            {
                "case_id": sample.case_id,
                "j_true": sample.j_true,
                "j_pred": jp,
                "fx_true": f_true[0],
                "fy_true": f_true[1],
                "fz_true": f_true[2],
                "fx_pred": f_pred[0],
                "fy_pred": f_pred[1],
                "fz_pred": f_pred[2],
                "cd_true": cdt,
                "cd_pred": cdp,
                "cl_true": clt,
                "cl_pred": clp,
            }
        )
    report.field_metrics["surface_cp"] = {
        "relative_l1": relative_l1(surf_cp_t, surf_cp_p),
        "mae": mae(surf_cp_t, surf_cp_p),
    }
    report.field_metrics["volume_cp"] = {
        "relative_l1": relative_l1(vol_cp_t, vol_cp_p),
        "mae": mae(vol_cp_t, vol_cp_p),
    }
    report.field_metrics["volume_velocity"] = {
        "relative_l1": relative_l1(vol_vel_t, vol_vel_p),
        "mae": mae(vol_vel_t, vol_vel_p),
    }
    # Shear truth is identically zero here, so its relative L1 is undefined.
    try:
        shear_rel = relative_l1(shear_t, shear_p)
    except UndefinedMetricError:
        shear_rel = None
    report.field_metrics["surface_shear"] = {"relative_l1": shear_rel, "mae": mae(shear_t, shear_p)}
    for label, t_vals, p_vals in (("j", j_true, j_pred), ("cd", cd_t, cd_p), ("cl", cl_t, cl_p)):
        try:
            report.r2[label] = r_squared(t_vals, p_vals)
        except UndefinedMetricError:
            report.r2[label] = None
    report.trend = design_trend_table(trend_cases)
    return report


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    log_rows: list
    best_checkpoint: str
    best_val_loss: float
    log_path: str


LOG_COLUMNS = (
    "epoch",
    "step",
    "train_loss",
    "val_loss",
    "surface_cp_rel_l1",
    "volume_cp_rel_l1",
    "volume_velocity_rel_l1",
    "j_r2",
)


def _val_loss(model, samples, caches, config) -> float:
    total = 0.0
    with T.no_grad():
        for sample, cache in zip(samples, caches):
            preds = model_forward(model, sample.streams, sample.geom, neighbor_cache=cache)
            total += compute_loss(preds, sample.targets, config).item()
    return total / len(samples)


def fit(splits: dict, model: GaleModel, config: TrainConfig, normalizer, out_dir) -> FitResult:
    """Train on splits['train'], track best on splits['val'], log to CSV.

    Deterministic for a fixed seed and thread count. A non-finite loss
    aborts with DivergenceError; the best checkpoint so far survives.
    """
    train = splits.get("train", [])
    val = splits.get("val", [])
    if not train:
        raise DataError("training needs a non-empty train split")
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, "best.ckpt")
    log_path = os.path.join(out_dir, "train_log.csv")

    schedule = model.config.ball_schedule()
    stream_order = [s.name for s in model.config.streams]

    def cache_for(sample):
        ordered = [sample.streams[n] for n in stream_order]
        return build_neighbor_cache(ordered, sample.geom, schedule)

    train_caches = [cache_for(s) for s in train]
    val_caches = [cache_for(s) for s in val]

    opt_state = init_optimizer_state(config)
    rng = np.random.default_rng(config.seed)
    step = 0
    best_val = math.inf
    log_rows = []

    def save_best(step_now):
        ckpt = Checkpoint(
            config=model.config,
            params=model.params,
            normalizer=normalizer.to_dict() if normalizer is not None else None,
            step=step_now,
        )
        checkpoint_save(best_path, ckpt)

    save_best(0)
    for epoch in range(1, config.epochs + 1):
        if config.lr_schedule == "cosine":
            opt_state["lr_scale"] = 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for idx in order:
            sample = train[int(idx)]
            model.params.zero_grads()
            try:
                preds = model_forward(model, sample.streams, sample.geom, neighbor_cache=train_caches[int(idx)])
                loss = compute_loss(preds, sample.targets, config)
                loss_value = loss.item()
            except NumericError:
                loss_value = math.inf
            if not math.isfinite(loss_value):
                _write_log(log_path, log_rows)
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}", last_checkpoint=best_path
                )
            loss.backward()
            clip_gradients(model.params, config.grad_clip)
            optimizer_step(model.params, opt_state, config)
            epoch_loss += loss_value
            step += 1
        row = {c: "" for c in LOG_COLUMNS}
        row.update(epoch=epoch, step=step, train_loss=epoch_loss / len(train))
        if val and (epoch % config.eval_interval == 0 or epoch == config.epochs):
            vl = _val_loss(model, val, val_caches, config)
            row["val_loss"] = vl
            if normalizer is not None:
                report = evaluate_model(model, val, normalizer, caches=val_caches)
                row["surface_cp_rel_l1"] = report.field_metrics["surface_cp"]["relative_l1"]
                row["volume_cp_rel_l1"] = report.field_metrics["volume_cp"]["relative_l1"]
                row["volume_velocity_rel_l1"] = report.field_metrics["volume_velocity"]["relative_l1"]
                row["j_r2"] = report.r2["j"] if report.r2["j"] is not None else ""
            if vl < best_val:
                best_val = vl
                save_best(step)
            print(
                f"epoch {epoch}: train_loss={row['train_loss']:.5f} val_loss={vl:.5f} "
                f"surface_cp={row['surface_cp_rel_l1']} volume_u={row['volume_velocity_rel_l1']}",
                flush=True,
            )
        log_rows.append(row)
        _write_log(log_path, log_rows)
    if not val:
        save_best(step)
        best_val = log_rows[-1]["train_loss"]
    _write_log(log_path, log_rows)
    return FitResult(log_rows=log_rows, best_checkpoint=best_path, best_val_loss=best_val, log_path=log_path)


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row.get(c, "") for c in LOG_COLUMNS])
