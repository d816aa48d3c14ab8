"""Evaluation metrics: MAE, relative L1, surface force integration with
drag/lift extraction, R-squared, and design-trend tables.

Field norms are entrywise L1 over all points and components of a case;
the relative L1 is a global ratio over the test set, not a mean of
per-case ratios. Forces integrate -(p_s - p_inf) n_hat + tau_w over the
quadrature; drag projects on [1,0,0] and lift on [0,0,1].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import QuadratureError, ShapeError, UndefinedMetricError

DRAG_AXIS = np.array([1.0, 0.0, 0.0])
LIFT_AXIS = np.array([0.0, 0.0, 1.0])


def _case_norm(u: np.ndarray, v: np.ndarray) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"field shapes differ: {u.shape} vs {v.shape}")
    return float(np.abs(u - v).sum())


def mae(true_fields, pred_fields) -> float:
    """Mean over cases of the entrywise-L1 norm of the error."""
    if len(true_fields) != len(pred_fields) or not true_fields:
        raise ShapeError("need equally many (>=1) true and predicted cases")
    return sum(_case_norm(u, v) for u, v in zip(true_fields, pred_fields)) / len(true_fields)


def relative_l1(true_fields, pred_fields) -> float:
    """Summed error norm over summed truth norm, across all cases."""
    if len(true_fields) != len(pred_fields) or not true_fields:
        raise ShapeError("need equally many (>=1) true and predicted cases")
    num = sum(_case_norm(u, v) for u, v in zip(true_fields, pred_fields))
    den = sum(float(np.abs(np.asarray(u, dtype=np.float64)).sum()) for u in true_fields)
    if den == 0:
        raise UndefinedMetricError("relative L1 is undefined for all-zero ground truth")
    return num / den


@dataclass
class SurfaceQuadrature:
    """Per-point unit normals, positive area weights, pressures, and shear."""

    normals: np.ndarray  # (n, 3)
    area: np.ndarray  # (n,)
    pressure: np.ndarray  # (n,) static pressure p_s
    p_inf: float = 0.0
    shear: np.ndarray | None = None  # (n, 3) wall shear

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.area = np.asarray(self.area, dtype=np.float64).reshape(-1)
        self.pressure = np.asarray(self.pressure, dtype=np.float64).reshape(-1)
        if self.shear is None:
            self.shear = np.zeros_like(self.normals)
        self.shear = np.asarray(self.shear, dtype=np.float64)
        n = len(self.area)
        if self.normals.shape != (n, 3) or self.pressure.shape != (n,) or self.shear.shape != (n, 3):
            raise ShapeError("quadrature arrays disagree on point count")
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.abs(lengths - 1.0).max(initial=0.0) > 1e-6:
            raise QuadratureError("normals must have unit length (within 1e-6)")
        if (self.area <= 0).any():
            raise QuadratureError("area weights must be positive")

    @property
    def n_points(self) -> int:
        return len(self.area)


def surface_force(quad: SurfaceQuadrature, pressure=None, shear=None) -> np.ndarray:
    """Total force vector sum((-(p_s - p_inf) n_hat + tau_w) dS).

    Pressure/shear overrides let one quadrature serve both truth and
    prediction fields.
    """
    p = quad.pressure if pressure is None else np.asarray(pressure, dtype=np.float64).reshape(-1)
    t = quad.shear if shear is None else np.asarray(shear, dtype=np.float64)
    if p.shape != (quad.n_points,) or t.shape != (quad.n_points, 3):
        raise ShapeError("override fields disagree with quadrature point count")
    integrand = -(p - quad.p_inf)[:, None] * quad.normals + t
    return (integrand * quad.area[:, None]).sum(axis=0)


def force_coefficients(force: np.ndarray, rho=None, u_ref=None, area_ref=None):
    """(C_D, C_L): axis projections, nondimensionalized when references given."""
    force = np.asarray(force, dtype=np.float64).reshape(3)
    denom = 1.0
    if rho is not None and u_ref is not None and area_ref is not None:
        denom = 0.5 * rho * u_ref**2 * area_ref
    return float(force @ DRAG_AXIS) / denom, float(force @ LIFT_AXIS) / denom


def r_squared(true_scalars, pred_scalars) -> float:
    """1 - SS_res / SS_tot over the whole case list."""
    y = np.asarray(true_scalars, dtype=np.float64).reshape(-1)
    yhat = np.asarray(pred_scalars, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ShapeError("R^2 needs equally many true and predicted values")
    if len(y) < 2:
        raise UndefinedMetricError("R^2 needs at least two cases")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant ground truth")
    ss_res = float(((y - yhat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def kendall_tau(true_scalars, pred_scalars) -> float:
    """Pair-counting rank agreement (tau-a); ties contribute zero."""
    y = np.asarray(true_scalars, dtype=np.float64).reshape(-1)
    yhat = np.asarray(pred_scalars, dtype=np.float64).reshape(-1)
    n = len(y)
    if n < 2 or y.shape != yhat.shape:
        raise UndefinedMetricError("rank agreement needs >= 2 paired cases")
    score = 0
    for i in range(n):
        for j in range(i + 1, n):
            score += int(np.sign((y[i] - y[j]) * (yhat[i] - yhat[j])))
    return score / (n * (n - 1) / 2)


@dataclass
class TrendTable:
    """Cases ordered by ascending ground truth plus rank agreement."""

    rows: list  # (case_id, true_value, predicted_value)
    tau: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case_id", "true_value", "predicted_value", "kendall_tau"])
            for case_id, true_v, pred_v in self.rows:
                writer.writerow([case_id, repr(float(true_v)), repr(float(pred_v)), repr(self.tau)])


def design_trend_table(cases) -> TrendTable:
    """`cases` is a list of (id, true, pred); rows come back sorted by truth."""
    cases = list(cases)
    if not cases:
        raise UndefinedMetricError("trend table needs at least one case")
    rows = sorted(cases, key=lambda c: c[1])
    if len(cases) >= 2:
        tau = kendall_tau([c[1] for c in cases], [c[2] for c in cases])
    else:
        tau = 1.0
    return TrendTable(rows=rows, tau=tau)


@dataclass
class MetricReport:
    """Per-field errors, per-case forces and integrals, R^2 values, trend."""

    field_metrics: dict = field(default_factory=dict)  # name -> {relative_l1, mae}
    cases: list = field(default_factory=list)  # per-case dict rows
    r2: dict = field(default_factory=dict)
    trend: TrendTable | None = None

    CASE_COLUMNS = (
        "j_true",
        "j_pred",
        "fx_true",
        "fy_true",
        "fz_true",
        "fx_pred",
        "fy_pred",
        "fz_pred",
        "cd_true",
        "cd_pred",
        "cl_true",
        "cl_pred",
    )

    def write_csv(self, path) -> None:
        metric_cols = sorted(self.field_metrics)
        r2_cols = sorted(self.r2)
        header = (
            ["case_id"]
            + list(self.CASE_COLUMNS)
            + [f"{m}_rel_l1" for m in metric_cols]
            + [f"{m}_mae" for m in metric_cols]
            + [f"{q}_r2" for q in r2_cols]
        )
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in self.cases:
                line = [row["case_id"]]
                line += [repr(float(row[c])) for c in self.CASE_COLUMNS]
                line += [""] * (2 * len(metric_cols) + len(r2_cols))
                writer.writerow(line)
            summary = ["SUMMARY"] + [""] * len(self.CASE_COLUMNS)
            summary += [_fmt_opt(self.field_metrics[m].get("relative_l1")) for m in metric_cols]
            summary += [_fmt_opt(self.field_metrics[m].get("mae")) for m in metric_cols]
            summary += [_fmt_opt(self.r2.get(q)) for q in r2_cols]
            writer.writerow(summary)


def _fmt_opt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def read_metric_report_csv(path) -> dict:
    """Parse a report written by MetricReport.write_csv back into dicts."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [dict(zip(header, row)) for row in reader]
    cases = [r for r in rows if r["case_id"] != "SUMMARY"]
    summary = next(r for r in rows if r["case_id"] == "SUMMARY")
    return {
        "header": header,
        "cases": cases,
        "summary": {k: (float(v) if v else None) for k, v in summary.items() if k != "case_id"},
    }
