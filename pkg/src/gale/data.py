"""Synthetic desk-scale dataset: incompressible potential flow past
spheres and ellipsoids with closed-form velocity and pressure, plus
splitting, normalization, CSV point-cloud ingestion, and manifests.

The sphere uses the classical doublet solution; ellipsoids use the exact
triaxial solution written with Carlson elliptic integrals, so both obey
no-penetration and d'Alembert's zero net force to solver precision.
Shear targets are identically zero (inviscid flow) but keep their three
channels so the force-integration path stays exercised end to end.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import elliprd

from .context import GeometrySample, LocalStream
from .errors import DataError, DomainError, ParseError, SchemaError
from .metrics import SurfaceQuadrature

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class CaseSpec:
    """One flow case: body shape, onset flow, and sampling counts."""

    kind: str = "sphere"  # sphere | ellipsoid
    semi_axes: tuple = (1.0, 1.0, 1.0)
    speed: float = 1.0
    onset: tuple = (1.0, 0.0, 0.0)
    surface_count: int = 2000
    volume_count: int = 4000
    shell_outer: float = 2.5
    seed: int = 0
    case_id: str = "case"

    def __post_init__(self):
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        self.speed = float(self.speed)
        self.shell_outer = float(self.shell_outer)
        if self.kind not in ("sphere", "ellipsoid"):
            raise DataError(f"unknown shape kind {self.kind!r}")
        if min(self.semi_axes) <= 0:
            raise DataError(f"semi-axes must be positive, got {self.semi_axes}")
        if self.kind == "sphere" and len(set(self.semi_axes)) != 1:
            raise DataError("sphere case needs equal semi-axes")
        if self.speed <= 0:
            raise DataError(f"free-stream speed must be positive, got {self.speed}")
        if self.surface_count < 4 or self.volume_count < 4:
            raise DataError("point counts must be >= 4")
        if self.shell_outer <= max(self.semi_axes):
            raise DataError(
                f"outer shell radius {self.shell_outer} must exceed the body ({max(self.semi_axes)})"
            )
        onset = np.asarray(self.onset, dtype=np.float64)
        norm = float(np.linalg.norm(onset))
        if norm == 0:
            raise DataError("onset direction must be nonzero")
        self.onset = tuple(onset / norm)

    @property
    def radius(self) -> float:
        return self.semi_axes[0]


def fibonacci_sphere(n: int) -> np.ndarray:
    """Near-uniform unit directions; deterministic for a given n."""
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    theta = _GOLDEN_ANGLE * i
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _inside_body(points: np.ndarray, semi_axes) -> np.ndarray:
    scaled = points / np.asarray(semi_axes)
    return (scaled * scaled).sum(axis=1) < 1.0 - 1e-12


def _ellipsoidal_lambda(points: np.ndarray, semi_axes) -> np.ndarray:
    """Largest root of sum_i x_i^2 / (a_i^2 + lam) = 1, zero on the surface."""
    sq = np.asarray(semi_axes, dtype=np.float64) ** 2
    x2 = points * points
    lam = np.maximum((x2).sum(axis=1) - sq.min(), 0.0)
    for _ in range(60):
        denom = sq[None, :] + lam[:, None]
        f = (x2 / denom).sum(axis=1) - 1.0
        fp = -(x2 / (denom * denom)).sum(axis=1)
        step = f / fp
        lam = np.maximum(lam - step, 0.0)
        if np.all(np.abs(f) < 1e-14):
            break
    return lam


def _axis_integrals(lam: np.ndarray, semi_axes):
    """A_i(lam) = integral_lam^inf ds / ((a_i^2+s) Delta(s)) via Carlson R_D."""
    a2, b2, c2 = (s * s for s in semi_axes)
    ax = (2.0 / 3.0) * elliprd(b2 + lam, c2 + lam, a2 + lam)
    ay = (2.0 / 3.0) * elliprd(a2 + lam, c2 + lam, b2 + lam)
    az = (2.0 / 3.0) * elliprd(a2 + lam, b2 + lam, c2 + lam)
    return np.stack([ax, ay, az], axis=-1)


def potential_flow_oracle(points, spec: CaseSpec):
    """Velocity and pressure coefficient at points outside (or on) the body.

    Sphere: u_r = U cos(theta) (1 - a^3/r^3), u_theta = -U sin(theta)
    (1 + a^3/(2 r^3)); ellipsoid: superposed axis solutions with exact
    Carlson-integral coefficients. Cp = 1 - |u|^2 / U^2 everywhere.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if _inside_body(pts, spec.semi_axes).any():
        raise DomainError("point(s) inside the body have no flow solution")
    u_inf = spec.speed * np.asarray(spec.onset)
    if spec.kind == "sphere":
        a3 = spec.radius**3
        r = np.linalg.norm(pts, axis=1)
        e_r = pts / r[:, None]
        cos_t = e_r @ np.asarray(spec.onset)
        vel = (1.0 + a3 / (2.0 * r**3))[:, None] * u_inf[None, :] - (
            spec.speed * 1.5 * a3 / r**3 * cos_t
        )[:, None] * e_r
    else:
        sq = np.asarray(spec.semi_axes) ** 2
        lam = _ellipsoidal_lambda(pts, spec.semi_axes)
        alpha0 = np.prod(spec.semi_axes) * _axis_integrals(np.zeros(1), spec.semi_axes)[0]
        k = np.prod(spec.semi_axes) / (2.0 - alpha0)
        a_lam = _axis_integrals(lam, spec.semi_axes)
        delta = np.sqrt(np.prod(sq[None, :] + lam[:, None], axis=1))
        a_prime = -1.0 / ((sq[None, :] + lam[:, None]) * delta[:, None])
        denom = sq[None, :] + lam[:, None]
        grad_norm = (pts * pts / (denom * denom)).sum(axis=1)
        grad_lam = np.where(
            grad_norm[:, None] > 0, 2.0 * pts / denom / np.maximum(grad_norm, 1e-300)[:, None], 0.0
        )
        coeff = (u_inf[None, :] * k[None, :] * a_prime * pts).sum(axis=1)
        vel = u_inf[None, :] * (1.0 + k[None, :] * a_lam) + coeff[:, None] * grad_lam
    cp = 1.0 - (vel * vel).sum(axis=1) / spec.speed**2
    return vel, cp


@dataclass
class Case:
    """One generated case with full-resolution clouds and analytic targets."""

    case_id: str
    spec: CaseSpec
    surface_positions: np.ndarray
    surface_normals: np.ndarray
    surface_area: np.ndarray
    surface_cp: np.ndarray
    volume_positions: np.ndarray
    volume_velocity: np.ndarray
    volume_cp: np.ndarray
    j_integral: float
    split: str = ""

    def surface_targets(self) -> np.ndarray:
        shear = np.zeros_like(self.surface_normals)
        return np.concatenate([self.surface_cp[:, None], shear], axis=1)

    def volume_targets(self) -> np.ndarray:
        return np.concatenate([self.volume_cp[:, None], self.volume_velocity], axis=1)


def generate_case(spec: CaseSpec) -> Case:
    """Fibonacci-sampled surface with exact normals and area weights, and
    rejection-sampled volume shell points, all labeled by the oracle."""
    a, b, c = spec.semi_axes
    dirs = fibonacci_sphere(spec.surface_count)
    surface = dirs * np.array([a, b, c])
    m = dirs / np.array([a, b, c])
    m_norm = np.linalg.norm(m, axis=1)
    normals = m / m_norm[:, None]
    area = (4.0 * math.pi / spec.surface_count) * a * b * c * m_norm
    _, surface_cp = potential_flow_oracle(surface, spec)

    rng = np.random.default_rng(spec.seed)
    chunks, collected = [], 0
    while collected < spec.volume_count:
        batch = rng.uniform(-spec.shell_outer, spec.shell_outer, size=(4 * spec.volume_count, 3))
        keep = (np.linalg.norm(batch, axis=1) <= spec.shell_outer) & ~_inside_body(batch, spec.semi_axes)
        batch = batch[keep]
        chunks.append(batch)
        collected += len(batch)
    volume = np.concatenate(chunks, axis=0)[: spec.volume_count]
    vol_vel, vol_cp = potential_flow_oracle(volume, spec)

    j_integral = float((surface_cp * surface_cp * area).sum())
    return Case(
        case_id=spec.case_id,
        spec=spec,
        surface_positions=surface,
        surface_normals=normals,
        surface_area=area,
        surface_cp=surface_cp,
        volume_positions=volume,
        volume_velocity=vol_vel,
        volume_cp=vol_cp,
        j_integral=j_integral,
    )


def surface_quadrature(case: Case, subset=None) -> SurfaceQuadrature:
    """Quadrature over the full surface or a row subset of it."""
    sel = slice(None) if subset is None else subset
    return SurfaceQuadrature(
        normals=case.surface_normals[sel],
        area=case.surface_area[sel],
        pressure=case.surface_cp[sel],
        p_inf=0.0,
        shear=np.zeros_like(case.surface_normals[sel]),
    )


# ---------------------------------------------------------------------------
# Dataset generation, splitting, normalization
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    n_cases: int = 64
    surface_count: int = 2000
    volume_count: int = 4000
    kinds: tuple = ("sphere", "ellipsoid")
    radius_range: tuple = (0.6, 1.1)
    aspect_range: tuple = (0.65, 1.45)
    speed_range: tuple = (0.8, 1.25)
    shell_outer_factor: float = 2.5
    fractions: tuple = (0.8, 0.1, 0.1)
    extreme_holdout: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise DataError("n_cases must be >= 1")
        for kind in self.kinds:
            if kind not in ("sphere", "ellipsoid"):
                raise DataError(f"unknown shape kind {kind!r}")


@dataclass
class Dataset:
    cases: list

    def by_split(self, tag: str) -> list:
        return [c for c in self.cases if c.split == tag]


def case_specs(cfg: DataConfig) -> list[CaseSpec]:
    rng = np.random.default_rng(cfg.seed)
    specs = []
    for i in range(cfg.n_cases):
        kind = cfg.kinds[i % len(cfg.kinds)]
        a = rng.uniform(*cfg.radius_range)
        if kind == "sphere":
            axes = (a, a, a)
        else:
            axes = (a, a * rng.uniform(*cfg.aspect_range), a * rng.uniform(*cfg.aspect_range))
        specs.append(
            CaseSpec(
                kind=kind,
                semi_axes=axes,
                speed=rng.uniform(*cfg.speed_range),
                onset=(1.0, 0.0, 0.0),
                surface_count=cfg.surface_count,
                volume_count=cfg.volume_count,
                shell_outer=cfg.shell_outer_factor * max(axes),
                seed=int(rng.integers(0, 2**31 - 1)),
                case_id=f"case{i:04d}",
            )
        )
    return specs


def generate_dataset(cfg: DataConfig) -> Dataset:
    dataset = Dataset(cases=[generate_case(s) for s in case_specs(cfg)])
    split_dataset(dataset, cfg.fractions, cfg.seed, extreme_holdout=cfg.extreme_holdout)
    return dataset


def split_dataset(dataset: Dataset, fractions, seed: int, extreme_holdout: bool = False) -> Dataset:
    """Disjoint, exhaustive train/val/test tags, deterministic per seed.

    With extreme_holdout the test slots are the lowest and highest cases
    by the surface integral J instead of random draws.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three positives summing to 1, got {fr}")
    n = len(dataset.cases)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} cases are too few for fractions {fr}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(n))
    if extreme_holdout:
        by_stat = sorted(range(n), key=lambda i: dataset.cases[i].j_integral)
        low = by_stat[: n_test // 2 + n_test % 2]
        high = by_stat[len(by_stat) - n_test // 2 :] if n_test // 2 else []
        test = sorted(set(low) | set(high))
        remainder = [i for i in order if i not in set(test)]
        val, train = remainder[:n_val], remainder[n_val:]
    else:
        test = order[:n_test]
        val = order[n_test : n_test + n_val]
        train = order[n_test + n_val :]
    for i in train:
        dataset.cases[i].split = "train"
    for i in val:
        dataset.cases[i].split = "val"
    for i in test:
        dataset.cases[i].split = "test"
    return dataset


class Normalizer:
    """Per-feature mean/scale fit on the train split only.

    Keys are '<stream>.features', '<stream>.targets', and 'params';
    constant features get scale 1 so applying is always invertible.
    """

    def __init__(self, stats: dict):
        self.stats = stats

    @classmethod
    def fit(cls, rows_by_key: dict) -> "Normalizer":
        stats = {}
        for key, rows in rows_by_key.items():
            arr = np.concatenate([np.atleast_2d(r) for r in rows], axis=0)
            if arr.size == 0:
                raise DataError(f"cannot fit normalizer for {key!r} on empty data")
            mean = arr.mean(axis=0)
            scale = arr.std(axis=0)
            scale[scale < 1e-12] = 1.0
            stats[key] = (mean, scale)
        return cls(stats)

    def _stats_for(self, key: str, arr: np.ndarray):
        mean, scale = self.stats[key]
        if arr.shape[-1] != len(mean):
            raise DataError(
                f"normalizer {key!r} expects width {len(mean)}, got {arr.shape[-1]}"
            )
        return mean, scale

    def apply(self, key: str, arr: np.ndarray) -> np.ndarray:
        mean, scale = self._stats_for(key, arr)
        return (arr - mean) / scale

    def invert(self, key: str, arr: np.ndarray) -> np.ndarray:
        mean, scale = self._stats_for(key, arr)
        return arr * scale + mean

    def to_dict(self) -> dict:
        return {k: {"mean": m.tolist(), "scale": s.tolist()} for k, (m, s) in self.stats.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls({k: (np.asarray(v["mean"]), np.asarray(v["scale"])) for k, v in d.items()})


def fit_normalizer(train_cases: list) -> Normalizer:
    if not train_cases:
        raise DataError("normalizer needs at least one train case")
    rows = {
        "surface.features": [],
        "surface.targets": [],
        "volume.features": [],
        "volume.targets": [],
        "params": [],
    }
    for case in train_cases:
        rows["surface.features"].append(_surface_features(case))
        rows["surface.targets"].append(case.surface_targets())
        rows["volume.features"].append(_volume_features(case))
        rows["volume.targets"].append(case.volume_targets())
        rows["params"].append(_global_params(case)[None, :])
    return Normalizer.fit(rows)


def _surface_features(case: Case) -> np.ndarray:
    return np.concatenate([case.surface_normals, case.surface_area[:, None]], axis=1)


def _volume_features(case: Case) -> np.ndarray:
    return np.zeros((len(case.volume_positions), 4))


def _global_params(case: Case) -> np.ndarray:
    return np.concatenate([[case.spec.speed], np.asarray(case.spec.onset)])


@dataclass
class Sample:
    """Model-ready view of one case: capped token sets, normalized features
    and targets, plus the raw quantities metrics need."""

    case_id: str
    streams: dict
    geom: GeometrySample
    targets: dict
    raw_targets: dict
    quadrature: SurfaceQuadrature
    j_true: float
    speed: float
    body_scale: float


def _subsample(n: int, cap: int, rng) -> np.ndarray:
    if cap >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def make_sample(case: Case, model_cfg, normalizer: Normalizer) -> Sample:
    """Apply token caps and normalization; deterministic per (config, case)."""
    rng = np.random.default_rng((model_cfg.seed, zlib.crc32(case.case_id.encode())))
    surf_idx = _subsample(len(case.surface_positions), model_cfg.query_token_cap, rng)
    vol_idx = _subsample(len(case.volume_positions), model_cfg.query_token_cap, rng)
    geom_idx = _subsample(len(case.surface_positions), model_cfg.geom_token_cap, rng)

    surf_feat = normalizer.apply("surface.features", _surface_features(case))[surf_idx]
    vol_feat = normalizer.apply("volume.features", _volume_features(case))[vol_idx]
    streams = {
        "surface": LocalStream("surface", case.surface_positions[surf_idx], surf_feat),
        "volume": LocalStream("volume", case.volume_positions[vol_idx], vol_feat),
    }
    geom = GeometrySample(
        points=case.surface_positions[geom_idx],
        features=case.surface_normals[geom_idx],
        params=normalizer.apply("params", _global_params(case)),
    )
    raw_targets = {
        "surface": case.surface_targets()[surf_idx],
        "volume": case.volume_targets()[vol_idx],
    }
    targets = {
        "surface": normalizer.apply("surface.targets", raw_targets["surface"]),
        "volume": normalizer.apply("volume.targets", raw_targets["volume"]),
    }
    j_true = float((case.surface_cp[surf_idx] ** 2 * case.surface_area[surf_idx]).sum())
    return Sample(
        case_id=case.case_id,
        streams=streams,
        geom=geom,
        targets=targets,
        raw_targets=raw_targets,
        quadrature=surface_quadrature(case, surf_idx),
        j_true=j_true,
        speed=case.spec.speed,
        body_scale=max(case.spec.semi_axes),
    )


# ---------------------------------------------------------------------------
# CSV point clouds and manifests
# ---------------------------------------------------------------------------

_QUAD_COLUMNS = ("nx", "ny", "nz", "area")


def write_csv_pointcloud(path, positions: np.ndarray, columns: dict | None = None) -> None:
    """x,y,z plus any named per-point columns, one header row."""
    columns = columns or {}
    names = ["x", "y", "z"] + list(columns)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for i in range(len(positions)):
            row = [repr(float(v)) for v in positions[i]]
            row += [repr(float(columns[c][i])) for c in columns]
            writer.writerow(row)


def load_csv_pointcloud(path, feature_columns=(), target_columns=(), name: str = "points"):
    """Read a point cloud; returns (LocalStream, quadrature columns, targets).

    x,y,z are mandatory; nx,ny,nz,area are picked up when all present;
    missing schema columns raise SchemaError naming the column, bad cells
    raise ParseError with their row number.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        for col in ("x", "y", "z", *feature_columns, *target_columns):
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        idx = {h: i for i, h in enumerate(header)}
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {row_no}: expected {len(header)} cells, got {len(row)}")
            parsed = []
            for col in header:
                cell = row[idx[col]]
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: row {row_no}: cannot parse {col}={cell!r}") from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    positions = np.stack([table[:, idx[c]] for c in ("x", "y", "z")], axis=1)
    if feature_columns:
        features = np.stack([table[:, idx[c]] for c in feature_columns], axis=1)
    else:
        features = np.zeros((len(table), 0))
    stream = LocalStream(name, positions, features)
    quad = None
    if all(c in idx for c in _QUAD_COLUMNS):
        quad = {c: table[:, idx[c]] for c in _QUAD_COLUMNS}
    targets = None
    if target_columns:
        targets = np.stack([table[:, idx[c]] for c in target_columns], axis=1)
    return stream, quad, targets


def write_manifest(path, dataset: Dataset) -> None:
    """Line-oriented manifest: one tab-separated record per case."""
    with open(path, "w") as f:
        f.write(
            "# case_id\tkind\tax\tay\taz\tspeed\tox\toy\toz\tsurface\tvolume\tshell\tseed\tsplit\n"
        )
        for c in dataset.cases:
            s = c.spec
            fields = [
                c.case_id,
                s.kind,
                repr(float(s.semi_axes[0])),
                repr(float(s.semi_axes[1])),
                repr(float(s.semi_axes[2])),
                repr(float(s.speed)),
                repr(float(s.onset[0])),
                repr(float(s.onset[1])),
                repr(float(s.onset[2])),
                str(s.surface_count),
                str(s.volume_count),
                repr(float(s.shell_outer)),
                str(s.seed),
                c.split,
            ]
            f.write("\t".join(fields) + "\n")


def read_manifest(path) -> list[tuple[CaseSpec, str]]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 14:
                raise ParseError(f"{path}: malformed manifest line: {line!r}")
            spec = CaseSpec(
                kind=parts[1],
                semi_axes=(float(parts[2]), float(parts[3]), float(parts[4])),
                speed=float(parts[5]),
                onset=(float(parts[6]), float(parts[7]), float(parts[8])),
                surface_count=int(parts[9]),
                volume_count=int(parts[10]),
                shell_outer=float(parts[11]),
                seed=int(parts[12]),
                case_id=parts[0],
            )
            out.append((spec, parts[13]))
    return out
