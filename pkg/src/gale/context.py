"""Ball-query products: per-token geometry augmentation and context tokens.

Two directions of radius-bounded queries feed the model. Geometry-to-input
queries gather geometry points around each stream token and reduce a
per-neighbor MLP to an augmentation row per token. Input-to-geometry
queries gather stream tokens around each geometry point; pooled over the
geometry they become one summary token per scale. Together with the
embedded global parameter vector and a pooled geometry embedding they form
the context token sequence that every attention block reads.

Empty neighborhoods contribute zero vectors. All pooling is mean by
default and order-canonical, so permuting geometry points or stream tokens
leaves results bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import EmptyInputError, InvalidArgumentError, InvalidSampleError, ShapeError
from .neighbors import MultiScaleSchedule, NeighborList, as_points, build_index, ball_query

# Incremented on every build_context call; tests assert one call per forward.
BUILD_CONTEXT_CALLS = 0


@dataclass
class LocalStream:
    """One group of prediction points with positions and per-point features."""

    name: str
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, d_x)

    def __post_init__(self):
        self.positions = as_points(self.positions)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.positions):
            raise ShapeError(
                f"stream {self.name!r}: {len(self.positions)} positions vs features {self.features.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return len(self.positions)


@dataclass
class GeometrySample:
    """Geometry point cloud with per-point features and global parameters."""

    points: np.ndarray  # (M_g, 3)
    features: np.ndarray  # (M_g, d_g)
    params: np.ndarray  # (d_p,)

    def __post_init__(self):
        self.points = as_points(self.points)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2 or len(self.features) != len(self.points):
            raise ShapeError(f"{len(self.points)} geometry points vs features {self.features.shape}")
        if not (np.isfinite(self.features).all() and np.isfinite(self.params).all()):
            raise InvalidArgumentError("geometry features and params must be finite")

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass
class ContextTokens:
    """Context token matrix: row 0 global params, row 1 pooled geometry,
    rows 2..S+1 one pooled input summary per scale."""

    tokens: T.Tensor
    n_scales: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.n_scales + 2:
            raise ShapeError(f"context needs {self.n_scales + 2} rows, got {self.tokens.shape[0]}")

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def checksum(self) -> float:
        return float(np.abs(self.tokens.data.astype(np.float64)).sum())


@dataclass
class NeighborCache:
    """Per-sample neighbor structure, reusable across forward passes.

    geom_to_stream[name][s]: queries are stream tokens, targets geometry.
    stream_to_geom[s]: queries are geometry points, targets the union of
    all stream tokens in stream order. `packed` memoizes the assembled
    per-neighbor input rows, which depend on the sample but never on
    model parameters.
    """

    geom_to_stream: dict = field(default_factory=dict)
    stream_to_geom: list = field(default_factory=list)
    stream_order: list = field(default_factory=list)
    packed: dict = field(default_factory=dict)


def build_neighbor_cache(streams, geom: GeometrySample, schedule: MultiScaleSchedule) -> NeighborCache:
    cache = NeighborCache(stream_order=[s.name for s in streams])
    for scale in schedule:
        geom_index = build_index(geom.points, scale.radius)
        for stream in streams:
            lists = cache.geom_to_stream.setdefault(stream.name, [])
            lists.append(ball_query(geom_index, stream.positions, scale.radius, scale.cap))
    if streams:
        union = np.concatenate([s.positions for s in streams], axis=0)
    else:
        union = np.zeros((0, 3))
    for scale in schedule:
        union_index = build_index(union, scale.radius)
        cache.stream_to_geom.append(ball_query(union_index, geom.points, scale.radius, scale.cap))
    return cache


def _pack_rows(nl: NeighborList, target_features: np.ndarray):
    """Concatenate [target feature, offset] rows for all queries of one scale."""
    counts = nl.counts()
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    if counts.sum() == 0:
        rows = np.zeros((0, target_features.shape[1] + 3))
    else:
        idx = np.concatenate([ix for ix in nl.indices if len(ix)])
        off = np.concatenate([o for o in nl.offsets if len(o)], axis=0)
        rows = np.concatenate([target_features[idx], off], axis=1)
    return rows, T.Segments(starts, counts, nl.n_queries)


def _packed_neighbor_rows(nl: NeighborList, target_features: np.ndarray, dtype, packed=None, key=None):
    """Packed rows as a constant tensor plus segment structure, memoized
    per (key, dtype) if a cache dict is supplied."""
    if packed is None:
        rows, seg = _pack_rows(nl, target_features)
        return T.Tensor(rows, dtype=dtype), seg
    entry = packed.get(key)
    if entry is None:
        rows, seg = _pack_rows(nl, target_features)
        entry = {"rows": rows, "seg": seg, "tensors": {}}
        packed[key] = entry
    dt = np.dtype(dtype).name
    tens = entry["tensors"].get(dt)
    if tens is None:
        tens = T.Tensor(entry["rows"], dtype=dtype)
        entry["tensors"][dt] = tens
    return tens, entry["seg"]


def geom_to_input_features(
    stream: LocalStream,
    geom: GeometrySample,
    schedule: MultiScaleSchedule,
    psi_mlps,
    neighbor_lists=None,
    packed=None,
) -> T.Tensor:
    """Per-token multi-scale augmentation rows, width S * d_bq.

    Scale s maps each neighbor to psi_s([gamma_j, g_j - x_i]) and averages
    over the neighborhood; tokens with no neighbor in the ball get zeros.
    """
    if len(psi_mlps) != len(schedule):
        raise ShapeError(f"{len(schedule)} scales need {len(schedule)} MLPs, got {len(psi_mlps)}")
    d_g = geom.features.shape[1]
    for mlp in psi_mlps:
        if mlp.in_width != d_g + 3:
            raise ShapeError(f"augmentation MLP expects width {d_g + 3}, got {mlp.in_width}")
    if neighbor_lists is None:
        neighbor_lists = [
            ball_query(build_index(geom.points, s.radius), stream.positions, s.radius, s.cap)
            for s in schedule
        ]
    dtype = psi_mlps[0].layers[0][0].dtype
    per_scale = []
    for i, (nl, mlp) in enumerate(zip(neighbor_lists, psi_mlps)):
        rows, seg = _packed_neighbor_rows(nl, geom.features, dtype, packed, ("g2s", stream.name, i))
        per_scale.append(T.segment_mean(mlp(rows), seg))
    return T.concat_cols(per_scale)


def input_to_geom_features(
    streams,
    geom: GeometrySample,
    schedule: MultiScaleSchedule,
    phi_mlps,
    neighbor_lists=None,
    packed=None,
) -> list[T.Tensor]:
    """Per-scale summaries at geometry points from the union of all streams.

    Returns one (M_g x d_c) tensor per scale; geometry points with no
    stream token in the ball get zero rows.
    """
    if len(phi_mlps) != len(schedule):
        raise ShapeError(f"{len(schedule)} scales need {len(schedule)} MLPs, got {len(phi_mlps)}")
    d_x = streams[0].features.shape[1] if streams else 0
    for s in streams:
        if s.features.shape[1] != d_x:
            raise ShapeError("all streams must share one feature width")
    for mlp in phi_mlps:
        if mlp.in_width != d_x + 3:
            raise ShapeError(f"summary MLP expects width {d_x + 3}, got {mlp.in_width}")
    if neighbor_lists is None:
        union = np.concatenate([s.positions for s in streams], axis=0)
        neighbor_lists = [
            ball_query(build_index(union, s.radius), geom.points, s.radius, s.cap) for s in schedule
        ]
    union_features = np.concatenate([s.features for s in streams], axis=0)
    dtype = phi_mlps[0].layers[0][0].dtype
    out = []
    for i, (nl, mlp) in enumerate(zip(neighbor_lists, phi_mlps)):
        rows, seg = _packed_neighbor_rows(nl, union_features, dtype, packed, ("s2g", i))
        out.append(T.segment_mean(mlp(rows), seg))
    return out


def pool_reduce(rows: T.Tensor, mode: str = "mean") -> T.Tensor:
    """Order-independent reduction of a row batch to a single row."""
    if rows.shape[0] == 0:
        raise EmptyInputError("pool over zero rows; substitute zeros explicitly")
    if mode == "mean":
        return T.mean_rows(rows)
    if mode == "max":
        return T.max_rows(rows)
    raise InvalidArgumentError(f"unknown pool mode {mode!r}")


def build_context(
    streams,
    geom: GeometrySample,
    schedule: MultiScaleSchedule,
    phi_mlps,
    rho_mlp,
    embed_p,
    pool_mode: str = "mean",
    neighbor_lists=None,
    packed=None,
) -> ContextTokens:
    """Assemble the shared context token sequence, built once per sample."""
    global BUILD_CONTEXT_CALLS
    BUILD_CONTEXT_CALLS += 1
    if geom.n_points == 0:
        raise InvalidSampleError("context needs at least one geometry point")
    dtype = rho_mlp.layers[0][0].dtype
    p_row = embed_p(T.Tensor(geom.params.reshape(1, -1), dtype=dtype))
    c_geom = pool_reduce(rho_mlp(T.Tensor(geom.features, dtype=dtype)), pool_mode)
    summaries = input_to_geom_features(streams, geom, schedule, phi_mlps, neighbor_lists, packed)
    scale_rows = [pool_reduce(h, pool_mode) for h in summaries]
    widths = {t.shape[1] for t in [p_row, c_geom, *scale_rows]}
    if len(widths) != 1:
        raise ShapeError(f"context components disagree on width: {sorted(widths)}")
    tokens = T.concat_rows([p_row, c_geom, *scale_rows])
    return ContextTokens(tokens=tokens, n_scales=len(schedule))
