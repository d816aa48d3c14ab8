"""Full surrogate model: input encoding with one-time ball-query
augmentation, a stack of per-stream GALE blocks sharing one context, and
per-stream output heads. Also owns the model configuration and the binary
checkpoint format.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import context as ctx_mod
from . import tensor as T
from .blocks import GaleBlockParams, LN_EPS, gale_block_forward
from .context import GeometrySample, LocalStream, build_context, build_neighbor_cache, geom_to_input_features
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    InvalidSampleError,
)
from .neighbors import MultiScaleSchedule
from .tensor import Mlp, ParamStore, Tensor

CHECKPOINT_MAGIC = b"GTSV"
CHECKPOINT_VERSION = 1


@dataclass
class StreamSpec:
    name: str
    out_width: int


@dataclass
class ModelConfig:
    """Widths, depth, schedule, and sampling caps for one model."""

    d_model: int = 64
    d_c: int = 32
    d_bq: int = 16
    d_p: int = 4
    d_g: int = 3
    d_x: int = 4
    L: int = 4
    m_state: int = 8
    heads: int = 1
    ffn_hidden: int = 128
    head_hidden: int = 64
    gate_hidden: int = 16
    schedule: list = field(default_factory=lambda: [[0.35, 8], [1.5, 16]])
    streams: list = field(default_factory=lambda: [StreamSpec("surface", 4), StreamSpec("volume", 4)])
    augmentation_enabled: bool = True
    attn_residual: bool = True
    query_token_cap: int = 4096
    geom_token_cap: int = 512
    pool_mode: str = "mean"
    seed: int = 0

    def __post_init__(self):
        self.streams = [s if isinstance(s, StreamSpec) else StreamSpec(**s) for s in self.streams]
        self.validate()

    def validate(self) -> None:
        widths = {
            "d_model": self.d_model,
            "d_c": self.d_c,
            "d_bq": self.d_bq,
            "d_p": self.d_p,
            "d_g": self.d_g,
            "d_x": self.d_x,
            "ffn_hidden": self.ffn_hidden,
            "head_hidden": self.head_hidden,
            "gate_hidden": self.gate_hidden,
        }
        for name, value in widths.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.m_state < 1:
            raise ConfigError(f"m_state must be >= 1, got {self.m_state}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"heads must be >= 1 and divide d_model, got {self.heads}")
        if self.query_token_cap < 1 or self.geom_token_cap < 1:
            raise ConfigError("token caps must be >= 1")
        names = [s.name for s in self.streams]
        if len(set(names)) != len(names) or not names:
            raise ConfigError(f"stream names must be unique and non-empty, got {names}")
        for s in self.streams:
            if s.out_width < 1:
                raise ConfigError(f"stream {s.name!r} output width must be >= 1")
        self.ball_schedule()  # validates radii/caps

    def ball_schedule(self) -> MultiScaleSchedule:
        return MultiScaleSchedule.of(self.schedule)

    @property
    def n_scales(self) -> int:
        return len(self.schedule)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_c": self.d_c,
            "d_bq": self.d_bq,
            "d_p": self.d_p,
            "d_g": self.d_g,
            "d_x": self.d_x,
            "L": self.L,
            "m_state": self.m_state,
            "heads": self.heads,
            "ffn_hidden": self.ffn_hidden,
            "head_hidden": self.head_hidden,
            "gate_hidden": self.gate_hidden,
            "schedule": [[float(r), int(k)] for r, k in self.schedule],
            "streams": [{"name": s.name, "out_width": s.out_width} for s in self.streams],
            "augmentation_enabled": self.augmentation_enabled,
            "attn_residual": self.attn_residual,
            "query_token_cap": self.query_token_cap,
            "geom_token_cap": self.geom_token_cap,
            "pool_mode": self.pool_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class GaleModel:
    """Parameter store plus wiring of encoders, blocks, and heads."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params
        self._wire()

    @property
    def dtype(self):
        return self.params[self.params.names()[0]].dtype

    def param_count(self) -> int:
        return self.params.n_scalars()

    def astype(self, dtype) -> "GaleModel":
        return GaleModel(self.config, self.params.astype(dtype))

    def _mlp(self, prefix: str, acts) -> Mlp:
        layers = []
        i = 0
        while f"{prefix}.w{i}" in self.params:
            w = self.params[f"{prefix}.w{i}"]
            b = self.params[f"{prefix}.b{i}"] if f"{prefix}.b{i}" in self.params else None
            layers.append((w, b, acts[i]))
            i += 1
        return Mlp(layers)

    def _wire(self) -> None:
        cfg = self.config
        p = self.params
        self.psi = {}
        if cfg.augmentation_enabled:
            for s in cfg.streams:
                self.psi[s.name] = [
                    self._mlp(f"bq.{s.name}.s{i}", ["gelu"]) for i in range(cfg.n_scales)
                ]
        self.phi = [self._mlp(f"ctx.phi.s{i}", ["gelu"]) for i in range(cfg.n_scales)]
        self.rho = self._mlp("ctx.rho", ["gelu"])
        self.embed_p = self._mlp("ctx.embed_p", ["identity"])
        self.blocks = {}
        for s in cfg.streams:
            stack = []
            for l in range(cfg.L):
                pre = f"blk{l}.{s.name}"
                stack.append(
                    GaleBlockParams(
                        ln1_gamma=p[f"{pre}.ln1.gamma"],
                        ln1_beta=p[f"{pre}.ln1.beta"],
                        w_slice=p[f"{pre}.w_slice"],
                        w_q=p[f"{pre}.w_q"],
                        w_k=p[f"{pre}.w_k"],
                        w_v=p[f"{pre}.w_v"],
                        w_qc=p[f"{pre}.w_qc"],
                        w_kc=p[f"{pre}.w_kc"],
                        w_vc=p[f"{pre}.w_vc"],
                        gate=self._mlp(f"{pre}.gate", ["gelu", "identity"]),
                        ffn=self._mlp(f"{pre}.ffn", ["gelu", "identity"]),
                        ln2_gamma=p[f"{pre}.ln2.gamma"],
                        ln2_beta=p[f"{pre}.ln2.beta"],
                        heads=cfg.heads,
                        attn_residual=cfg.attn_residual,
                    )
                )
            self.blocks[s.name] = stack
        self.heads = {
            s.name: {
                "ln_gamma": p[f"head.{s.name}.ln.gamma"],
                "ln_beta": p[f"head.{s.name}.ln.beta"],
                "mlp": self._mlp(f"head.{s.name}", ["gelu", "identity"]),
            }
            for s in cfg.streams
        }


def init_model(config: ModelConfig) -> GaleModel:
    """Create all parameters with fan-in-scaled uniform noise from the seed.

    Values depend only on (seed, parameter name), so configs sharing a
    component share its initial weights. The gating network's final bias
    starts at zero so gates open near the midpoint.
    """
    cfg = config
    seed = cfg.seed
    p = ParamStore()

    def linear(prefix, rows, cols, bias=True, zero_bias=False):
        p.create(f"{prefix}.w0", (rows, cols), seed)
        if bias:
            p.create(f"{prefix}.b0", (1, cols), seed, init="zeros" if zero_bias else "fan_in")

    def two_layer(prefix, rows, hidden, cols, zero_final_bias=False):
        p.create(f"{prefix}.w0", (rows, hidden), seed)
        p.create(f"{prefix}.b0", (1, hidden), seed)
        p.create(f"{prefix}.w1", (hidden, cols), seed)
        p.create(f"{prefix}.b1", (1, cols), seed, init="zeros" if zero_final_bias else "fan_in")

    def layer_norm_params(prefix, width):
        p.create(f"{prefix}.gamma", (1, width), seed, init="ones")
        p.create(f"{prefix}.beta", (1, width), seed, init="zeros")

    for s in cfg.streams:
        p.create(f"enc.{s.name}.p_proj", (cfg.d_x + 3, cfg.d_model), seed)
        if cfg.augmentation_enabled:
            p.create(f"enc.{s.name}.u_proj", (cfg.n_scales * cfg.d_bq, cfg.d_model), seed)
            for i in range(cfg.n_scales):
                linear(f"bq.{s.name}.s{i}", cfg.d_g + 3, cfg.d_bq)
    for i in range(cfg.n_scales):
        linear(f"ctx.phi.s{i}", cfg.d_x + 3, cfg.d_c)
    linear("ctx.rho", cfg.d_g, cfg.d_c)
    linear("ctx.embed_p", cfg.d_p, cfg.d_c)
    for s in cfg.streams:
        for l in range(cfg.L):
            pre = f"blk{l}.{s.name}"
            layer_norm_params(f"{pre}.ln1", cfg.d_model)
            p.create(f"{pre}.w_slice", (cfg.d_model, cfg.m_state), seed)
            for w in ("w_q", "w_k", "w_v", "w_qc"):
                p.create(f"{pre}.{w}", (cfg.d_model, cfg.d_model), seed)
            for w in ("w_kc", "w_vc"):
                p.create(f"{pre}.{w}", (cfg.d_c, cfg.d_model), seed)
            two_layer(f"{pre}.gate", cfg.d_model + cfg.d_c, cfg.gate_hidden, 1, zero_final_bias=True)
            two_layer(f"{pre}.ffn", cfg.d_model, cfg.ffn_hidden, cfg.d_model)
            layer_norm_params(f"{pre}.ln2", cfg.d_model)
        layer_norm_params(f"head.{s.name}.ln", cfg.d_model)
        two_layer(f"head.{s.name}", cfg.d_model, cfg.head_hidden, s.out_width)
    return GaleModel(cfg, p)


def _check_sample(model: GaleModel, streams: dict, geom: GeometrySample) -> None:
    cfg = model.config
    names = {s.name for s in cfg.streams}
    if set(streams) != names:
        raise InvalidSampleError(f"sample streams {sorted(streams)} != config streams {sorted(names)}")
    for stream in streams.values():
        if stream.features.shape[1] != cfg.d_x:
            raise InvalidSampleError(
                f"stream {stream.name!r} feature width {stream.features.shape[1]} != d_x {cfg.d_x}"
            )
    if geom.features.shape[1] != cfg.d_g:
        raise InvalidSampleError(f"geometry feature width {geom.features.shape[1]} != d_g {cfg.d_g}")
    if geom.params.shape[0] != cfg.d_p:
        raise InvalidSampleError(f"global param width {geom.params.shape[0]} != d_p {cfg.d_p}")


def encode_inputs(model: GaleModel, stream: LocalStream, aug: T.Tensor | None, packed=None) -> T.Tensor:
    """Project [features, positions] (plus augmentation when enabled) to d_model."""
    base = None
    key = ("enc", stream.name, np.dtype(model.dtype).name)
    if packed is not None:
        base = packed.get(key)
    if base is None:
        base = Tensor(
            np.concatenate([stream.features, stream.positions], axis=1), dtype=model.dtype
        )
        if packed is not None:
            packed[key] = base
    h = T.matmul(base, model.params[f"enc.{stream.name}.p_proj"])
    if model.config.augmentation_enabled:
        if aug is None:
            raise InvalidSampleError("augmentation enabled but no ball-query features given")
        h = T.add(h, T.matmul(aug, model.params[f"enc.{stream.name}.u_proj"]))
    return h


def model_forward(model: GaleModel, streams: dict, geom: GeometrySample, neighbor_cache=None) -> dict:
    """Predictions per stream; the shared context is built exactly once."""
    cfg = model.config
    _check_sample(model, streams, geom)
    schedule = cfg.ball_schedule()
    ordered = [streams[s.name] for s in cfg.streams]
    if neighbor_cache is None:
        neighbor_cache = build_neighbor_cache(ordered, geom, schedule)
    ctx = model_context(model, ordered, geom, neighbor_cache)
    outputs = {}
    for spec in cfg.streams:
        stream = streams[spec.name]
        aug = stream_augmentation(model, stream, geom, neighbor_cache)
        outputs[spec.name] = stream_forward(model, stream, ctx, aug, neighbor_cache)
    return outputs


def model_context(model: GaleModel, ordered_streams, geom: GeometrySample, neighbor_cache):
    """The shared context tokens for one sample."""
    return build_context(
        ordered_streams,
        geom,
        model.config.ball_schedule(),
        model.phi,
        model.rho,
        model.embed_p,
        pool_mode=model.config.pool_mode,
        neighbor_lists=neighbor_cache.stream_to_geom,
        packed=neighbor_cache.packed,
    )


def stream_augmentation(model: GaleModel, stream: LocalStream, geom: GeometrySample, neighbor_cache) -> T.Tensor | None:
    """Ball-query augmentation rows for one stream (None when disabled)."""
    if not model.config.augmentation_enabled:
        return None
    return geom_to_input_features(
        stream,
        geom,
        model.config.ball_schedule(),
        model.psi[stream.name],
        neighbor_lists=neighbor_cache.geom_to_stream[stream.name],
        packed=neighbor_cache.packed,
    )


def stream_forward(model: GaleModel, stream: LocalStream, ctx, aug, neighbor_cache) -> T.Tensor:
    """Encode one stream, run its block stack against the context, and head."""
    h = encode_inputs(model, stream, aug, packed=neighbor_cache.packed)
    for block in model.blocks[stream.name]:
        h = gale_block_forward(h, ctx, block)
    head = model.heads[stream.name]
    normed = T.layer_norm(h, head["ln_gamma"], head["ln_beta"], LN_EPS)
    return head["mlp"](normed)


def context_build_count() -> int:
    return ctx_mod.BUILD_CONTEXT_CALLS


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    normalizer: dict | None = None
    step: int = 0


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    """Fixed little-endian binary layout; save -> load -> save is byte-stable."""
    meta = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "normalizer": ckpt.normalizer,
            "step": int(ckpt.step),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    names = ckpt.params.names()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            data = ckpt.params[name].data.astype("<f4").tobytes()
            rows, cols = ckpt.params[name].shape
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<II", rows, cols))
            f.write(data)
            f.write(struct.pack("<I", zlib.crc32(data)))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointCorruptionError(f"truncated checkpoint while reading {what}")
    return data


def checkpoint_load(path) -> Checkpoint:
    """Validate magic and version before reading any tensor data."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "meta length"))
        try:
            meta = json.loads(_read_exact(f, meta_len, "meta block").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointCorruptionError(f"unreadable meta block: {exc}") from exc
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        params = ParamStore()
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(f, 8, f"{name} dims"))
            raw = _read_exact(f, rows * cols * 4, f"{name} data")
            (crc,) = struct.unpack("<I", _read_exact(f, 4, f"{name} checksum"))
            if zlib.crc32(raw) != crc:
                raise CheckpointCorruptionError(f"checksum mismatch in tensor {name!r}")
            data = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
            params.add(name, Tensor(data.astype(np.float32)))
        if f.read(1):
            raise CheckpointCorruptionError("trailing bytes after final tensor")
    config = ModelConfig.from_dict(meta["config"])
    return Checkpoint(config=config, params=params, normalizer=meta["normalizer"], step=meta["step"])


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> GaleModel:
    model = init_model(ckpt.config)
    if dtype is not None:
        model = model.astype(dtype)
    model.params.copy_values_from(ckpt.params)
    return model
