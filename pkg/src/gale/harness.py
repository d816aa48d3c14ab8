"""Verification harness: the frozen tiny-model gradient check, the
neighbor-search benchmark with its brute-force equivalence check, and the
linear-attention timing probe. The CLI and the acceptance suite both call
these, so the checked configurations stay pinned in one place.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .blocks import GaleBlockParams, self_attention_states
from .context import build_neighbor_cache
from .data import CaseSpec, fit_normalizer, generate_case, make_sample
from .model import (
    GaleModel,
    ModelConfig,
    StreamSpec,
    init_model,
    model_context,
    model_forward,
    stream_augmentation,
    stream_forward,
)
from .neighbors import ball_query, build_index
from .tensor import Mlp, ParamStore, Tensor
from .training import TrainConfig, compute_loss

TINY_CONFIG = ModelConfig(
    d_model=32,
    d_c=8,
    d_bq=4,
    d_p=4,
    d_g=3,
    d_x=4,
    L=2,
    m_state=4,
    heads=1,
    ffn_hidden=16,
    head_hidden=8,
    gate_hidden=4,
    schedule=[[0.8, 4], [2.0, 6]],
    streams=[StreamSpec("surface", 4), StreamSpec("volume", 4)],
    query_token_cap=12,
    geom_token_cap=6,
    seed=7,
)

TINY_CASE = CaseSpec(
    kind="sphere",
    semi_axes=(1.0, 1.0, 1.0),
    speed=1.0,
    surface_count=8,
    volume_count=12,
    shell_outer=2.0,
    seed=3,
    case_id="tiny",
)


def tiny_setup(config: ModelConfig = None):
    """Frozen tiny model plus one 8+12-token sample, both in float64."""
    config = config or TINY_CONFIG
    case = generate_case(TINY_CASE)
    normalizer = fit_normalizer([case])
    sample = make_sample(case, config, normalizer)
    with T.using_dtype(np.float64):
        model = init_model(config).astype(np.float64)
    ordered = [sample.streams[s.name] for s in config.streams]
    cache = build_neighbor_cache(ordered, sample.geom, config.ball_schedule())
    return model, sample, cache


def tiny_model_gradcheck(h: float = 1e-5) -> float:
    """Max relative gradient error of a scalar loss through the full model.

    Central differences follow the same staging as the forward pass: the
    loss is a sum of independent per-stream terms given the shared
    context, so a perturbation only re-evaluates the pieces that read the
    perturbed parameter (identical values to a full re-evaluation, since
    the untouched pieces are bit-deterministic and cancel in the
    difference quotient).
    """
    model, sample, cache = tiny_setup()
    train_cfg = TrainConfig(loss="mse", precision="float64")
    stream_names = [s.name for s in model.config.streams]
    ordered = [sample.streams[n] for n in stream_names]

    with T.using_dtype(np.float64):
        model.params.zero_grads()
        preds = model_forward(model, sample.streams, sample.geom, neighbor_cache=cache)
        loss = compute_loss(preds, sample.targets, train_cfg)
        loss.backward()
        analytic = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
            for name, t in model.params.items()
        }

        def context_now():
            return model_context(model, ordered, sample.geom, cache)

        def aug_now(name):
            return stream_augmentation(model, sample.streams[name], sample.geom, cache)

        def term_now(name, ctx, aug) -> float:
            pred = stream_forward(model, sample.streams[name], ctx, aug, cache)
            return compute_loss({name: pred}, {name: sample.targets[name]}, train_cfg).item()

        with T.no_grad():
            base_ctx = context_now()
            base_aug = {n: aug_now(n) for n in stream_names}

            def stages_for(param_name):
                """(needs_context, needs_aug_of, streams_to_redo) per parameter."""
                if param_name.startswith("ctx."):
                    return True, None, stream_names
                for n in stream_names:
                    if param_name.startswith(f"bq.{n}."):
                        return False, n, [n]
                    if param_name.startswith(f"enc.{n}.") or param_name.startswith(f"head.{n}."):
                        return False, None, [n]
                    if param_name.startswith("blk") and f".{n}." in param_name:
                        return False, None, [n]
                raise AssertionError(f"unclassified parameter {param_name}")

            worst = 0.0
            for name, t in model.params.items():
                needs_ctx, aug_stream, redo = stages_for(name)

                def partial_loss() -> float:
                    ctx = context_now() if needs_ctx else base_ctx
                    total = 0.0
                    for n in redo:
                        aug = aug_now(n) if aug_stream == n else base_aug[n]
                        total += term_now(n, ctx, aug)
                    return total

                flat = t.data.reshape(-1)
                ad_flat = analytic[name].reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = partial_loss()
                    flat[i] = orig - h
                    down = partial_loss()
                    flat[i] = orig
                    fd = (up - down) / (2.0 * h)
                    err = abs(ad_flat[i] - fd) / max(1.0, abs(fd))
                    if err > worst:
                        worst = err
            return worst


def neighbor_bench(
    n_points: int = 1000,
    n_queries: int = 100,
    radii=(0.05, 0.15, 0.4),
    caps=(1, 8, 32),
    seed: int = 0,
) -> dict:
    """Indexed-vs-brute equivalence over the full grid of radii and caps."""
    rng = np.random.default_rng(seed)
    targets = rng.uniform(0.0, 1.0, size=(n_points, 3))
    queries = rng.uniform(0.0, 1.0, size=(n_queries, 3))
    total_queries = 0
    start = time.perf_counter()
    all_equal = True
    for radius in radii:
        index = build_index(targets, radius)
        for cap in caps:
            fast = ball_query(index, queries, radius, cap, mode="indexed")
            slow = ball_query(index, queries, radius, cap, mode="brute")
            total_queries += n_queries
            if not fast.equals(slow):
                all_equal = False
    elapsed = time.perf_counter() - start
    return {
        "passed": all_equal,
        "elapsed_s": elapsed,
        "queries_per_sec": total_queries / elapsed if elapsed > 0 else float("inf"),
        "n_points": n_points,
        "n_queries": n_queries,
        "radii": list(radii),
        "caps": list(caps),
    }


def _timing_block(d_model: int, m_state: int, seed: int) -> GaleBlockParams:
    store = ParamStore()
    w_slice = store.create("w_slice", (d_model, m_state), seed)
    w_q = store.create("w_q", (d_model, d_model), seed)
    w_k = store.create("w_k", (d_model, d_model), seed)
    w_v = store.create("w_v", (d_model, d_model), seed)
    dummy = Tensor(np.ones((1, d_model)))
    gate = Mlp([(store.create("g0", (d_model, 1), seed), None, "identity")])
    ffn = Mlp([(store.create("f0", (d_model, d_model), seed), None, "identity")])
    return GaleBlockParams(
        ln1_gamma=dummy,
        ln1_beta=dummy,
        w_slice=w_slice,
        w_q=w_q,
        w_k=w_k,
        w_v=w_v,
        w_qc=w_q,
        w_kc=w_k,
        w_vc=w_v,
        gate=gate,
        ffn=ffn,
        ln2_gamma=dummy,
        ln2_beta=dummy,
    )


def attention_scaling(n_small: int = 4096, n_large: int = 8192, d_model: int = 64, m_state: int = 8, repeats: int = 3) -> dict:
    """Wall-time ratio of state self-attention when token count doubles."""
    block = _timing_block(d_model, m_state, seed=11)
    rng = np.random.default_rng(5)

    def best_time(n_tokens: int) -> float:
        h = Tensor(rng.standard_normal((n_tokens, d_model)).astype(np.float32))
        with T.no_grad():
            self_attention_states(h, block)  # warmup
            best = float("inf")
            for _ in range(repeats):
                start = time.perf_counter()
                self_attention_states(h, block)
                best = min(best, time.perf_counter() - start)
        return best

    t_small = best_time(n_small)
    t_large = best_time(n_large)
    return {
        "n_small": n_small,
        "n_large": n_large,
        "t_small": t_small,
        "t_large": t_large,
        "ratio": t_large / t_small if t_small > 0 else float("inf"),
    }
