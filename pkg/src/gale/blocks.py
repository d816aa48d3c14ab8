"""The GALE block: state slicing, state self-attention, context cross-
attention, sigmoid-gated mixing, and the feed-forward residual.

Tokens are soft-assigned to a small set of latent state rows with
row-stochastic weights; attention runs among the states (never over
tokens), and results are redistributed to tokens with the same weights,
keeping cost linear in token count. Cross-attention reads the shared
context tokens; a scalar gate per (layer, stream) blends the two paths.
"""

from __future__ import annotations

from dataclasses import dataclass


from . import tensor as T
from .context import ContextTokens
from .errors import ShapeError

SLICE_EPS = 1e-8
LN_EPS = 1e-5


@dataclass
class PhysicsStateSlices:
    """Row-stochastic token-to-state weights and the aggregated state rows."""

    weights: T.Tensor  # (N, M_state)
    states: T.Tensor  # (M_state, d_model)


@dataclass
class GaleBlockParams:
    """All learnables of one block for one (layer, stream) pair."""

    ln1_gamma: T.Tensor
    ln1_beta: T.Tensor
    w_slice: T.Tensor  # (d_model, M_state)
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    w_qc: T.Tensor  # (d_model, d_model)
    w_kc: T.Tensor  # (d_c, d_model)
    w_vc: T.Tensor  # (d_c, d_model)
    gate: T.Mlp  # (d_model + d_c) -> 1 logit
    ffn: T.Mlp  # d_model -> d_model
    ln2_gamma: T.Tensor
    ln2_beta: T.Tensor
    heads: int = 1
    attn_residual: bool = True

    def tensors(self):
        out = {
            "ln1_gamma": self.ln1_gamma,
            "ln1_beta": self.ln1_beta,
            "w_slice": self.w_slice,
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "w_qc": self.w_qc,
            "w_kc": self.w_kc,
            "w_vc": self.w_vc,
            "ln2_gamma": self.ln2_gamma,
            "ln2_beta": self.ln2_beta,
        }
        for i, (w, b, _) in enumerate(self.gate.layers):
            out[f"gate.w{i}"] = w
            if b is not None:
                out[f"gate.b{i}"] = b
        for i, (w, b, _) in enumerate(self.ffn.layers):
            out[f"ffn.w{i}"] = w
            if b is not None:
                out[f"ffn.b{i}"] = b
        return out


def slice_project(h: T.Tensor, w_slice: T.Tensor, eps: float = SLICE_EPS) -> PhysicsStateSlices:
    """Soft-assign tokens to states and aggregate weighted token rows.

    weights = row-softmax(h @ w_slice); state k is the weight-normalized
    mean of token rows, denominator guarded by eps.
    """
    if h.shape[1] != w_slice.shape[0]:
        raise ShapeError(f"slice projection expects width {w_slice.shape[0]}, got {h.shape[1]}")
    weights = T.row_softmax(T.matmul(h, w_slice))
    states = T.slice_aggregate(weights, h, eps)
    return PhysicsStateSlices(weights=weights, states=states)


def deslice(slices: PhysicsStateSlices, z_new: T.Tensor) -> T.Tensor:
    """Redistribute state rows to tokens with the original weights."""
    if z_new.shape[0] != slices.weights.shape[1]:
        raise ShapeError(
            f"deslice expects {slices.weights.shape[1]} state rows, got {z_new.shape[0]}"
        )
    return T.matmul(slices.weights, z_new)


def self_attention_states(h: T.Tensor, params: GaleBlockParams) -> T.Tensor:
    """Slice, attend among the M_state state rows, de-slice.

    Cost is O(N * M_state + M_state^2); token-token attention never forms.
    """
    if params.heads == 1:
        return T.state_attention(h, params.w_slice, params.w_q, params.w_k, params.w_v, SLICE_EPS)
    slices = slice_project(h, params.w_slice)
    z = slices.states
    attended = T.multi_head_attention(
        T.matmul(z, params.w_q), T.matmul(z, params.w_k), T.matmul(z, params.w_v), params.heads
    )
    return deslice(slices, attended)


def cross_attention_context(h: T.Tensor, ctx: ContextTokens, params: GaleBlockParams) -> T.Tensor:
    """Tokens query the context rows: Attn(h Wqc, C Wkc, C Wvc)."""
    c = ctx.tokens
    if c.shape[0] < 1:
        raise ShapeError("context must have at least one token")
    if params.heads == 1:
        return T.projected_cross_attention(h, c, params.w_qc, params.w_kc, params.w_vc)
    return T.multi_head_attention(
        T.matmul(h, params.w_qc), T.matmul(c, params.w_kc), T.matmul(c, params.w_vc), params.heads
    )


def adaptive_gate_mix(sa: T.Tensor, ca: T.Tensor, ctx: ContextTokens, gate: T.Mlp):
    """Scalar gate from pooled self-attention output and pooled context.

    alpha = sigmoid(gate([mean(sa), mean(C)])); the mix is
    (1 - alpha) * sa + alpha * ca. Returns (alpha, mixed).
    """
    if sa.shape != ca.shape:
        raise ShapeError(f"gate mix: {sa.shape} vs {ca.shape}")
    pooled = T.mean_concat(sa, ctx.tokens)
    alpha = T.sigmoid(gate(pooled))
    if alpha.shape != (1, 1):
        raise ShapeError(f"gating network must emit one logit, got {alpha.shape}")
    return alpha, T.convex_mix(alpha, sa, ca)


def ffn_residual(h_hat: T.Tensor, params: GaleBlockParams) -> T.Tensor:
    """h_hat + FFN(LN(h_hat)); shape preserved."""
    normed = T.layer_norm(h_hat, params.ln2_gamma, params.ln2_beta, LN_EPS)
    return T.add(h_hat, params.ffn(normed))


def gale_block_forward(h: T.Tensor, ctx: ContextTokens, params: GaleBlockParams) -> T.Tensor:
    """One full block: norm, state attention, context attention, gate, FFN.

    With attn_residual the gated attention mix is added to the block input
    (the backbone convention this layer modifies); without it the mix
    replaces the token state outright.
    """
    hn = T.layer_norm(h, params.ln1_gamma, params.ln1_beta, LN_EPS)
    sa = self_attention_states(hn, params)
    ca = cross_attention_context(hn, ctx, params)
    _, mixed = adaptive_gate_mix(sa, ca, ctx, params.gate)
    if params.attn_residual:
        mixed = T.add(h, mixed)
    return ffn_residual(mixed, params)
