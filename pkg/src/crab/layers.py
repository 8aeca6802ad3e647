"""Parameterized layers: linear, layer norm, bi-GRU, cross-modal attention,
attention pooling, and the contrastive supervision head.

Layers are pure functions of (params, inputs). Parameters are plain
dataclasses of Tensors so the optimizer can walk them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .errors import ContractError, DegenerateInputError, ShapeError
from .tensor import Tensor


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearParams:
    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> LinearParams:
    return LinearParams(
        weight=_uniform_init(rng, (out_dim, in_dim), in_dim),
        bias=_zeros((out_dim,)),
    )


def init_identity_linear(dim: int) -> LinearParams:
    return LinearParams(
        weight=Tensor(np.eye(dim), requires_grad=True),
        bias=_zeros((dim,)),
    )


def linear(p: LinearParams, x: Tensor) -> Tensor:
    """x @ W^T + b over the trailing dimension."""
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"linear expects trailing dim {p.in_dim}, got {x.shape[-1]}")
    if x.ndim == 1:
        y = tt.matmul(tt.reshape(x, (1, -1)), tt.transpose_last(p.weight))
        return tt.add(tt.reshape(y, (p.out_dim,)), p.bias)
    return tt.add(tt.matmul(x, tt.transpose_last(p.weight)), p.bias)


# ---------------------------------------------------------------------------
# layer norm


@dataclass
class LayerNormParams:
    gain: Tensor  # (dim,)
    shift: Tensor  # (dim,)
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("layer norm epsilon must be positive")

    @property
    def dim(self) -> int:
        return self.gain.shape[0]


def init_layer_norm(dim: int, epsilon: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        gain=Tensor(np.ones(dim), requires_grad=True),
        shift=_zeros((dim,)),
        epsilon=epsilon,
    )


def layer_norm(p: LayerNormParams, x: Tensor) -> Tensor:
    """Zero-mean/unit-variance over the trailing dim (biased variance), then gain/shift."""
    if x.shape[-1] != p.dim:
        raise ShapeError(f"layer_norm expects trailing dim {p.dim}, got {x.shape[-1]}")
    mu = tt.reduce_mean(x, axis=-1, keepdims=True)
    centered = tt.sub(x, mu)
    var = tt.reduce_mean(tt.mul(centered, centered), axis=-1, keepdims=True)
    normed = tt.div(centered, tt.sqrt(tt.add(var, p.epsilon)))
    return tt.add(tt.mul(normed, p.gain), p.shift)


# ---------------------------------------------------------------------------
# bidirectional GRU


@dataclass
class GruDirectionParams:
    w_update: Tensor  # (h, in_dim)
    w_reset: Tensor
    w_candidate: Tensor
    u_update: Tensor  # (h, h)
    u_reset: Tensor
    u_candidate: Tensor
    b_update: Tensor  # (h,)
    b_reset: Tensor
    b_candidate: Tensor

    @property
    def hidden(self) -> int:
        return self.w_update.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_update.shape[1]


@dataclass
class GruParams:
    fwd: GruDirectionParams
    bwd: GruDirectionParams

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    @property
    def in_dim(self) -> int:
        return self.fwd.in_dim


def _init_gru_direction(rng, in_dim: int, hidden: int) -> GruDirectionParams:
    return GruDirectionParams(
        w_update=_uniform_init(rng, (hidden, in_dim), in_dim),
        w_reset=_uniform_init(rng, (hidden, in_dim), in_dim),
        w_candidate=_uniform_init(rng, (hidden, in_dim), in_dim),
        u_update=_uniform_init(rng, (hidden, hidden), hidden),
        u_reset=_uniform_init(rng, (hidden, hidden), hidden),
        u_candidate=_uniform_init(rng, (hidden, hidden), hidden),
        b_update=_zeros((hidden,)),
        b_reset=_zeros((hidden,)),
        b_candidate=_zeros((hidden,)),
    )


def init_gru(rng: np.random.Generator, in_dim: int, hidden: int) -> GruParams:
    return GruParams(
        fwd=_init_gru_direction(rng, in_dim, hidden),
        bwd=_init_gru_direction(rng, in_dim, hidden),
    )


def validate_prefix_mask(mask: np.ndarray) -> np.ndarray:
    """Masks must be 0/1 with all the 1s forming a prefix (right padding)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-D (batch, time), got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask values must be 0 or 1")
    if (np.diff(mask.astype(np.int8), axis=1) > 0).any():
        raise ContractError("mask must be a contiguous prefix of 1s per row")
    return mask


def _gru_sequence(
    xp: Tensor, u_zr_t: Tensor, u_c_t: Tensor, mask: np.ndarray, reverse: bool
) -> Tensor:
    """Fused recurrence over one direction with a hand-rolled BPTT backward.

    ``xp`` carries the precomputed input-side gate projections (B, T, 3h) in
    update/reset/candidate order, biases included. Running the time loop in
    raw numpy inside a single taped op keeps the per-step bookkeeping off the
    tape; the gradient-check harness validates the closed-form backward.
    """
    xp_d, u_zr, u_c = xp.data, u_zr_t.data, u_c_t.data  # (B,T,3h), (h,2h), (h,h)
    batch, steps, three_h = xp_d.shape
    hidden = three_h // 3
    dtype = xp_d.dtype
    mask = mask.astype(dtype)
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    h = np.zeros((batch, hidden), dtype=dtype)
    out = np.zeros((batch, steps, hidden), dtype=dtype)
    saved = []
    for t in order:
        xt = xp_d[:, t, :]
        hu = h @ u_zr
        z = tt._sigmoid_raw(xt[:, :hidden] + hu[:, :hidden])
        r = tt._sigmoid_raw(xt[:, hidden : 2 * hidden] + hu[:, hidden:])
        rh = r * h
        c = np.tanh(xt[:, 2 * hidden :] + rh @ u_c)
        m = mask[:, t : t + 1]
        mz = m * z  # masked update gate: padded steps keep the previous state
        h_prev = h
        h = h + mz * (c - h)  # h_t = (1-z) h_{t-1} + z h~, gated by the mask
        out[:, t, :] = m * h  # padded positions emit exact zeros
        saved.append((t, z, r, c, rh, h_prev, mz, m))

    def backward_fn(g):
        g_xp = np.zeros_like(xp_d)
        g_uzr = np.zeros_like(u_zr)
        g_uc = np.zeros_like(u_c)
        g_h = np.zeros((batch, hidden), dtype=dtype)
        u_zr_T = u_zr.T
        u_c_T = u_c.T
        for t, z, r, c, rh, h_prev, mz, m in reversed(saved):
            g_h = g_h + g[:, t, :] * m
            d_mz = g_h * (c - h_prev)
            d_c = g_h * mz
            g_hp = g_h * (1.0 - mz)
            d_pre_c = d_c * (1.0 - c * c)
            d_rh = d_pre_c @ u_c_T
            g_uc += rh.T @ d_pre_c
            g_hp += d_rh * r
            d_pre_r = (d_rh * h_prev) * r * (1.0 - r)
            d_pre_z = (d_mz * m) * z * (1.0 - z)
            slab = g_xp[:, t, :]
            slab[:, :hidden] = d_pre_z
            slab[:, hidden : 2 * hidden] = d_pre_r
            slab[:, 2 * hidden :] = d_pre_c
            d_hu = np.concatenate([d_pre_z, d_pre_r], axis=1)
            g_hp += d_hu @ u_zr_T
            g_uzr += h_prev.T @ d_hu
            g_h = g_hp
        return (g_xp, g_uzr, g_uc)

    return tt._result(out, (xp, u_zr_t, u_c_t), backward_fn, "gru_sequence")


def _gru_direction(p: GruDirectionParams, x: Tensor, mask: np.ndarray, reverse: bool) -> Tensor:
    # fold the three gates into one input-side projection over all steps
    w_all = tt.concat([p.w_update, p.w_reset, p.w_candidate], axis=0)  # (3h, in)
    b_all = tt.concat([p.b_update, p.b_reset, p.b_candidate], axis=0)
    xp = tt.add(tt.matmul(x, tt.transpose_last(w_all)), b_all)  # (B, T, 3h)
    u_zr_t = tt.transpose_last(tt.concat([p.u_update, p.u_reset], axis=0))  # (h, 2h)
    u_c_t = tt.transpose_last(p.u_candidate)
    return _gru_sequence(xp, u_zr_t, u_c_t, mask, reverse)


def bi_gru(p: GruParams, x: Tensor, mask: np.ndarray) -> Tensor:
    """Run both directions over the valid prefix of each row.

    Returns (B, T, 2h) with forward and backward states concatenated.
    Padded timesteps are exactly zero; the backward direction starts at each
    row's last valid frame (state carries unchanged through the padding).
    """
    if x.ndim != 3:
        raise ShapeError(f"bi_gru expects (batch, time, features), got {x.shape}")
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"bi_gru expects input dim {p.in_dim}, got {x.shape[-1]}")
    mask = validate_prefix_mask(mask)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
    fwd_seq = _gru_direction(p.fwd, x, mask, reverse=False)
    bwd_seq = _gru_direction(p.bwd, x, mask, reverse=True)
    return tt.concat([fwd_seq, bwd_seq], axis=-1)


# ---------------------------------------------------------------------------
# cross-modal attention


@dataclass
class CrossAttentionParams:
    query_proj: Tensor  # (d, d)
    key_proj: Tensor
    value_proj: Tensor
    out_proj: Tensor
    head_count: int = 1

    def __post_init__(self):
        d = self.query_proj.shape[0]
        if self.head_count < 1 or d % self.head_count != 0:
            raise ContractError(
                f"feature dim {d} must be divisible by head count {self.head_count}"
            )

    @property
    def dim(self) -> int:
        return self.query_proj.shape[0]


def init_cross_attention(
    rng: np.random.Generator, dim: int, head_count: int = 1
) -> CrossAttentionParams:
    return CrossAttentionParams(
        query_proj=_uniform_init(rng, (dim, dim), dim),
        key_proj=_uniform_init(rng, (dim, dim), dim),
        value_proj=_uniform_init(rng, (dim, dim), dim),
        out_proj=_uniform_init(rng, (dim, dim), dim),
        head_count=head_count,
    )


def cross_attention(
    p: CrossAttentionParams,
    query_seq: Tensor,
    key_value_seq: Tensor,
    kv_mask: np.ndarray,
) -> Tensor:
    """Scaled dot-product attention of one modality over the other.

    No residual here; the caller owns the residual connection.
    """
    if query_seq.ndim != 3 or key_value_seq.ndim != 3:
        raise ShapeError("cross_attention expects (batch, time, features) sequences")
    d = p.dim
    if query_seq.shape[-1] != d or key_value_seq.shape[-1] != d:
        raise ShapeError(
            f"cross_attention expects feature dim {d}, got "
            f"{query_seq.shape[-1]} / {key_value_seq.shape[-1]}"
        )
    kv_mask = np.asarray(kv_mask)
    if kv_mask.shape != key_value_seq.shape[:2]:
        raise ShapeError("kv_mask shape must match the key/value sequence")
    if (kv_mask.sum(axis=1) == 0).any():
        raise DegenerateInputError("a batch row has every key position masked")

    q = tt.matmul(query_seq, tt.transpose_last(p.query_proj))
    k = tt.matmul(key_value_seq, tt.transpose_last(p.key_proj))
    v = tt.matmul(key_value_seq, tt.transpose_last(p.value_proj))

    head_dim = d // p.head_count
    inv_scale = 1.0 / math.sqrt(head_dim)
    # (B, 1, Tk) additive penalty pushing masked keys to effectively -inf
    penalty = ((kv_mask - 1.0) * tt.MASK_FILL)[:, None, :]

    if p.head_count == 1:
        scores = tt.scale(tt.matmul(q, tt.transpose_last(k)), inv_scale)
        attn = tt.softmax(tt.add(scores, penalty), axis=-1)
        context = tt.matmul(attn, v)
    else:
        batch, tq, _ = q.shape
        tk = k.shape[1]

        def split_heads(x, t):
            x = tt.reshape(x, (batch, t, p.head_count, head_dim))
            return tt.transpose_axes(x, (0, 2, 1, 3))  # (B, H, T, hd)

        qh, kh, vh = split_heads(q, tq), split_heads(k, tk), split_heads(v, tk)
        scores = tt.scale(tt.matmul(qh, tt.transpose_last(kh)), inv_scale)
        attn = tt.softmax(tt.add(scores, penalty[:, None, :, :]), axis=-1)
        context = tt.matmul(attn, vh)  # (B, H, Tq, hd)
        context = tt.reshape(tt.transpose_axes(context, (0, 2, 1, 3)), (batch, tq, d))

    return tt.matmul(context, tt.transpose_last(p.out_proj))


# ---------------------------------------------------------------------------
# attention pooling


@dataclass
class AttentionPoolingParams:
    query: Tensor  # (D,) learned scoring vector

    @property
    def dim(self) -> int:
        return self.query.shape[0]


def init_attention_pooling(rng: np.random.Generator, dim: int) -> AttentionPoolingParams:
    return AttentionPoolingParams(
        query=Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=dim), requires_grad=True)
    )


def attention_pool(
    p: AttentionPoolingParams,
    seq: Tensor,
    mask: np.ndarray,
    return_weights: bool = False,
):
    """Softmax-weighted average of frames, scored against a learned vector.

    Scores are frame . query / sqrt(D); masked frames get zero weight.
    With ``return_weights`` the (detached) per-frame weights come back too.
    """
    if seq.ndim != 3:
        raise ShapeError(f"attention_pool expects (batch, time, features), got {seq.shape}")
    if seq.shape[-1] != p.dim:
        raise ShapeError(f"attention_pool expects feature dim {p.dim}, got {seq.shape[-1]}")
    mask = np.asarray(mask)
    if mask.shape != seq.shape[:2]:
        raise ShapeError("mask shape must match the sequence")
    if (mask.sum(axis=1) == 0).any():
        raise DegenerateInputError("a batch row has no valid frames to pool")

    scores = tt.scale(
        tt.reduce_sum(tt.mul(seq, p.query), axis=-1), 1.0 / math.sqrt(p.dim)
    )  # (B, T)
    penalty = (mask - 1.0) * tt.MASK_FILL
    weights = tt.softmax(tt.add(scores, penalty), axis=-1)
    batch, steps = weights.shape
    pooled = tt.reduce_sum(tt.mul(seq, tt.reshape(weights, (batch, steps, 1))), axis=1)
    if return_weights:
        return pooled, weights.data.copy()
    return pooled


# ---------------------------------------------------------------------------
# contrastive supervision head


@dataclass
class CslParams:
    fc1: LinearParams
    fc2: LinearParams

    def __post_init__(self):
        if self.fc1.out_dim != self.fc2.in_dim:
            raise ContractError("CSL fc1 output dim must equal fc2 input dim")


def init_csl(rng: np.random.Generator, in_dim: int, embed_dim: int) -> CslParams:
    # hidden width matches the input width; only the head shape is fixed
    return CslParams(
        fc1=init_linear(rng, in_dim, in_dim),
        fc2=init_linear(rng, in_dim, embed_dim),
    )


def csl_forward(p: CslParams, x: Tensor) -> Tensor:
    """Project a pooled representation into the contrastive embedding space.

    Output is NOT l2-normalized; the contrastive losses own normalization.
    """
    if x.ndim != 2:
        raise ShapeError(f"csl_forward expects (batch, features), got {x.shape}")
    return linear(p.fc2, tt.relu(linear(p.fc1, x)))
