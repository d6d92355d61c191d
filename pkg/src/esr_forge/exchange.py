"""Bilateral feature exchange between two streams.

Each side builds a query from the shared carry map fused with its own
features; the other side's features are clustered into value/key slots.
Channel-wise attention (slots x slots, softmax over the last axis) pulls
the other side's global structure across, a sigmoid gate mixes it with a
locally convolved residual, and the carry map is updated from both
queries with an additive skip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    concat_channels,
    conv2d,
    layer_norm_channels,
    matmul_batched,
    mul,
    no_grad,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    sub,
    transpose_last2,
)

SCALE_MODES = ("rsqrt_hw", "sqrt_c")


def attention_scale(mode: str, c: int, h: int, w: int) -> float:
    """Multiplicative factor applied to the score matrix before softmax."""
    if mode == "rsqrt_hw":
        return 1.0 / math.sqrt(h * w)
    if mode == "sqrt_c":
        return math.sqrt(c)
    raise ValueError(f"unknown attention scale mode {mode!r}")


def conv_param(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> tuple[Parameter, Parameter]:
    """Uniform(-b, b) kernel with b = sqrt(6 / fan_in); zero bias."""
    bound = math.sqrt(6.0 / (cin * k * k))
    kernel = Parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)), dtype=dtype)
    bias = Parameter(np.zeros(cout), dtype=dtype)
    return kernel, bias


@dataclass
class ExchangeSide:
    """Per-side weights: local residual, query path, value path, message
    projection and the two gate convs of the receiving end."""

    residual_k: Parameter
    residual_b: Parameter
    fuse_k: Parameter  # 3x3, 2C -> C, fuses carry with own features
    fuse_b: Parameter
    ln_gamma: Parameter
    ln_beta: Parameter
    query_k: Parameter  # 1x1, C -> M
    query_b: Parameter
    value_k: Parameter  # 1x1, C -> M
    value_b: Parameter
    out_k: Parameter  # 1x1, M -> C, projects the incoming message
    out_b: Parameter
    gate_self_k: Parameter  # 1x1, C -> C
    gate_self_b: Parameter
    gate_cross_k: Parameter  # 1x1, C -> C
    gate_cross_b: Parameter


@dataclass
class ExchangeParams:
    side_a: ExchangeSide
    side_b: ExchangeSide
    carry_k: Parameter  # 3x3, 2M -> C, consumes concat(Q_a, Q_b)
    carry_b: Parameter

    def swapped(self) -> "ExchangeParams":
        return ExchangeParams(self.side_b, self.side_a, self.carry_k, self.carry_b)

    def parameters(self) -> list[Parameter]:
        out = []
        for side in (self.side_a, self.side_b):
            out.extend(getattr(side, f.name) for f in side.__dataclass_fields__.values())
        out.extend([self.carry_k, self.carry_b])
        return out


def init_exchange_params(c: int, m: int, rng: np.random.Generator, dtype=np.float32) -> ExchangeParams:
    def side():
        rk, rb = conv_param(rng, c, c, 3, dtype)
        fk, fb = conv_param(rng, c, 2 * c, 3, dtype)
        gamma = Parameter(np.ones(c), dtype=dtype)
        beta = Parameter(np.zeros(c), dtype=dtype)
        qk, qb = conv_param(rng, m, c, 1, dtype)
        vk, vb = conv_param(rng, m, c, 1, dtype)
        ok, ob = conv_param(rng, c, m, 1, dtype)
        g1k, g1b = conv_param(rng, c, c, 1, dtype)
        g2k, g2b = conv_param(rng, c, c, 1, dtype)
        return ExchangeSide(rk, rb, fk, fb, gamma, beta, qk, qb, vk, vb, ok, ob, g1k, g1b, g2k, g2b)

    a = side()
    b = side()
    ck, cb = conv_param(rng, c, 2 * m, 3, dtype)
    return ExchangeParams(a, b, ck, cb)


def _query_map(side: ExchangeSide, carry: Tensor, h: Tensor) -> Tensor:
    fused = conv2d(concat_channels([carry, h]), side.fuse_k, side.fuse_b)
    return conv2d(layer_norm_channels(fused, side.ln_gamma, side.ln_beta), side.query_k, side.query_b)


def _gated_mix(side: ExchangeSide, own: Tensor, message: Tensor) -> tuple[Tensor, Tensor]:
    local = conv2d(own, side.residual_k, side.residual_b)
    z = sigmoid(add(conv2d(local, side.gate_self_k, side.gate_self_b),
                    conv2d(message, side.gate_cross_k, side.gate_cross_b)))
    # z*local + (1-z)*message, written with one temporary fewer
    return local, add(message, mul(z, sub(local, message)))


@dataclass
class ExchangeTrace:
    """Intermediates of one exchange step, for verification."""

    q_a: Tensor  # (B, M, H, W) query maps
    q_b: Tensor
    attn_a: Tensor  # (B, M, M) attention rows pulling into each side
    attn_b: Tensor
    local_a: Tensor  # residual-conv branches
    local_b: Tensor
    msg_a: Tensor  # projected messages arriving at each side
    msg_b: Tensor
    out_a: Tensor
    out_b: Tensor
    out_carry: Tensor


def _exchange_trace(h_a: Tensor, h_b: Tensor, carry: Tensor, params: ExchangeParams,
                    scale_mode: str) -> ExchangeTrace:
    if h_a.shape != h_b.shape or h_a.shape != carry.shape:
        raise ValueError(f"side/carry shapes differ: {h_a.shape}, {h_b.shape}, {carry.shape}")
    b, c, hh, ww = h_a.shape
    m = params.side_a.query_k.shape[0]
    factor = attention_scale(scale_mode, c, hh, ww)

    q_a = _query_map(params.side_a, carry, h_a)  # (B, M, H, W)
    q_b = _query_map(params.side_b, carry, h_b)
    v_a = reshape(conv2d(h_a, params.side_a.value_k, params.side_a.value_b), (b, m, hh * ww))
    v_b = reshape(conv2d(h_b, params.side_b.value_k, params.side_b.value_b), (b, m, hh * ww))

    def pull(side: ExchangeSide, q_map: Tensor, v_other: Tensor) -> tuple[Tensor, Tensor]:
        q = reshape(q_map, (b, m, hh * ww))
        attn = softmax_lastdim(scale(matmul_batched(q, transpose_last2(v_other)), factor))
        pulled = reshape(matmul_batched(attn, v_other), (b, m, hh, ww))
        return attn, conv2d(pulled, side.out_k, side.out_b)

    attn_a, msg_a = pull(params.side_a, q_a, v_b)
    attn_b, msg_b = pull(params.side_b, q_b, v_a)
    local_a, out_a = _gated_mix(params.side_a, h_a, msg_a)
    local_b, out_b = _gated_mix(params.side_b, h_b, msg_b)
    out_carry = add(conv2d(concat_channels([q_a, q_b]), params.carry_k, params.carry_b), carry)
    return ExchangeTrace(q_a, q_b, attn_a, attn_b, local_a, local_b, msg_a, msg_b,
                         out_a, out_b, out_carry)


def exchange_forward(h_a: Tensor, h_b: Tensor, carry: Tensor, params: ExchangeParams,
                     scale_mode: str = "rsqrt_hw") -> tuple[Tensor, Tensor, Tensor]:
    """One exchange step; returns (next h_a, next h_b, next carry)."""
    tr = _exchange_trace(h_a, h_b, carry, params, scale_mode)
    return tr.out_a, tr.out_b, tr.out_carry


def swap_symmetry_check(h_a: Tensor, h_b: Tensor, carry: Tensor, params: ExchangeParams,
                        scale_mode: str = "rsqrt_hw") -> bool:
    """True iff swapping the sides (features and weight bundles together)
    swaps the side outputs exactly; the carry is compared against a
    mirrored-concat recomputation since its conv reads (Q_first, Q_second).
    """
    with no_grad():
        out_a, out_b, _ = exchange_forward(h_a, h_b, carry, params, scale_mode)
        sw_a, sw_b, sw_carry = exchange_forward(h_b, h_a, carry, params.swapped(), scale_mode)
        q_a = _query_map(params.side_a, carry, h_a)
        q_b = _query_map(params.side_b, carry, h_b)
        mirrored = add(conv2d(concat_channels([q_b, q_a]), params.carry_k, params.carry_b), carry)
    return (
        np.array_equal(sw_a.data, out_b.data)
        and np.array_equal(sw_b.data, out_a.data)
        and np.array_equal(sw_carry.data, mirrored.data)
    )


