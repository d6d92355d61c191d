import numpy as np
import pytest

import esr_forge.autodiff as ad
from esr_forge.autodiff import Parameter, Tensor
from esr_forge.exchange import (
    attention_scale,
    exchange_forward,
    init_exchange_params,
    swap_symmetry_check,
    _exchange_trace,
)


def toy(seed=0, c=4, m=4, h=3, w=3, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params = init_exchange_params(c, m, rng, dtype)
    mk = lambda: Tensor(rng.normal(size=(1, c, h, w)), dtype=dtype)
    return mk(), mk(), mk(), params


class TestAttentionScale:
    def test_rsqrt_hw(self):
        assert attention_scale("rsqrt_hw", 8, 4, 4) == pytest.approx(0.25)

    def test_sqrt_c(self):
        assert attention_scale("sqrt_c", 4, 7, 9) == pytest.approx(2.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            attention_scale("bogus", 4, 4, 4)

    def test_scaling_changes_softmax(self):
        # softmax is not invariant to positive rescaling of a non-constant row
        row = Tensor(np.array([[1.0, 2.0, 3.0]]), dtype=np.float64)
        plain = ad.softmax_lastdim(row).data
        scaled = ad.softmax_lastdim(ad.scale(row, 3.0)).data
        assert not np.allclose(plain, scaled)
        const = Tensor(np.array([[2.0, 2.0]]), dtype=np.float64)
        assert np.allclose(ad.softmax_lastdim(const).data,
                           ad.softmax_lastdim(ad.scale(const, 5.0)).data)


class TestForward:
    def test_output_shapes(self):
        h_a, h_b, carry, params = toy(h=3, w=3)
        a, b, c = exchange_forward(h_a, h_b, carry, params)
        assert a.shape == b.shape == c.shape == (1, 4, 3, 3)

    def test_zeroed_gate_half_mix(self):
        h_a, h_b, carry, params = toy(seed=1)
        for side in (params.side_a, params.side_b):
            for p in (side.gate_self_k, side.gate_self_b, side.gate_cross_k, side.gate_cross_b):
                p.data[...] = 0
        tr = _exchange_trace(h_a, h_b, carry, params, "rsqrt_hw")
        assert np.allclose(tr.out_a.data, 0.5 * tr.local_a.data + 0.5 * tr.msg_a.data, atol=1e-12)
        assert np.allclose(tr.out_b.data, 0.5 * tr.local_b.data + 0.5 * tr.msg_b.data, atol=1e-12)

    def test_attention_rows_convex(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            q = rng.normal(size=(1, 2, 2))
            v = rng.normal(size=(1, 2, 2))
            attn = ad.softmax_lastdim(Tensor(q @ v.swapaxes(1, 2), dtype=np.float64)).data
            out = attn @ v
            brute = np.array([[sum(attn[0, i, j] * v[0, j, k] for j in range(2))
                               for k in range(2)] for i in range(2)])
            assert np.allclose(out[0], brute, atol=1e-12)
            assert (out[0] >= v[0].min(axis=0) - 1e-12).all()
            assert (out[0] <= v[0].max(axis=0) + 1e-12).all()

    def test_attention_rows_sum_to_one(self):
        h_a, h_b, carry, params = toy(seed=3)
        tr = _exchange_trace(h_a, h_b, carry, params, "rsqrt_hw")
        for attn in (tr.attn_a.data, tr.attn_b.data):
            assert np.abs(attn.sum(axis=-1) - 1).max() < 1e-6

    def test_gate_betweenness(self):
        h_a, h_b, carry, params = toy(seed=4)
        tr = _exchange_trace(h_a, h_b, carry, params, "rsqrt_hw")
        lo = np.minimum(tr.local_a.data, tr.msg_a.data) - 1e-12
        hi = np.maximum(tr.local_a.data, tr.msg_a.data) + 1e-12
        assert ((tr.out_a.data >= lo) & (tr.out_a.data <= hi)).all()

    def test_carry_residual_with_zero_conv(self):
        h_a, h_b, carry, params = toy(seed=5)
        params.carry_k.data[...] = 0
        params.carry_b.data[...] = 0
        _, _, carry_out = exchange_forward(h_a, h_b, carry, params)
        assert np.array_equal(carry_out.data, carry.data)

    def test_shape_mismatch_rejected(self):
        h_a, h_b, carry, params = toy(seed=6)
        bad = Tensor(np.zeros((1, 4, 2, 2)), dtype=np.float64)
        with pytest.raises(ValueError):
            exchange_forward(h_a, bad, carry, params)

    def test_scale_modes_differ(self):
        h_a, h_b, carry, params = toy(seed=7)
        a1, _, _ = exchange_forward(h_a, h_b, carry, params, "rsqrt_hw")
        a2, _, _ = exchange_forward(h_a, h_b, carry, params, "sqrt_c")
        assert not np.allclose(a1.data, a2.data)


class TestSwapSymmetry:
    def test_holds_on_random_instances(self):
        for seed in range(5):
            h_a, h_b, carry, params = toy(seed=seed)
            assert swap_symmetry_check(h_a, h_b, carry, params)

    def test_equal_sides_equal_outputs(self):
        rng = np.random.default_rng(20)
        params = init_exchange_params(4, 4, rng, np.float64)
        # share weights between sides and feed identical inputs
        params.side_b = params.side_a
        h = Tensor(rng.normal(size=(1, 4, 3, 3)), dtype=np.float64)
        carry = Tensor(rng.normal(size=(1, 4, 3, 3)), dtype=np.float64)
        a, b, _ = exchange_forward(h, h, carry, params)
        assert np.array_equal(a.data, b.data)

    def test_perturbation_detected(self):
        h_a, h_b, carry, params = toy(seed=8)
        base = exchange_forward(h_a, h_b, carry, params)
        params.side_b.value_k.data[0, 0, 0, 0] += 0.25
        pert = exchange_forward(h_a, h_b, carry, params)
        assert not np.array_equal(base[0].data, pert[0].data)


class TestGradient:
    def test_full_block_gradcheck(self):
        rng = np.random.default_rng(30)
        params = init_exchange_params(4, 4, rng, np.float64)
        h_a = Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
        h_b = Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
        carry = Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)

        def f():
            a, b, c = exchange_forward(h_a, h_b, carry, params)
            sq = lambda t: ad.tensor_sum(ad.mul(t, t))
            return ad.add(ad.add(sq(a), sq(b)), sq(c))

        err = ad.grad_check(f, params.parameters() + [h_a, h_b, carry])
        assert err <= 1e-4
