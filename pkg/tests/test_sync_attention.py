import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabdiff.geometry import EpipolarMask, pseudo_epipolar_mask
from collabdiff.sync_attention import (
    SyncModuleWeights,
    apply_sync,
    attention_op,
    attention_weights,
    directional_fd_error,
    grad_check,
    load_weights,
    masked_cross_attention,
    masked_softmax,
    save_weights,
    silu,
)


def naive_attention(zq, zkv, w, bits):
    """Per-query Python loop, independent of the vectorized path."""
    hq, wq, dim = zq.shape
    keys = zkv.reshape(-1, dim)
    a = w.dim_attn
    out = np.zeros((hq * wq, dim))
    for qi, zrow in enumerate(zq.reshape(-1, dim)):
        q = [sum(zrow[c] * w.W_Q[c, j] for c in range(dim)) for j in range(a)]
        logits = {}
        for ki in range(len(keys)):
            if bits[qi, ki]:
                k = [sum(keys[ki, c] * w.W_K[c, j] for c in range(dim)) for j in range(a)]
                logits[ki] = sum(x * y for x, y in zip(q, k)) / math.sqrt(a)
        att = [0.0] * a
        if logits:
            m = max(logits.values())
            z = sum(math.exp(l - m) for l in logits.values())
            for ki, l in logits.items():
                p = math.exp(l - m) / z
                for j in range(a):
                    att[j] += p * sum(keys[ki, c] * w.W_V[c, j] for c in range(dim))
        if w.use_ff:
            h = [sum(att[i] * w.W1[i, j] for i in range(a)) + w.b1[j] for j in range(4 * a)]
            g = [x / (1 + math.exp(-x)) for x in h]
            y = [sum(g[i] * w.W2[i, j] for i in range(4 * a)) + w.b2[j] for j in range(dim)]
        else:
            y = att
        out[qi] = np.array(y) * w.out_scale
    return out.reshape(hq, wq, dim)


def random_mask(rng, qres, kres, p=0.4):
    bits = rng.random((qres[0] * qres[1], kres[0] * kres[1])) < p
    return EpipolarMask(qres, kres, bits, tau=3.0)


def frames(rng, res, dim):
    return rng.normal(size=(*res, dim))


class TestForward:
    def test_naive_oracle_six(self, rng):
        w = SyncModuleWeights.init(8, 8, rng, bias_scale=0.1)
        zq, zk = frames(rng, (6, 6), 8), frames(rng, (6, 6), 8)
        m = random_mask(rng, (6, 6), (6, 6))
        np.testing.assert_allclose(masked_cross_attention(zq, zk, w, m), naive_attention(zq, zk, w, m.bits), atol=1e-6)

    def test_all_small_grids(self):
        rng = np.random.default_rng(0)
        w = SyncModuleWeights.init(3, 2, rng, bias_scale=0.2)
        worst = 0.0
        for h in range(1, 9):
            for wd in range(1, 9):
                zq, zk = frames(rng, (h, wd), 3), frames(rng, (h, wd), 3)
                m = random_mask(rng, (h, wd), (h, wd), p=rng.uniform(0.05, 0.9))
                fast = masked_cross_attention(zq, zk, w, m)
                worst = max(worst, np.abs(fast - naive_attention(zq, zk, w, m.bits)).max())
        assert worst < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(hq=st.integers(1, 5), wq=st.integers(1, 5), hk=st.integers(1, 5), wk=st.integers(1, 5), seed=st.integers(0, 2**31))
    def test_rectangular_masks(self, hq, wq, hk, wk, seed):
        rng = np.random.default_rng(seed)
        w = SyncModuleWeights.init(4, 3, rng, bias_scale=0.1)
        zq, zk = frames(rng, (hq, wq), 4), frames(rng, (hk, wk), 4)
        m = random_mask(rng, (hq, wq), (hk, wk))
        np.testing.assert_allclose(masked_cross_attention(zq, zk, w, m), naive_attention(zq, zk, w, m.bits), atol=1e-6)

    def test_singleton_mask(self, rng):
        w = SyncModuleWeights.init(4, 4, rng, use_ff=False)
        zq, zk = frames(rng, (3, 3), 4), frames(rng, (3, 3), 4)
        target = rng.integers(0, 9, size=9)
        bits = np.zeros((9, 9), bool)
        bits[np.arange(9), target] = True
        out = masked_cross_attention(zq, zk, w, EpipolarMask((3, 3), (3, 3), bits, 3.0)).reshape(9, 4)
        np.testing.assert_array_equal(out, zk.reshape(9, 4)[target] @ w.W_V)

    def test_identical_values(self, rng):
        w = SyncModuleWeights.init(4, 4, rng, use_ff=False)
        zq = frames(rng, (3, 3), 4)
        zk = np.broadcast_to(rng.normal(size=4), (3, 3, 4)).copy()
        m = random_mask(rng, (3, 3), (3, 3), p=0.5)
        m.bits[:, 0] = True  # no empty rows
        out = masked_cross_attention(zq, zk, w, m).reshape(9, 4)
        np.testing.assert_allclose(out, np.broadcast_to(zk[0, 0] @ w.W_V, (9, 4)), atol=1e-14)

    def test_empty_rows_are_zero(self, rng):
        w = SyncModuleWeights.init(4, 4, rng, use_ff=False)
        zq, zk = frames(rng, (2, 2), 4), frames(rng, (2, 2), 4)
        bits = np.ones((4, 4), bool)
        bits[2] = False
        out = masked_cross_attention(zq, zk, w, EpipolarMask((2, 2), (2, 2), bits, 3.0)).reshape(4, 4)
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out[2], 0.0)

    def test_shape_errors(self, rng):
        w = SyncModuleWeights.init(4, 4, rng)
        m = random_mask(rng, (2, 2), (2, 2))
        with pytest.raises(ValueError):
            masked_cross_attention(frames(rng, (2, 3), 4), frames(rng, (2, 2), 4), w, m)
        with pytest.raises(ValueError):
            masked_cross_attention(frames(rng, (2, 2), 5), frames(rng, (2, 2), 5), w, m)

    def test_weight_shape_validation(self, rng):
        w = SyncModuleWeights.init(4, 2, rng)
        with pytest.raises(ValueError):
            w.with_params((w.W_Q, w.W_K, w.W_V[:, :1], w.W1, w.b1, w.W2, w.b2))
        with pytest.raises(ValueError):
            SyncModuleWeights.init(4, 2, rng, use_ff=False)


class TestSoftmax:
    def test_rows_and_masked_zero(self, rng):
        logits = rng.normal(size=(6, 9)) * 5
        bits = rng.random((6, 9)) < 0.5
        bits[:, 0] = True
        P = masked_softmax(logits, bits)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(P[~bits] == 0.0)

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=(5, 7))
        bits = rng.random((5, 7)) < 0.6
        shift = rng.normal(size=(5, 1)) * 100
        np.testing.assert_allclose(masked_softmax(logits + shift, bits), masked_softmax(logits, bits), atol=1e-14)

    def test_attention_rows(self, rng):
        w = SyncModuleWeights.init(4, 3, rng)
        m = random_mask(rng, (3, 3), (3, 3))
        P = attention_weights(frames(rng, (3, 3), 4), frames(rng, (3, 3), 4), w, m)
        sums = P.sum(axis=1)
        np.testing.assert_allclose(sums[m.bits.any(axis=1)], 1.0, atol=1e-14)
        np.testing.assert_array_equal(sums[~m.bits.any(axis=1)], 0.0)


class TestResidual:
    def test_zero_branch_identity(self, rng):
        w = SyncModuleWeights.init(4, 4, rng, zero_output=True)
        za, zb = frames(rng, (4, 4), 4), frames(rng, (4, 4), 4)
        m = random_mask(rng, (4, 4), (4, 4))
        ya, yb = apply_sync(za, zb, w, m, m)
        np.testing.assert_array_equal(ya, za)
        np.testing.assert_array_equal(yb, zb)

    def test_empty_masks_identity(self, rng):
        w = SyncModuleWeights.init(4, 4, rng)  # zero biases by default
        za, zb = frames(rng, (3, 3), 4), frames(rng, (3, 3), 4)
        m = EpipolarMask((3, 3), (3, 3), np.zeros((9, 9), bool), 3.0)
        ya, yb = apply_sync(za, zb, w, m, m)
        np.testing.assert_array_equal(ya, za)
        np.testing.assert_array_equal(yb, zb)

    def test_empty_masks_with_bias(self, rng):
        w = SyncModuleWeights.init(4, 4, rng, bias_scale=1.0)
        za = frames(rng, (2, 2), 4)
        m = EpipolarMask((2, 2), (2, 2), np.zeros((4, 4), bool), 3.0)
        ya, _ = apply_sync(za, za, w, m, m)
        np.testing.assert_allclose(ya - za, np.broadcast_to(silu(w.b1) @ w.W2 + w.b2, za.shape), atol=1e-14)

    def test_swap_symmetry(self, rng):
        # identical poses: one pseudo mask (always containing the query's own cell) for both directions
        m = pseudo_epipolar_mask((4, 4), 3.0, rng)
        assert np.all(np.diag(m.bits))
        w = SyncModuleWeights.init(4, 4, rng, bias_scale=0.1)
        za, zb = frames(rng, (4, 4), 4), frames(rng, (4, 4), 4)
        ya, yb = apply_sync(za, zb, w, m, m)
        xb, xa = apply_sync(zb, za, w, m, m)
        np.testing.assert_array_equal(ya, xa)
        np.testing.assert_array_equal(yb, xb)
        same_a, same_b = apply_sync(za, za, w, m, m)
        np.testing.assert_array_equal(same_a, same_b)

    def test_separate_reverse_weights(self, rng):
        w, w2 = SyncModuleWeights.init(4, 4, rng), SyncModuleWeights.init(4, 4, rng)
        za, zb = frames(rng, (2, 2), 4), frames(rng, (2, 2), 4)
        m = random_mask(rng, (2, 2), (2, 2), p=0.7)
        ya, yb = apply_sync(za, zb, w, m, m, w_ba=w2)
        np.testing.assert_array_equal(ya, za + masked_cross_attention(za, zb, w, m))
        np.testing.assert_array_equal(yb, zb + masked_cross_attention(zb, za, w2, m))


def op_inputs(rng, res, dim, dim_attn, use_ff=True):
    w = SyncModuleWeights.init(dim, dim_attn, rng, use_ff=use_ff, bias_scale=0.1)
    return [frames(rng, res, dim), frames(rng, res, dim), *w.params()]


class TestGradients:
    def test_linear_case(self, rng):
        bits = np.zeros((16, 16), bool)
        bits[np.arange(16), rng.integers(0, 16, 16)] = True
        m = EpipolarMask((4, 4), (4, 4), bits, 3.0)
        assert grad_check(attention_op(m, use_ff=False), op_inputs(rng, (4, 4), 4, 4, use_ff=False)) < 1e-8

    def test_full_module(self, rng):
        m = random_mask(rng, (4, 4), (4, 4), p=0.5)
        assert grad_check(attention_op(m), op_inputs(rng, (4, 4), 4, 4), eps=1e-4) < 1e-3

    def test_full_module_out_scale_and_empty_rows(self, rng):
        bits = rng.random((9, 6)) < 0.5
        bits[4] = False
        m = EpipolarMask((3, 3), (2, 3), bits, 3.0)
        inputs = op_inputs(rng, (3, 3), 3, 2)
        inputs[1] = frames(rng, (2, 3), 3)
        assert grad_check(attention_op(m, out_scale=0.7), inputs) < 1e-3

    def test_second_order_convergence(self, rng):
        m = random_mask(rng, (3, 3), (3, 3), p=0.6)
        inputs = op_inputs(rng, (3, 3), 4, 4)
        direction = [rng.normal(size=np.shape(x)) for x in inputs]
        op = attention_op(m)
        errs = [directional_fd_error(op, inputs, direction, eps) for eps in (1e-3, 5e-4, 2.5e-4)]
        ratios = [a / b for a, b in zip(errs, errs[1:])]
        assert all(3.0 < r < 5.0 for r in ratios), (errs, ratios)


def test_weights_csv_round_trip(tmp_path, rng):
    w = SyncModuleWeights.init(3, 2, rng, bias_scale=0.3)
    save_weights(tmp_path / "w.csv", w)
    v = load_weights(tmp_path / "w.csv")
    for a, b in zip(w.params(), v.params()):
        np.testing.assert_array_equal(a, b)
    assert v.use_ff and v.out_scale == 1.0
    assert (tmp_path / "w.csv").read_text().startswith("# W_Q:3x2\n")
