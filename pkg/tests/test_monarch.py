import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmonarch.errors import DimensionError, DomainError, StateError
from vmonarch.flash_entropy import TileConfig
from vmonarch.monarch import (
    IterState,
    MonarchConfig,
    MonarchFactors,
    apply_factors,
    init_state,
    l_update,
    monarch_attention,
    r_update,
)
from vmonarch.oracles import dense_attention, materialize_monarch, monarch_objective
from vmonarch.tensor_core import block_cols, block_rows, count_macs, row_softmax
from vmonarch.video import monarch_macs

from .conftest import randn


def loop_r_update(aR, cR, K, clamp):
    m, b, d = aR.shape
    R = np.zeros((m, b, b))
    aL = np.zeros((b, m, d))
    cL = np.zeros((b, m))
    for k in range(m):
        for i in range(b):
            c = max(cR[k, i], clamp)
            z = [sum(aR[k, i, v] * K[k * b + l, v] for v in range(d)) / c for l in range(b)]
            mx = max(z)
            w = [math.exp(x - mx) for x in z]
            R[k, i] = [x / sum(w) for x in w]
            for l in range(b):
                aL[i, k] += R[k, i, l] * K[k * b + l]
                if R[k, i, l] > 0:
                    cL[i, k] += R[k, i, l] * math.log(R[k, i, l])
    return R, aL, cL


def loop_l_update(aL, cL, Q):
    b, m, d = aL.shape
    L = np.zeros((b, m, m))
    aR = np.zeros((m, b, d))
    cR = np.zeros((m, b))
    for i in range(b):
        for j in range(m):
            z = [sum(aL[i, k, v] * Q[j * b + i, v] for v in range(d)) - cL[i, k] for k in range(m)]
            mx = max(z)
            w = [math.exp(x - mx) for x in z]
            L[i, j] = [x / sum(w) for x in w]
    for k in range(m):
        for i in range(b):
            cR[k, i] = sum(L[i, j, k] for j in range(m))
            aR[k, i] = sum(L[i, j, k] * Q[j * b + i] for j in range(m))
    return L, aR, cR


def qkv(rng, n, d):
    return randn(rng, n, d), randn(rng, n, d), randn(rng, n, d)


class TestInit:
    def test_reshape(self):
        st_ = init_state(np.arange(6.0).reshape(6, 1), MonarchConfig(2, 3))
        assert st_.aR.tolist() == [[[0], [1], [2]], [[3], [4], [5]]]
        np.testing.assert_array_equal(st_.cR, np.ones((2, 3)))
        assert st_.aL is None and st_.cL is None

    def test_zero_iters_rejected(self):
        with pytest.raises(DomainError):
            MonarchConfig(2, 3, iters=0)

    def test_nan_rejected(self):
        q = np.zeros((6, 1))
        q[2] = np.nan
        with pytest.raises(DomainError):
            init_state(q, MonarchConfig(2, 3))

    def test_bad_factorization(self):
        with pytest.raises(DimensionError):
            init_state(np.zeros((7, 2)), MonarchConfig(2, 3))


class TestRUpdate:
    def test_first_call_is_per_block_softmax(self, rng):
        m, b = 3, 5
        Q, K, _ = qkv(rng, m * b, 4)
        cfg = MonarchConfig(m, b)
        R, _, _ = r_update(init_state(Q, cfg), block_rows(K, m, b), cfg)
        for k in range(m):
            blk = slice(k * b, (k + 1) * b)
            np.testing.assert_allclose(R[k], row_softmax(Q[blk] @ K[blk].T), atol=1e-12)

    def test_m_one_is_dense_map(self, rng):
        Q, K, V = qkv(rng, 9, 3)
        cfg = MonarchConfig(1, 9)
        R, _, _ = r_update(init_state(Q, cfg), block_rows(K, 1, 9), cfg)
        np.testing.assert_allclose(R[0], dense_attention(Q, K, V, scale=False).probs, atol=1e-12)

    def test_identical_keys_uniform(self, rng):
        m, b = 2, 4
        K = randn(rng, m * b, 3)
        K[:b] = K[0]
        cfg = MonarchConfig(m, b)
        R, _, cL = r_update(init_state(randn(rng, m * b, 3), cfg), block_rows(K, m, b), cfg)
        np.testing.assert_allclose(R[0], 1 / b, atol=1e-12)
        np.testing.assert_allclose(cL[:, 0], -math.log(b), atol=1e-12)

    @pytest.mark.parametrize("clamp", [True, False])
    def test_matches_loop_oracle(self, clamp):
        rng = np.random.default_rng(34)
        m, b, d = 3, 4, 2
        K = randn(rng, m * b, d)
        state = IterState(aR=randn(rng, m, b, d), cR=rng.uniform(0.01, 2.0, (m, b)))
        cfg = MonarchConfig(m, b, clamp_enabled=clamp, clamp_min=0.3)
        ref = loop_r_update(state.aR, state.cR, K, 0.3 if clamp else 0.0)
        got = r_update(state, block_rows(K, m, b), cfg)
        for g, r in zip(got, ref):
            assert np.max(np.abs(g - r)) < 1e-10
        assert state.aL is got[1] and state.cL is got[2]

    def test_streamed_matches_materialized(self):
        rng = np.random.default_rng(35)
        m, b, d = 3, 20, 4
        K = randn(rng, m * b, d)
        aR, cR = randn(rng, m, b, d), rng.uniform(0.05, 2.0, (m, b))
        cfg = MonarchConfig(m, b, tiles=TileConfig(6, 7))
        a = r_update(IterState(aR, cR), block_rows(K, m, b), cfg, materialize=True)
        s = r_update(IterState(aR, cR), block_rows(K, m, b), cfg, materialize=False)
        assert s[0] is None
        np.testing.assert_allclose(s[1], a[1], atol=1e-12)
        np.testing.assert_allclose(s[2], a[2], atol=1e-12)

    def test_nonpositive_cr_without_clamp(self, rng):
        state = IterState(aR=randn(rng, 2, 2, 1), cR=np.array([[1.0, 0.0], [1.0, 1.0]]))
        cfg = MonarchConfig(2, 2, clamp_enabled=False)
        with pytest.raises(DomainError):
            r_update(state, randn(rng, 2, 2, 1), cfg)
        r_update(state, randn(rng, 2, 2, 1), MonarchConfig(2, 2))

    def test_row_constant_shift_leaves_r(self, rng):
        m, b, d = 2, 5, 3
        aR, K = randn(rng, m, b, d), randn(rng, m * b, d)
        cR = rng.uniform(0.5, 2, (m, b))
        cfg = MonarchConfig(m, b, clamp_enabled=False)
        base, _, _ = r_update(IterState(aR, cR), block_rows(K, m, b), cfg)
        # an extra feature that adds shift[k, i] to every logit of row (k, i)
        shift = randn(rng, m, b) * 10
        aR2 = np.concatenate([aR, (shift * cR)[..., None]], axis=2)
        K2 = np.concatenate([K, np.ones((m * b, 1))], axis=1)
        moved, _, _ = r_update(IterState(aR2, cR), block_rows(K2, m, b), cfg)
        assert np.max(np.abs(moved - base)) < 1e-6


class TestLUpdate:
    def test_needs_r_update(self, rng):
        cfg = MonarchConfig(2, 2)
        with pytest.raises(StateError):
            l_update(init_state(randn(rng, 4, 2), cfg), randn(rng, 2, 2, 2), cfg)

    def test_m_one_all_ones(self, rng):
        Q, K, _ = qkv(rng, 6, 2)
        cfg = MonarchConfig(1, 6)
        st_ = init_state(Q, cfg)
        r_update(st_, block_rows(K, 1, 6), cfg)
        L, _, cR = l_update(st_, block_cols(Q, 1, 6), cfg)
        np.testing.assert_array_equal(L, np.ones((6, 1, 1)))
        np.testing.assert_array_equal(cR, np.ones((1, 6)))

    def test_symmetric_uniform(self, rng):
        m = b = 3
        aL = np.tile(randn(rng, b, 1, 2), (1, m, 1))
        st_ = IterState(aR=None, cR=None, aL=aL, cL=np.zeros((b, m)))
        L, _, cR = l_update(st_, randn(rng, b, m, 2), MonarchConfig(m, b))
        np.testing.assert_allclose(L, 1 / m, atol=1e-12)
        np.testing.assert_allclose(cR, 1.0, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(36)
        m, b, d = 3, 4, 2
        Q = randn(rng, m * b, d)
        st_ = IterState(aR=None, cR=None, aL=randn(rng, b, m, d), cL=-rng.uniform(0, 2, (b, m)))
        ref = loop_l_update(st_.aL, st_.cL, Q)
        got = l_update(st_, block_cols(Q, m, b), MonarchConfig(m, b))
        for g, r in zip(got, ref):
            assert np.max(np.abs(g - r)) < 1e-6
        np.testing.assert_allclose(got[0].sum(2), 1, atol=1e-12)


class TestMonarchAttention:
    @pytest.mark.parametrize("m, b", [(1, 24), (24, 1)])
    @pytest.mark.parametrize("iters", [1, 3])
    def test_degenerate_equals_dense(self, rng, m, b, iters):
        Q, K, V = qkv(rng, 24, 8)
        O, _ = monarch_attention(Q, K, V, MonarchConfig(m, b, iters=iters))
        assert np.max(np.abs(O - dense_attention(Q, K, V).output)) < 1e-10

    @pytest.mark.parametrize("m, b", [(1, 16), (16, 1)])
    def test_degenerate_fixed_point(self, rng, m, b):
        Q, K, V = qkv(rng, 16, 4)
        O1, _ = monarch_attention(Q, K, V, MonarchConfig(m, b, iters=1))
        O4, _ = monarch_attention(Q, K, V, MonarchConfig(m, b, iters=4))
        assert np.max(np.abs(O1 - O4)) < 1e-6

    def test_n48_two_iterations(self):
        rng = np.random.default_rng(48)
        Q, K, V = qkv(rng, 48, 8)
        J = []
        for t in (1, 2):
            O, F = monarch_attention(Q, K, V, MonarchConfig(4, 12, iters=t, clamp_enabled=False))
            J.append(monarch_objective(F, Q, K))
        assert J[1] >= J[0]
        assert np.max(np.abs(O - materialize_monarch(F) @ V)) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
    def test_objective_monotone(self, m, b, iters, seed):
        rng = np.random.default_rng(seed)
        Q, K, V = qkv(rng, m * b, 4)
        prev = -np.inf
        for t in range(1, iters + 2):
            _, F = monarch_attention(Q, K, V, MonarchConfig(m, b, iters=t, clamp_enabled=False))
            J = monarch_objective(F, Q, K)
            assert J >= prev - 1e-6 * abs(J)
            prev = J

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 3), st.booleans(), st.integers(0, 2**31))
    def test_factors_stochastic_and_output_factorized(self, m, b, iters, clamp, seed):
        rng = np.random.default_rng(seed)
        Q, K, V = qkv(rng, m * b, 3)
        O, F = monarch_attention(Q, K, V, MonarchConfig(m, b, iters=iters, clamp_enabled=clamp))
        for blocks in (F.L, F.R):
            np.testing.assert_allclose(blocks.sum(-1), 1, atol=1e-12)
            assert np.all((blocks >= 0) & (blocks <= 1))
        M = materialize_monarch(F)
        np.testing.assert_allclose(M.sum(1), 1, atol=1e-12)
        assert np.max(np.abs(O - M @ V)) < 1e-10

    def test_fused_equals_materialized(self, rng):
        Q, K, V = qkv(rng, 60, 4)
        a, Fa = monarch_attention(Q, K, V, MonarchConfig(5, 12, iters=3, fused=False))
        b, Fb = monarch_attention(Q, K, V, MonarchConfig(5, 12, iters=3, fused=True, tiles=TileConfig(5, 7)))
        assert np.max(np.abs(a - b)) < 1e-10
        np.testing.assert_allclose(Fa.L, Fb.L, atol=1e-10)

    def test_float32_path(self, rng):
        Q, K, V = (x.astype(np.float32) for x in qkv(rng, 64, 8))
        O, F = monarch_attention(Q, K, V, MonarchConfig(4, 16))
        assert O.dtype == np.float32
        assert np.max(np.abs(O - materialize_monarch(F) @ V)) < 1e-4

    def test_state_invariants(self, rng):
        m, b = 4, 6
        Q, K, _ = qkv(rng, m * b, 3)
        cfg = MonarchConfig(m, b, clamp_enabled=False)
        st_ = init_state(Q, cfg)
        for _ in range(3):
            r_update(st_, block_rows(K, m, b), cfg)
            assert np.all(st_.cL <= 1e-15)
            l_update(st_, block_cols(Q, m, b), cfg)
            assert np.all(st_.cR > 0)
            np.testing.assert_allclose(st_.cR.sum(0), m, atol=1e-12)

    @pytest.mark.parametrize("fused", [True, False])
    @pytest.mark.parametrize("m, b, t", [(4, 12, 2), (3, 7, 1), (8, 8, 3)])
    def test_mac_count(self, rng, fused, m, b, t):
        d = 5
        Q, K, V = qkv(rng, m * b, d)
        with count_macs() as c:
            monarch_attention(Q, K, V, MonarchConfig(m, b, iters=t, fused=fused, tiles=TileConfig(3, 5)))
        expected = t * (2 * m * b * b * d + 2 * b * m * m * d) + (m * b * b * d + b * m * m * d)
        assert c.macs == expected == monarch_macs(m, b, d, t)

    def test_deterministic(self, rng):
        Q, K, V = qkv(rng, 40, 4)
        a, _ = monarch_attention(Q, K, V, MonarchConfig(5, 8))
        b, _ = monarch_attention(Q, K, V, MonarchConfig(5, 8))
        np.testing.assert_array_equal(a, b)

    def test_errors(self, rng):
        Q, K, V = qkv(rng, 12, 2)
        with pytest.raises(DimensionError):
            monarch_attention(Q, K, V, MonarchConfig(5, 2))
        with pytest.raises(DimensionError):
            monarch_attention(Q, K[:6], V, MonarchConfig(3, 4))


def test_apply_factors_block_identity(rng):
    m, b = 3, 4
    L = row_softmax(randn(rng, b, m, m))
    R = row_softmax(randn(rng, m, b, b))
    F = MonarchFactors(L, R)
    V = randn(rng, m * b, 2)
    expected = np.zeros_like(V)
    for j in range(m):
        for i in range(b):
            for k in range(m):
                for l in range(b):
                    expected[j * b + i] += L[i, j, k] * R[k, i, l] * V[k * b + l]
    np.testing.assert_allclose(apply_factors(F, V), expected, atol=1e-12)
