"""Gated three-branch attention block tests."""

import numpy as np
import pytest

from skillvla import tensor as T
from skillvla.errors import ShapeError
from skillvla.gradcheck import grad_check
from skillvla.mol import (BranchParams, MoLLayerParams, dynamic_gate,
                          gated_cross_attn, init_mol_params, mol_branches,
                          mol_layer, self_attn_actions, static_gate)
from skillvla.params import ParamStore
from skillvla.tensor import DenseArray, backward

D_K, N_H, T_A = 8, 2, 3


def make_params(seed=0, layer=1):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_mol_params(store, n_layers=layer, d_k=D_K, n_h=N_H, rng=rng, std=0.3)
    return store, MoLLayerParams.from_store(store, layer)


def rand_inputs(seed=1):
    rng = np.random.default_rng(seed)
    a = DenseArray(rng.standard_normal((T_A, D_K)))
    s = DenseArray(rng.standard_normal((4, D_K)))
    v = DenseArray(rng.standard_normal((6, D_K)))
    p = DenseArray(rng.standard_normal((1, D_K)))
    return a, s, v, p


class TestDynamicGate:
    def test_zero_weights_give_half(self):
        _, params = make_params()
        params.w_s.data[:] = 0.0
        gate = dynamic_gate(DenseArray(np.random.default_rng(0).standard_normal((5, D_K))),
                            params.w_s)
        assert np.array_equal(gate.data, [0.5, 0.5])

    def test_open_interval(self):
        _, params = make_params()
        for seed in range(5):
            x = DenseArray(10 * np.random.default_rng(seed).standard_normal((4, D_K)))
            g = dynamic_gate(x, params.w_s).data
            assert np.all(g > 0) and np.all(g < 1)

    def test_doubling_weights_moves_away_from_half(self):
        _, params = make_params(seed=3)
        x = DenseArray(np.random.default_rng(4).standard_normal((4, D_K)))
        g1 = dynamic_gate(x, params.w_s).data
        params.w_s.data *= 2.0
        g2 = dynamic_gate(x, params.w_s).data
        assert np.all(np.abs(g2 - 0.5) >= np.abs(g1 - 0.5))

    def test_empty_tokens_rejected(self):
        _, params = make_params()
        with pytest.raises(ShapeError):
            dynamic_gate(DenseArray(np.zeros((2,))), params.w_s)


class TestGatedCrossAttn:
    def test_single_key_ignores_gate(self):
        _, params = make_params(seed=5)
        rng = np.random.default_rng(6)
        q = DenseArray(rng.standard_normal((T_A, D_K)))
        kv = DenseArray(rng.standard_normal((1, D_K)))
        branch = params.branches["s"]
        outs = []
        for g in (0.05, 0.95):
            gate = DenseArray(np.full(N_H, g))
            outs.append(gated_cross_attn(q, kv, gate, branch, N_H).data)
        assert np.allclose(outs[0], outs[1], atol=1e-12)
        # output is the projected value row for every query position
        v_row = kv.data @ params.branches["s"].wv.data.T @ params.branches["s"].wo.data.T
        assert np.allclose(outs[0], np.repeat(v_row, T_A, axis=0), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        _, params = make_params(seed=8)
        q = rng.standard_normal((T_A, D_K)) @ params.branches["s"].wq.data.T
        k = rng.standard_normal((5, D_K)) @ params.branches["s"].wk.data.T
        probs = T.mha_probs(q, k, N_H, gate=rng.uniform(0.1, 0.9, N_H))
        assert np.all(np.abs(probs.sum(axis=-1) - 1.0) <= 1e-12)

    def test_gate_length_checked(self):
        _, params = make_params()
        a, s, _, _ = rand_inputs()
        with pytest.raises(ShapeError):
            gated_cross_attn(a, s, DenseArray(np.ones(N_H + 1)), params.branches["s"], N_H)


class TestSelfAttn:
    def test_single_latent_passthrough(self):
        _, params = make_params(seed=9)
        a = DenseArray(np.random.default_rng(10).standard_normal((1, D_K)))
        out = self_attn_actions(a, params.branches["a"], N_H)
        expect = a.data @ params.branches["a"].wv.data.T @ params.branches["a"].wo.data.T
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_permutation_equivariance(self):
        _, params = make_params(seed=11)
        a = np.random.default_rng(12).standard_normal((4, D_K))
        out = self_attn_actions(DenseArray(a), params.branches["a"], N_H).data
        perm = [2, 0, 3, 1]
        out_p = self_attn_actions(DenseArray(a[perm]), params.branches["a"], N_H).data
        assert np.allclose(out_p, out[perm], atol=1e-12)


class TestMolLayer:
    def test_zeroed_branches_give_zero_and_mean_identity(self):
        store, params = make_params(seed=13)
        a, s, v, p = rand_inputs(14)
        for b in params.branches.values():
            b.wo.data[:] = 0.0
        out, _ = mol_layer(a, s, v, p, params, N_H)
        assert np.array_equal(out.data, np.zeros((T_A, D_K)))
        x = DenseArray(np.random.default_rng(1).standard_normal((T_A, D_K)))
        assert np.allclose(T.mean_stack([x, x, x]).data, x.data, atol=1e-15)

    def test_gradient_one_third_per_branch(self):
        rng = np.random.default_rng(15)
        branches = [DenseArray(rng.standard_normal((2, 3)), requires_grad=True)
                    for _ in range(3)]
        backward(T.sum_all(T.mean_stack(branches)))
        for b in branches:
            assert np.allclose(b.grad, np.full((2, 3), 1 / 3))

    def test_gate_report_in_open_interval(self):
        _, params = make_params(seed=16)
        a, s, v, p = rand_inputs(17)
        _, report = mol_layer(a, s, v, p, params, N_H)
        for g in (report.alpha_s, report.alpha_v):
            assert np.all(g > 0) and np.all(g < 1)

    def test_branch_decoupling(self):
        # zeroing the visual value projection must not touch the other branches
        _, params = make_params(seed=18)
        a, s, v, p = rand_inputs(19)
        a_s0, _, a_a0, _ = mol_branches(a, s, v, p, params, N_H)
        params.branches["v"].wv.data[:] = 0.0
        a_s1, a_v1, a_a1, _ = mol_branches(a, s, v, p, params, N_H)
        assert np.array_equal(a_s0.data, a_s1.data)
        assert np.array_equal(a_a0.data, a_a1.data)
        assert np.allclose(a_v1.data, 0.0, atol=1e-15)

    def test_gradcheck(self):
        store, params = make_params(seed=20)
        rng = np.random.default_rng(21)
        a = DenseArray(rng.standard_normal((T_A, D_K)))
        s = DenseArray(rng.standard_normal((4, D_K)))
        v = DenseArray(rng.standard_normal((6, D_K)))
        p = DenseArray(rng.standard_normal((1, D_K)))
        w = DenseArray(rng.standard_normal((T_A, D_K)))

        def f():
            out, _ = mol_layer(a, s, v, p, MoLLayerParams.from_store(store, 1), N_H)
            return T.sum_all(T.mul(out, w))

        report = grad_check(f, store, h=1e-5, tol=1e-4)
        assert report.passed, report.failures
