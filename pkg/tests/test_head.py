"""Action head: embeddings, residual structure, loss identities, gradients."""

import numpy as np
import pytest

from skillvla import tensor as T
from skillvla.backbone import BackboneConfig, observe
from skillvla.env import expert_chunk, generate_dataset, make_task, reset
from skillvla.errors import ContractError
from skillvla.gradcheck import grad_check
from skillvla.head import (D_ACTION, HeadConfig, Observation, PolicyOutput,
                           backbone_layer_groups, chunk_loss, denoise,
                           embed_inputs, init_model_params, policy_forward,
                           sinusoidal_encoding)
from skillvla.msm import SkillEntry, SkillMemory, build_key
from skillvla.params import ParamStore
from skillvla.tensor import DenseArray, no_grad

BCFG = BackboneConfig(n_layers=3, d_model=16, n_heads=2, n_queries=4, seed=2)
HCFG = HeadConfig(n_layers=4, d_k=16, n_heads=2, h_c=2)


@pytest.fixture(scope="module")
def model():
    store = init_model_params(BCFG, HCFG, model_seed=7)
    task = make_task("pick-place", 0)
    state = reset(task, seed=1)
    states = observe(state, list(task.instruction_template), store, BCFG)
    return store, task, state, states


def seeded_memory(store, n=6):
    mem = SkillMemory(3 * HCFG.d_k, (HCFG.h_c, D_ACTION), capacity=64)
    rng = np.random.default_rng(11)
    tasks = [make_task("pick-place", t) for t in (0, 1)]
    records = generate_dataset(2, tasks, seed=9)
    for rec in records:
        for t in range(0, min(3, len(rec.steps))):
            with no_grad():
                states = observe(rec.steps[t][0], rec.instruction, store, BCFG)
                key = build_key(states, store["msm.key_proj"])
            mem.insert(SkillEntry(key.data.copy(), expert_chunk(rec, t, HCFG.h_c),
                                  rec.traj_id + 100, t))
    return mem


class TestEmbed:
    def test_default_shapes(self):
        store = init_model_params(BackboneConfig(), HeadConfig(), model_seed=0)
        a0, p = embed_inputs(np.zeros((8, 3)), np.zeros(3), store, HeadConfig())
        assert a0.shape == (8, 64) and p.shape == (1, 64)

    def test_equal_actions_differ_only_by_temporal_encoding(self, model):
        store, *_ = model
        a_n = np.tile([[0.3, -0.2, 1.0]], (HCFG.h_c, 1))
        a0, _ = embed_inputs(a_n, np.zeros(3), store, HCFG)
        enc = sinusoidal_encoding(HCFG.t_a, HCFG.d_k)
        diff = a0.data[0] - a0.data[1]
        assert np.allclose(diff, enc[0] - enc[1], atol=1e-12)

    def test_bad_shapes_rejected(self, model):
        store, *_ = model
        with pytest.raises(ContractError):
            embed_inputs(np.zeros((3, 3)), np.zeros(3), store, HCFG)
        with pytest.raises(ContractError):
            embed_inputs(np.zeros((HCFG.h_c, 3)), np.zeros(4), store, HCFG)

    def test_gradcheck_through_embedding(self, model):
        store, _, _, _ = model
        rng = np.random.default_rng(3)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        pr = rng.standard_normal(D_PROPRIO := 3)
        w = DenseArray(rng.standard_normal((HCFG.h_c, HCFG.d_k)))

        def f():
            a0, p = embed_inputs(a_n, pr, store, HCFG)
            return T.sum_all(T.add(T.mul(a0, w), T.sum_all(p)))

        report = grad_check(f, store, names=["head.embed.action", "head.embed.proprio"])
        assert report.passed, report.per_param


class TestLayerGroups:
    def test_partition_when_deep_backbone(self):
        assert backbone_layer_groups(12, 4) == [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]

    def test_shallow_backbone_reuses_layers(self):
        groups = backbone_layer_groups(3, 4)
        assert all(len(g) == 1 for g in groups)
        assert [g[0] for g in groups] == [0, 1, 2, 2]
        assert all(0 <= g[0] < 3 for g in groups)


class TestResidualStructure:
    def test_identity_when_attention_outputs_zeroed(self, model):
        _, _, state, states = model
        store = init_model_params(BCFG, HCFG, model_seed=7)
        for l in range(1, HCFG.n_layers + 1):
            for b in ("s", "v", "a"):
                store[f"head.layer{l}.{b}.wo"].data[:] = 0.0
        rng = np.random.default_rng(4)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        # empty memory: refinement contributes zero; latents must pass through
        out = denoise(a_n, states, state.proprio(), None, store, HCFG, 2)
        a0, _ = embed_inputs(a_n, state.proprio(), store, HCFG)
        decoded = T.layer_norm(a0).data @ store["head.decode"].data.T
        assert np.allclose(out.a_r.data, a_n - decoded, atol=1e-12)

    def test_zero_decode_reconstructs_noise_exactly(self, model):
        store, _, state, states = model
        store2 = init_model_params(BCFG, HCFG, model_seed=7)
        store2["head.decode"].data[:] = 0.0
        rng = np.random.default_rng(5)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        out = denoise(a_n, states, state.proprio(), None, store2, HCFG, 2)
        assert np.array_equal(out.a_r.data, a_n)

    def test_output_shape(self, model):
        store, _, state, states = model
        out = denoise(np.zeros((HCFG.h_c, D_ACTION)), states, state.proprio(),
                      None, store, HCFG, 2)
        assert out.a_r.shape == (HCFG.h_c, D_ACTION)


class TestLoss:
    def test_zero_when_reconstruction_exact(self, model):
        _, _, state, states = model
        store2 = init_model_params(BCFG, HCFG, model_seed=7)
        store2["head.decode"].data[:] = 0.0
        rng = np.random.default_rng(6)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        loss, _ = chunk_loss(a_n, a_n, states, state.proprio(), None, store2, HCFG, 2)
        assert loss.item() == 0.0

    def test_folded_gaussian_mean(self, model):
        # with zero decode and zero target, loss = mean |noise|; over many
        # draws this approaches sqrt(2/pi)
        _, _, state, states = model
        store2 = init_model_params(BCFG, HCFG, model_seed=7)
        store2["head.decode"].data[:] = 0.0
        rng = np.random.default_rng(7)
        vals = []
        with no_grad():
            for _ in range(400):
                a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
                loss, _ = chunk_loss(np.zeros_like(a_n), a_n, states, state.proprio(),
                                     None, store2, HCFG, 2)
                vals.append(loss.item())
        assert abs(np.mean(vals) - np.sqrt(2 / np.pi)) < 0.02

    def test_loss_equals_l1_of_output(self, model):
        store, _, state, states = model
        rng = np.random.default_rng(8)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        a_g = rng.standard_normal((HCFG.h_c, D_ACTION))
        loss, out = chunk_loss(a_g, a_n, states, state.proprio(), None, store, HCFG, 2)
        recomputed = np.abs(a_g - out.a_r.data).mean()
        assert abs(loss.item() - recomputed) <= 1e-15


class TestPolicyForward:
    def test_deterministic_per_seed(self, model):
        store, task, state, _ = model
        obs = Observation(state, list(task.instruction_template))
        a = policy_forward(obs, state.proprio(), None, store, BCFG, HCFG, 2, seed=3)
        b = policy_forward(obs, state.proprio(), None, store, BCFG, HCFG, 2, seed=3)
        assert np.array_equal(a.actions, b.actions)

    def test_different_seeds_differ(self, model):
        store, task, state, _ = model
        obs = Observation(state, list(task.instruction_template))
        a = policy_forward(obs, state.proprio(), None, store, BCFG, HCFG, 2, seed=3)
        b = policy_forward(obs, state.proprio(), None, store, BCFG, HCFG, 2, seed=4)
        assert not np.array_equal(a.actions, b.actions)

    def test_output_within_bounds(self, model):
        store, task, state, _ = model
        obs = Observation(state, list(task.instruction_template))
        for seed in range(5):
            chunk = policy_forward(obs, state.proprio(), None, store, BCFG, HCFG, 2,
                                   seed=seed)
            assert np.all(np.abs(chunk.actions[:, :2]) <= 0.1)
            assert np.all(np.abs(chunk.actions[:, 2]) <= 1.0)


class TestRetrievalIntegration:
    def test_one_retrieval_capped_at_r(self, model):
        store, _, state, states = model
        mem = seeded_memory(store)
        out = denoise(np.zeros((HCFG.h_c, D_ACTION)), states, state.proprio(),
                      mem, store, HCFG, r_retrieval=2)
        assert 0 < out.retrieved_count <= 2

    def test_self_exclusion_blocks_own_neighborhood(self, model):
        store, _, state, states = model
        mem = SkillMemory(3 * HCFG.d_k, (HCFG.h_c, D_ACTION), capacity=8)
        with no_grad():
            key = build_key(states, store["msm.key_proj"])
        mem.insert(SkillEntry(key.data.copy(), np.zeros((HCFG.h_c, D_ACTION)), 5, 3))
        out = denoise(np.zeros((HCFG.h_c, D_ACTION)), states, state.proprio(),
                      mem, store, HCFG, 4, exclude=(5, 3))
        assert out.retrieved_count == 0

    def test_no_gradient_into_frozen_backbone(self, model):
        store, _, state, _ = model
        states = observe(state, [0, 1, 10], store, BCFG)
        mem = seeded_memory(store)
        rng = np.random.default_rng(9)
        store.reset_grads()
        loss, _ = chunk_loss(rng.standard_normal((HCFG.h_c, D_ACTION)),
                             rng.standard_normal((HCFG.h_c, D_ACTION)),
                             states, state.proprio(), mem, store, HCFG, 2)
        T.backward(loss)
        for name, arr, trainable in store.items():
            if name.startswith("backbone."):
                assert arr.grad is None
            else:
                assert arr.grad is not None
        assert np.abs(store["queries.tokens"].grad).sum() > 0

    def test_gate_reports_per_layer(self, model):
        store, _, state, states = model
        out = denoise(np.zeros((HCFG.h_c, D_ACTION)), states, state.proprio(),
                      None, store, HCFG, 2)
        assert len(out.gate_reports) == HCFG.n_layers
        for rep in out.gate_reports:
            assert rep.alpha_s.shape == (HCFG.n_heads,)
            assert np.all((rep.alpha_s > 0) & (rep.alpha_s < 1))

    def test_disabled_modules(self, model):
        store, _, state, states = model
        mem = seeded_memory(store)
        out = denoise(np.zeros((HCFG.h_c, D_ACTION)), states, state.proprio(),
                      mem, store, HCFG, 2, enable_mol=False, enable_msm=False)
        assert out.gate_reports == [] and out.retrieved_count == 0


class TestGradients:
    def test_head_parameter_groups_match_central_differences(self, model):
        store, _, state, states = model
        mem = seeded_memory(store)
        rng = np.random.default_rng(10)
        a_n = rng.standard_normal((HCFG.h_c, D_ACTION))
        a_g = rng.standard_normal((HCFG.h_c, D_ACTION))

        def f():
            loss, _ = chunk_loss(a_g, a_n, states, state.proprio(), mem, store, HCFG, 2)
            return loss

        names = ["head.embed.action", "head.proj.v", "head.layer1.gate.ws",
                 "head.layer1.gate.alpha_v", "head.layer2.s.wq", "head.layer3.v.wv",
                 "head.decode", "msm.attn.wk", "queries.tokens"]
        report = grad_check(f, store, h=1e-5, tol=1e-4, names=names)
        assert report.passed, report.per_param
