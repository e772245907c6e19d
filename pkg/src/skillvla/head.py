"""Denoising transformer action head.

The head embeds a Gaussian noise chunk and the proprioceptive state, runs a
stack of layers that each fuse backbone features (three-branch gated
attention) and retrieved skills (memory cross-attention) into the latents
through a subtractive residual, then decodes a noise estimate. The
reconstructed chunk is the input noise minus that estimate, and the training
objective is the mean absolute error between the reconstruction and the
expert chunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, LayerStates, observe
from .env import MAX_STEP, WorldState
from .errors import ConfigError, ContractError, NumericError
from .mol import GateReport, MoLLayerParams, init_mol_params, mol_layer, s_branch_only
from .msm import SkillMemory, build_key, init_msm_params, refine
from .params import ParamStore
from .tensor import DenseArray, no_grad

D_ACTION = 3     # dx, dy, grip
D_PROPRIO = 3    # gripper x, gripper y, grip state


@dataclass(frozen=True)
class HeadConfig:
    n_layers: int = 4
    d_k: int = 64
    n_heads: int = 4
    h_c: int = 8

    @property
    def t_a(self) -> int:
        return self.h_c

    def validate(self) -> None:
        if self.d_k % self.n_heads != 0:
            raise ConfigError(f"d_k {self.d_k} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.h_c < 1:
            raise ConfigError("need at least one layer and a positive chunk horizon")


@dataclass
class ActionChunk:
    actions: np.ndarray      # [h_c, D_ACTION]

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2 or self.actions.shape[1] != D_ACTION:
            raise ContractError(f"chunk must be [h_c, {D_ACTION}], got {self.actions.shape}")

    @property
    def h_c(self) -> int:
        return self.actions.shape[0]


@dataclass
class PolicyOutput:
    a_r: DenseArray          # reconstructed chunk [h_c, D_ACTION], unclipped
    gate_reports: list = field(default_factory=list)
    retrieved_count: int = 0


@dataclass
class Observation:
    state: WorldState
    instruction: list


def sinusoidal_encoding(t_a: int, d_k: int) -> np.ndarray:
    """Fixed per-timestep encoding added once at embedding time."""
    pos = np.arange(t_a)[:, None]
    i = np.arange(d_k // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d_k)
    enc = np.zeros((t_a, d_k))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def init_head_params(store: ParamStore, hcfg: HeadConfig, d_model: int,
                     rng: np.random.Generator) -> None:
    store.add("head.embed.action", T.randn(rng, (hcfg.d_k, D_ACTION), 0.2), trainable=True)
    store.add("head.embed.proprio", T.randn(rng, (hcfg.d_k, D_PROPRIO), 0.2), trainable=True)
    store.add("head.proj.s", T.randn(rng, (hcfg.d_k, d_model), 0.1), trainable=True)
    store.add("head.proj.v", T.randn(rng, (hcfg.d_k, d_model), 0.1), trainable=True)
    init_mol_params(store, hcfg.n_layers, hcfg.d_k, hcfg.n_heads, rng)
    store.add("head.decode", T.randn(rng, (D_ACTION, hcfg.d_k), 0.02), trainable=True)


def init_model_params(bcfg: BackboneConfig, hcfg: HeadConfig, model_seed: int) -> ParamStore:
    """Frozen backbone plus all trainable groups, in one store."""
    from .backbone import init_frozen
    bcfg.validate()
    hcfg.validate()
    store = init_frozen(bcfg, ParamStore())
    rng = np.random.default_rng(np.random.SeedSequence((model_seed, 0xEAD)))
    init_head_params(store, hcfg, bcfg.d_model, rng)
    init_msm_params(store, hcfg.d_k, bcfg.d_model, D_ACTION, rng)
    return store


def embed_inputs(a_n: np.ndarray, proprio: np.ndarray, store: ParamStore,
                 hcfg: HeadConfig):
    """Linear embeddings of the noise chunk and the proprio state.

    The temporal encoding is added here once; attention layers downstream
    are permutation-equivariant over latent rows.
    """
    a_n = np.asarray(a_n, dtype=np.float64)
    proprio = np.asarray(proprio, dtype=np.float64)
    if a_n.shape != (hcfg.h_c, D_ACTION):
        raise ContractError(f"noise chunk must be [{hcfg.h_c}, {D_ACTION}], got {a_n.shape}")
    if proprio.shape != (D_PROPRIO,):
        raise ContractError(f"proprio must be [{D_PROPRIO}], got {proprio.shape}")
    a_emb = T.matmul(DenseArray(a_n), T.transpose(store["head.embed.action"]))
    a_0 = T.add(a_emb, DenseArray(sinusoidal_encoding(hcfg.t_a, hcfg.d_k)))
    p_emb = T.matmul(DenseArray(proprio.reshape(1, -1)),
                     T.transpose(store["head.embed.proprio"]))
    return a_0, p_emb


def backbone_layer_groups(n_backbone: int, n_head: int) -> list:
    """Which backbone layers feed each head layer.

    With at least as many backbone layers as head layers, consecutive blocks
    of near-equal size partition them in depth order. With fewer backbone
    layers, each head layer reads the single depth-proportional layer.
    """
    if n_backbone >= n_head:
        return [list(range(j * n_backbone // n_head, (j + 1) * n_backbone // n_head))
                for j in range(n_head)]
    return [[int(np.ceil((j + 1) * n_backbone / n_head)) - 1] for j in range(n_head)]


def layer_contexts(states: LayerStates, store: ParamStore, hcfg: HeadConfig) -> list:
    """Per head layer: block-averaged backbone states projected to d_k."""
    groups = backbone_layer_groups(states.n_layers, hcfg.n_layers)
    proj_s = T.transpose(store["head.proj.s"])
    proj_v = T.transpose(store["head.proj.v"])
    out = []
    for group in groups:
        s_avg = T.mean_stack([states.queries(l) for l in group])
        v_avg = T.mean_stack([states.visual(l) for l in group])
        out.append((T.matmul(s_avg, proj_s), T.matmul(v_avg, proj_v)))
    return out


def head_layer(a_prev: DenseArray, s_ctx: DenseArray, v_ctx: DenseArray,
               p_emb: DenseArray, retrieved: list, store: ParamStore,
               hcfg: HeadConfig, layer: int, enable_mol: bool = True,
               enable_msm: bool = True):
    """One head layer: subtractive residual of fused attention plus skill readout."""
    if layer < 1 or layer > hcfg.n_layers:
        raise ContractError(f"layer {layer} outside 1..{hcfg.n_layers}")
    a_norm = T.layer_norm(a_prev)
    params = MoLLayerParams.from_store(store, layer)
    report = None
    if enable_mol:
        a_fused, report = mol_layer(a_norm, s_ctx, v_ctx, p_emb, params, hcfg.n_heads)
    else:
        a_fused = s_branch_only(a_norm, s_ctx, p_emb, params, hcfg.n_heads)
    if enable_msm:
        a_ref = refine(a_norm, retrieved, store["msm.attn.wq"],
                       store["msm.attn.wk"], store["msm.attn.wv"])
    else:
        a_ref = T.zeros(a_prev.shape)
    a_next = T.sub(a_prev, T.add(a_fused, a_ref))
    return a_next, report


def denoise(a_n: np.ndarray, states: LayerStates, proprio: np.ndarray,
            memory: SkillMemory | None, store: ParamStore, hcfg: HeadConfig,
            r_retrieval: int = 4, exclude: tuple | None = None,
            enable_mol: bool = True, enable_msm: bool = True) -> PolicyOutput:
    """Reconstruct an action chunk from a noise chunk and the current context.

    Retrieval happens once per forward pass; each layer re-reads the same
    retrieved set with its own queries. The decoded estimate is subtracted
    from the input noise to form the reconstruction.
    """
    a, p_emb = embed_inputs(a_n, proprio, store, hcfg)
    retrieved = []
    if enable_msm and memory is not None and len(memory) > 0:
        with no_grad():
            q_obs = build_key(states, store["msm.key_proj"])
        retrieved = memory.retrieve_topR(q_obs.data, r_retrieval, exclude=exclude,
                                         h_c=hcfg.h_c)
    contexts = layer_contexts(states, store, hcfg)
    reports = []
    for layer in range(1, hcfg.n_layers + 1):
        s_ctx, v_ctx = contexts[layer - 1]
        try:
            a, report = head_layer(a, s_ctx, v_ctx, p_emb, retrieved, store, hcfg,
                                   layer, enable_mol=enable_mol, enable_msm=enable_msm)
        except NumericError as e:
            raise NumericError(f"non-finite values in head layer {layer}: {e}") from None
        if report is not None:
            reports.append(report)
    d_out = T.matmul(T.layer_norm(a), T.transpose(store["head.decode"]))
    a_r = T.sub(DenseArray(np.asarray(a_n, dtype=np.float64)), d_out)
    return PolicyOutput(a_r=a_r, gate_reports=reports, retrieved_count=len(retrieved))


def chunk_loss(a_g: np.ndarray, a_n: np.ndarray, states: LayerStates,
               proprio: np.ndarray, memory: SkillMemory | None, store: ParamStore,
               hcfg: HeadConfig, r_retrieval: int = 4, exclude: tuple | None = None,
               enable_mol: bool = True, enable_msm: bool = True):
    """Mean absolute error between the expert chunk and the reconstruction."""
    out = denoise(a_n, states, proprio, memory, store, hcfg, r_retrieval,
                  exclude=exclude, enable_mol=enable_mol, enable_msm=enable_msm)
    loss = T.l1(DenseArray(np.asarray(a_g, dtype=np.float64)), out.a_r)
    return loss, out


def clip_chunk(actions: np.ndarray) -> np.ndarray:
    out = actions.copy()
    out[:, 0] = np.clip(out[:, 0], -MAX_STEP, MAX_STEP)
    out[:, 1] = np.clip(out[:, 1], -MAX_STEP, MAX_STEP)
    out[:, 2] = np.clip(out[:, 2], -1.0, 1.0)
    return out


def policy_forward(obs: Observation, proprio: np.ndarray, memory: SkillMemory | None,
                   store: ParamStore, bcfg: BackboneConfig, hcfg: HeadConfig,
                   r_retrieval: int = 4, seed: int = 0, enable_mol: bool = True,
                   enable_msm: bool = True) -> ActionChunk:
    """Full policy: observe, sample noise, denoise, clip to action bounds.

    Deterministic for a given (observation, seed): the noise chunk comes
    from a generator seeded with the argument.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA0)))
    a_n = rng.standard_normal((hcfg.h_c, D_ACTION))
    with no_grad():
        states = observe(obs.state, obs.instruction, store, bcfg)
        out = denoise(a_n, states, proprio, memory, store, hcfg, r_retrieval,
                      enable_mol=enable_mol, enable_msm=enable_msm)
    return ActionChunk(clip_chunk(out.a_r.data))
