"""Three-branch gated attention block used at every action-head layer.

Each layer fuses backbone features into the action latents through three
decoupled attention branches whose softmaxes never mix modalities:

  S branch: cross-attention onto the query tokens plus one proprio token,
            scaled per head by a dynamic gate computed from those tokens.
  V branch: cross-attention onto the visual tokens, scaled per head by a
            learnable static gate (a logit squashed through sigmoid).
  A branch: ungated self-attention over the action latents.

The branch outputs are aggregated by elementwise mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .params import ParamStore
from .tensor import DenseArray

BRANCHES = ("s", "v", "a")


@dataclass
class BranchParams:
    wq: DenseArray
    wk: DenseArray
    wv: DenseArray
    wo: DenseArray


@dataclass
class MoLLayerParams:
    layer: int
    w_s: DenseArray           # [n_h, d_k] dynamic-gate projection
    alpha_v: DenseArray       # [n_h] static-gate logits
    branches: dict            # branch tag -> BranchParams

    @classmethod
    def from_store(cls, store: ParamStore, layer: int) -> "MoLLayerParams":
        p = f"head.layer{layer}"
        return cls(
            layer=layer,
            w_s=store[f"{p}.gate.ws"],
            alpha_v=store[f"{p}.gate.alpha_v"],
            branches={b: BranchParams(
                wq=store[f"{p}.{b}.wq"], wk=store[f"{p}.{b}.wk"],
                wv=store[f"{p}.{b}.wv"], wo=store[f"{p}.{b}.wo"],
            ) for b in BRANCHES},
        )


@dataclass
class GateReport:
    layer: int
    alpha_s: np.ndarray       # per-head dynamic gate values, each in (0,1)
    alpha_v: np.ndarray       # per-head effective static gate values, each in (0,1)


def init_mol_params(store: ParamStore, n_layers: int, d_k: int, n_h: int,
                    rng: np.random.Generator, std: float = 0.05) -> None:
    for l in range(1, n_layers + 1):
        p = f"head.layer{l}"
        store.add(f"{p}.gate.ws", T.randn(rng, (n_h, d_k), 0.02), trainable=True)
        store.add(f"{p}.gate.alpha_v", T.zeros((n_h,)), trainable=True)
        for b in BRANCHES:
            for w in ("wq", "wk", "wv"):
                store.add(f"{p}.{b}.{w}", T.randn(rng, (d_k, d_k), std), trainable=True)
            store.add(f"{p}.{b}.wo", T.randn(rng, (d_k, d_k), 0.02), trainable=True)


def dynamic_gate(s_pp: DenseArray, w_s: DenseArray) -> DenseArray:
    """Per-head gate from the pooled query+proprio tokens: sigmoid(W pool)."""
    if s_pp.data.ndim != 2 or s_pp.shape[0] < 1:
        raise ShapeError(f"dynamic_gate needs >=1 tokens, got {s_pp.shape}")
    pooled = T.mean_rows(s_pp)                       # [1, d_k]
    logits = T.matmul(pooled, T.transpose(w_s))      # [1, n_h]
    return T.reshape(T.sigmoid(logits), (w_s.shape[0],))


def gated_cross_attn(q_src: DenseArray, kv_src: DenseArray, gate: DenseArray | None,
                     params: BranchParams, n_h: int) -> DenseArray:
    """Multi-head attention from q_src onto kv_src with per-head gated logits."""
    q = T.matmul(q_src, T.transpose(params.wq))
    k = T.matmul(kv_src, T.transpose(params.wk))
    v = T.matmul(kv_src, T.transpose(params.wv))
    out = T.gated_mha(q, k, v, n_h, gate)
    return T.matmul(out, T.transpose(params.wo))


def self_attn_actions(a: DenseArray, params: BranchParams, n_h: int) -> DenseArray:
    """Ungated self-attention over the action latents."""
    return gated_cross_attn(a, a, None, params, n_h)


def static_gate(alpha_v: DenseArray) -> DenseArray:
    return T.sigmoid(alpha_v)


def mol_branches(a_in: DenseArray, s_ctx: DenseArray, v_ctx: DenseArray,
                 p_emb: DenseArray, params: MoLLayerParams, n_h: int):
    """All three branch outputs plus the gate report for this layer."""
    s_pp = T.concat([s_ctx, p_emb], axis=0)
    alpha_s = dynamic_gate(s_pp, params.w_s)
    alpha_v = static_gate(params.alpha_v)
    a_s = gated_cross_attn(a_in, s_pp, alpha_s, params.branches["s"], n_h)
    a_v = gated_cross_attn(a_in, v_ctx, alpha_v, params.branches["v"], n_h)
    a_a = self_attn_actions(a_in, params.branches["a"], n_h)
    report = GateReport(layer=params.layer, alpha_s=alpha_s.data.copy(),
                        alpha_v=alpha_v.data.copy())
    return a_s, a_v, a_a, report


def mol_layer(a_in: DenseArray, s_ctx: DenseArray, v_ctx: DenseArray,
              p_emb: DenseArray, params: MoLLayerParams, n_h: int):
    """Mean of the three branch outputs, with the gate report."""
    a_s, a_v, a_a, report = mol_branches(a_in, s_ctx, v_ctx, p_emb, params, n_h)
    return T.mean_stack([a_s, a_v, a_a]), report


def s_branch_only(a_in: DenseArray, s_ctx: DenseArray, p_emb: DenseArray,
                  params: MoLLayerParams, n_h: int) -> DenseArray:
    """Ablated fusion: one ungated cross-attention onto the query+proprio tokens."""
    s_pp = T.concat([s_ctx, p_emb], axis=0)
    return gated_cross_attn(a_in, s_pp, None, params.branches["s"], n_h)
