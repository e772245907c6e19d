"""Frozen multimodal transformer surrogate and its synthetic encoders.

A seeded random transformer stands in for a pretrained vision-language
backbone. Scene views are rasterized into an 8x8 cell grid whose per-cell
descriptors pass through a frozen random projection; instructions look up a
frozen token table whose upper half holds synonym embeddings constructed as
small perturbations of their base tokens. The backbone runs full-attention
pre-norm layers over [visual, text, query] tokens and exposes every layer's
hidden states, split back into segments. All backbone weights are
non-trainable; the query tokens are trainable inputs and live under their own
name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .env import N_BASE_TYPES, WorldState
from .errors import ConfigError, ShapeError, VocabularyError
from .params import ParamStore
from .tensor import DenseArray

GRID = 8                   # cells per side in each rasterized view
WRIST_SPAN = 0.4           # world-units side of the wrist crop
DESC_DIM = N_BASE_TYPES + 4  # type descriptor | occupancy | cx | cy | gripper flag

WEIGHT_STD = 0.02
# Token table and view projectors use a larger scale so that the fixed-size
# synonym perturbation (std 0.05) stays angularly close to its base token.
EMBED_STD = 0.25
SYNONYM_STD = 0.05
NOVEL_DESCRIPTOR_STD = 0.05

SEGMENT_KINDS = ("visual-global", "visual-wrist", "text", "query")

BACKBONE_PREFIX = "backbone."
QUERY_NAME = "queries.tokens"


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    n_queries: int = 8
    vocab_size: int = 64
    seed: int = 0

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def n_visual(self) -> int:
        return 2 * GRID * GRID

    @property
    def n_base_vocab(self) -> int:
        return self.vocab_size // 2

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 3:
            raise ConfigError("need at least 3 layers for shallow/mid/deep features")
        if self.vocab_size < 2 or self.vocab_size % 2 != 0:
            raise ConfigError("vocab_size must be even (upper half holds synonyms)")
        if self.n_queries < 1:
            raise ConfigError("need at least one query token")


@dataclass
class TokenSequence:
    kind: str
    embeddings: DenseArray    # [n_tokens, d_model]

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ShapeError(f"unknown token kind {self.kind!r}")
        if self.embeddings.data.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError(f"token sequence needs >=1 rows, got {self.embeddings.shape}")

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class LayerStates:
    """Per-layer (visual, text, query) hidden states, one triple per layer."""
    layers: list              # [(V_l, L_l, S_l)] with constant segment widths

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("LayerStates needs at least one layer")
        widths = [(v.shape[0], l.shape[0], s.shape[0]) for v, l, s in self.layers]
        if len(set(widths)) != 1:
            raise ShapeError("segment widths vary across layers")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def visual(self, l: int) -> DenseArray:
        return self.layers[l][0]

    def text(self, l: int) -> DenseArray:
        return self.layers[l][1]

    def queries(self, l: int) -> DenseArray:
        return self.layers[l][2]


def init_frozen(config: BackboneConfig, store: ParamStore | None = None) -> ParamStore:
    """Sample the frozen backbone weights and the trainable query tokens.

    Deterministic per config.seed: the same seed always yields the same
    parameter bytes. Backbone entries are non-trainable; only the query
    tokens (model inputs, not weights) train.
    """
    config.validate()
    if store is None:
        store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xB0E)))
    d = config.d_model

    base = EMBED_STD * rng.standard_normal((config.n_base_vocab, d))
    synonyms = base + SYNONYM_STD * rng.standard_normal(base.shape)
    table = np.concatenate([base, synonyms], axis=0)
    store.add("backbone.embed.table", DenseArray(table), trainable=False)
    store.add("backbone.embed.segment",
              T.randn(rng, (len(SEGMENT_KINDS), d), WEIGHT_STD), trainable=False)
    store.add("backbone.view.global", T.randn(rng, (d, DESC_DIM), EMBED_STD), trainable=False)
    store.add("backbone.view.wrist", T.randn(rng, (d, DESC_DIM), EMBED_STD), trainable=False)
    for i in range(config.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"backbone.layer{i}.attn.{w}", T.randn(rng, (d, d), WEIGHT_STD),
                      trainable=False)
        store.add(f"backbone.layer{i}.ffn.w1", T.randn(rng, (config.d_ff, d), WEIGHT_STD),
                  trainable=False)
        store.add(f"backbone.layer{i}.ffn.w2", T.randn(rng, (d, config.d_ff), WEIGHT_STD),
                  trainable=False)
    store.add(QUERY_NAME, T.randn(rng, (config.n_queries, d), WEIGHT_STD), trainable=True)
    return store


def type_descriptor(type_id: int, seed: int) -> np.ndarray:
    """Frozen per-type descriptor over the base-type axes.

    Training types are one-hot; a held-out type id maps to its base type's
    one-hot plus a small seeded perturbation, so novel objects look similar
    but not identical to a trained type.
    """
    base = type_id % N_BASE_TYPES
    desc = np.zeros(N_BASE_TYPES)
    desc[base] = 1.0
    if type_id >= N_BASE_TYPES:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x40E1, type_id)))
        desc = desc + NOVEL_DESCRIPTOR_STD * rng.standard_normal(N_BASE_TYPES)
    return desc


def view_descriptors(state: WorldState, view: str, seed: int) -> np.ndarray:
    """Rasterize one view into a [GRID*GRID, DESC_DIM] descriptor matrix.

    Columns: type descriptor (base-type axes), occupancy, world-coordinate
    cell center, gripper flag. The wrist view is a crop of side WRIST_SPAN
    centered on the gripper; cell centers stay in world coordinates so wrist
    tokens shift as the gripper moves.
    """
    if view == "global":
        origin, span = (0.0, 0.0), 1.0
    elif view == "wrist":
        gx, gy = state.gripper
        origin, span = (gx - WRIST_SPAN / 2, gy - WRIST_SPAN / 2), WRIST_SPAN
    else:
        raise ShapeError(f"unknown view {view!r}")
    cell = span / GRID

    desc = np.zeros((GRID * GRID, DESC_DIM))
    for i in range(GRID):
        for j in range(GRID):
            idx = i * GRID + j
            desc[idx, N_BASE_TYPES + 1] = origin[0] + (i + 0.5) * cell
            desc[idx, N_BASE_TYPES + 2] = origin[1] + (j + 0.5) * cell

    def cell_of(x, y):
        ci = int(np.floor((x - origin[0]) / cell))
        cj = int(np.floor((y - origin[1]) / cell))
        if 0 <= ci < GRID and 0 <= cj < GRID:
            return ci * GRID + cj
        return None

    # nearest object to each occupied cell's center wins the type channel
    claimed: dict[int, tuple] = {}
    for o in state.objects:
        idx = cell_of(o.x, o.y)
        if idx is None:
            continue
        cx = desc[idx, N_BASE_TYPES + 1]
        cy = desc[idx, N_BASE_TYPES + 2]
        d = np.hypot(o.x - cx, o.y - cy)
        if idx not in claimed or (d, o.id) < claimed[idx][:2]:
            claimed[idx] = (d, o.id, o.type_id)
    for idx, (_, _, tid) in claimed.items():
        desc[idx, :N_BASE_TYPES] = type_descriptor(tid, seed)
        desc[idx, N_BASE_TYPES] = 1.0

    gidx = cell_of(*state.gripper)
    if gidx is not None:
        desc[gidx, N_BASE_TYPES + 3] = 1.0
    return desc


def encode_view(state: WorldState, view: str, store: ParamStore,
                config: BackboneConfig) -> TokenSequence:
    desc = view_descriptors(state, view, config.seed)
    proj = store[f"backbone.view.{view}"]
    emb = T.matmul(DenseArray(desc), T.transpose(proj))
    kind = "visual-global" if view == "global" else "visual-wrist"
    return TokenSequence(kind, emb)


def tokenize_instruction(instr, store: ParamStore, config: BackboneConfig) -> TokenSequence:
    ids = [int(t) for t in instr]
    if not ids:
        raise ShapeError("empty instruction")
    for t in ids:
        if t < 0 or t >= config.vocab_size:
            raise VocabularyError(f"token id {t} outside vocabulary of {config.vocab_size}")
    emb = T.gather_rows(store["backbone.embed.table"], np.array(ids, dtype=np.int64))
    return TokenSequence("text", emb)


def query_tokens(store: ParamStore) -> TokenSequence:
    return TokenSequence("query", store[QUERY_NAME])


def _layer_attn(x: DenseArray, store: ParamStore, i: int, n_heads: int) -> DenseArray:
    q = T.matmul(x, T.transpose(store[f"backbone.layer{i}.attn.wq"]))
    k = T.matmul(x, T.transpose(store[f"backbone.layer{i}.attn.wk"]))
    v = T.matmul(x, T.transpose(store[f"backbone.layer{i}.attn.wv"]))
    out = T.gated_mha(q, k, v, n_heads)
    return T.matmul(out, T.transpose(store[f"backbone.layer{i}.attn.wo"]))


def _layer_ffn(x: DenseArray, store: ParamStore, i: int) -> DenseArray:
    h = T.tanh(T.matmul(x, T.transpose(store[f"backbone.layer{i}.ffn.w1"])))
    return T.matmul(h, T.transpose(store[f"backbone.layer{i}.ffn.w2"]))


def encode(vis_global: TokenSequence, vis_wrist: TokenSequence, text: TokenSequence,
           queries: TokenSequence, store: ParamStore, config: BackboneConfig) -> LayerStates:
    """Run the frozen transformer over [visual, text, query] tokens.

    Full non-causal attention; pre-norm layers. The hidden state after every
    layer is split back into its segments. There is no positional encoding
    within a view's cells (cell centers already live in the descriptors), so
    permuting visual tokens permutes the corresponding output rows.
    """
    parts = (vis_global, vis_wrist, text, queries)
    expected = ("visual-global", "visual-wrist", "text", "query")
    for p, kind in zip(parts, expected):
        if p.kind != kind:
            raise ShapeError(f"expected {kind} tokens, got {p.kind}")
        if p.embeddings.shape[1] != config.d_model:
            raise ShapeError(f"{kind} tokens have width {p.embeddings.shape[1]}, "
                             f"expected {config.d_model}")
    widths = [p.n_tokens for p in parts]
    seg_ids = np.repeat(np.arange(4), widths)
    seg = T.gather_rows(store["backbone.embed.segment"], seg_ids)
    x = T.add(T.concat([p.embeddings for p in parts], axis=0), seg)

    n_vis = widths[0] + widths[1]
    n_txt = widths[2]
    layers = []
    for i in range(config.n_layers):
        x = T.add(x, _layer_attn(T.layer_norm(x), store, i, config.n_heads))
        x = T.add(x, _layer_ffn(T.layer_norm(x), store, i))
        layers.append((
            T.narrow(x, 0, 0, n_vis),
            T.narrow(x, 0, n_vis, n_txt),
            T.narrow(x, 0, n_vis + n_txt, widths[3]),
        ))
    return LayerStates(layers)


def observe(state: WorldState, instruction, store: ParamStore,
            config: BackboneConfig) -> LayerStates:
    """Convenience: encode views + instruction + queries in one call."""
    return encode(
        encode_view(state, "global", store, config),
        encode_view(state, "wrist", store, config),
        tokenize_instruction(instruction, store, config),
        query_tokens(store),
        store, config,
    )
