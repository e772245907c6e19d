"""Skill memory: FIFO store of perceptual keys and expert action chunks.

Keys pool the backbone's visual states at a shallow, a middle, and a deep
layer, project each through one shared trainable map, and concatenate them.
Retrieval is exact top-R nearest neighbors under L1 distance with
oldest-first tie-breaking, optionally excluding entries from the querying
trajectory's own neighborhood. Retrieved chunks are read back into the
latent stream through a single-head cross-attention; retrieval itself is
non-differentiable and stored values never receive gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import LayerStates
from .errors import ContractError, DegenerateCorrelationError, VersionError
from .params import ParamStore
from .tensor import DenseArray

MEMORY_MAGIC = b"SVLAMEM1"
MEMORY_VERSION = 1
DEFAULT_CAPACITY = 2048


def hierarchy_indices(n_layers: int) -> tuple:
    """Shallow, middle, deep layer indices: 0, floor(0.8 L), L-1."""
    return 0, int(np.floor(0.8 * n_layers)), n_layers - 1


def build_key(states: LayerStates, key_proj: DenseArray) -> DenseArray:
    """Pooled shallow|mid|deep visual features, each projected to d_k."""
    idx = hierarchy_indices(states.n_layers)
    parts = []
    for l in idx:
        pooled = T.mean_rows(states.visual(l))            # [1, d_model]
        parts.append(T.matmul(pooled, T.transpose(key_proj)))
    return T.reshape(T.concat(parts, axis=1), (3 * key_proj.shape[0],))


@dataclass
class SkillEntry:
    key: np.ndarray          # [3 * d_k]
    value: np.ndarray        # [H_c, d_a] expert action chunk
    traj_id: int
    t: int


class SkillMemory:
    """Capacity-bounded FIFO of (key, value, provenance) entries.

    Backed by preallocated ring buffers so retrieval is one vectorized scan.
    Eviction is strictly oldest-first.
    """

    def __init__(self, key_dim: int, chunk_shape: tuple, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.key_dim = int(key_dim)
        self.chunk_shape = tuple(int(x) for x in chunk_shape)
        self.capacity = int(capacity)
        self._keys = np.zeros((capacity, key_dim))
        self._values = np.zeros((capacity, int(np.prod(chunk_shape))))
        self._traj = np.zeros(capacity, dtype=np.int64)
        self._t = np.zeros(capacity, dtype=np.int64)
        self._seq = np.zeros(capacity, dtype=np.int64)
        self._count = 0
        self._next_seq = 0

    def __len__(self) -> int:
        return self._count

    def insert(self, entry: SkillEntry) -> None:
        key = np.asarray(entry.key, dtype=np.float64).reshape(-1)
        if key.shape != (self.key_dim,):
            raise ContractError(f"key has shape {key.shape}, expected ({self.key_dim},)")
        if not np.all(np.isfinite(key)):
            raise ContractError("non-finite key")
        value = np.asarray(entry.value, dtype=np.float64)
        if value.shape != self.chunk_shape:
            raise ContractError(f"value has shape {value.shape}, expected {self.chunk_shape}")
        slot = self._next_seq % self.capacity
        self._keys[slot] = key
        self._values[slot] = value.reshape(-1)
        self._traj[slot] = entry.traj_id
        self._t[slot] = entry.t
        self._seq[slot] = self._next_seq
        self._next_seq += 1
        self._count = min(self._count + 1, self.capacity)

    def _entry_at(self, slot: int) -> SkillEntry:
        return SkillEntry(
            key=self._keys[slot].copy(),
            value=self._values[slot].reshape(self.chunk_shape).copy(),
            traj_id=int(self._traj[slot]),
            t=int(self._t[slot]),
        )

    def entries(self) -> list:
        """All live entries, oldest first."""
        if self._count == 0:
            return []
        order = np.argsort(self._seq[: self._count])
        return [self._entry_at(int(s)) for s in order]

    def retrieve_topR(self, q_obs: np.ndarray, r: int,
                      exclude: tuple | None = None, h_c: int | None = None) -> list:
        """Exact top-R by ascending L1 distance, older entries first on ties.

        exclude=(traj_id, t) skips entries from the same trajectory within
        h_c steps of t. Returns up to r entries; possibly fewer or none.
        """
        if r < 1:
            raise ContractError("r must be >= 1")
        if self._count == 0:
            return []
        q = np.asarray(q_obs, dtype=np.float64).reshape(-1)
        if q.shape != (self.key_dim,):
            raise ContractError(f"query has shape {q.shape}, expected ({self.key_dim},)")
        n = self._count
        dist = np.abs(self._keys[:n] - q).sum(axis=1)
        eligible = np.ones(n, dtype=bool)
        if exclude is not None:
            traj_id, t = exclude
            window = h_c if h_c is not None else self.chunk_shape[0]
            eligible = ~((self._traj[:n] == traj_id)
                         & (np.abs(self._t[:n] - t) < window))
        cand = np.nonzero(eligible)[0]
        if cand.size == 0:
            return []
        order = cand[np.lexsort((self._seq[cand], dist[cand]))]
        return [self._entry_at(int(s)) for s in order[:r]]

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "version": MEMORY_VERSION,
            "key_dim": self.key_dim,
            "chunk_shape": list(self.chunk_shape),
            "capacity": self.capacity,
            "count": self._count,
            "next_seq": self._next_seq,
        }, sort_keys=True).encode()
        payload = bytearray()
        for e in self.entries():
            payload.extend(e.key.tobytes())
            payload.extend(e.value.tobytes())
            payload.extend(struct.pack("<qq", e.traj_id, e.t))
        return MEMORY_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SkillMemory":
        if blob[: len(MEMORY_MAGIC)] != MEMORY_MAGIC:
            raise VersionError("bad memory blob magic")
        off = len(MEMORY_MAGIC)
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + hlen])
        off += hlen
        if header["version"] != MEMORY_VERSION:
            raise VersionError(f"unsupported memory version {header['version']}")
        mem = cls(header["key_dim"], tuple(header["chunk_shape"]), header["capacity"])
        kb = header["key_dim"] * 8
        vb = int(np.prod(header["chunk_shape"])) * 8
        # replay inserts so seq numbering restarts compactly, oldest first
        for _ in range(header["count"]):
            key = np.frombuffer(blob[off:off + kb], dtype=np.float64).copy()
            off += kb
            value = np.frombuffer(blob[off:off + vb], dtype=np.float64).reshape(
                header["chunk_shape"]).copy()
            off += vb
            traj_id, t = struct.unpack_from("<qq", blob, off)
            off += 16
            mem.insert(SkillEntry(key, value, traj_id, t))
        return mem


def refine(a_latents: DenseArray, retrieved: list, wq: DenseArray, wk: DenseArray,
           wv: DenseArray) -> DenseArray:
    """Cross-attention readout of retrieved chunks into the latent stream.

    Retrieved chunk timesteps are projected to keys and values at read time;
    the current latents provide the queries. Empty retrieval yields zeros.
    Stored chunks enter as constants, so no gradient reaches the memory.
    """
    t_a, d_k = a_latents.shape
    if not retrieved:
        return T.zeros((t_a, d_k))
    vals = DenseArray(np.concatenate([e.value for e in retrieved], axis=0))
    k = T.matmul(vals, T.transpose(wk))
    v = T.matmul(vals, T.transpose(wv))
    q = T.matmul(a_latents, T.transpose(wq))
    return T.gated_mha(q, k, v, n_heads=1)


def init_msm_params(store: ParamStore, d_k: int, d_model: int, d_a: int,
                    rng: np.random.Generator) -> None:
    store.add("msm.key_proj", T.randn(rng, (d_k, d_model), 0.05), trainable=True)
    store.add("msm.attn.wq", T.randn(rng, (d_k, d_k), 0.05), trainable=True)
    store.add("msm.attn.wk", T.randn(rng, (d_k, d_a), 0.2), trainable=True)
    store.add("msm.attn.wv", T.randn(rng, (d_k, d_a), 0.2), trainable=True)


def _pairwise_distances(anchor: np.ndarray, others: np.ndarray, metric: str) -> np.ndarray:
    if metric == "l1":
        return np.abs(others - anchor).sum(axis=1)
    if metric == "cosine":
        na = np.linalg.norm(anchor)
        no = np.linalg.norm(others, axis=1)
        denom = np.maximum(na * no, 1e-300)
        return 1.0 - (others @ anchor) / denom
    raise ContractError(f"unknown metric {metric!r}")


def key_value_correlation(memory: SkillMemory, n_probes: int, metric: str = "l1",
                          seed: int = 0) -> float:
    """Mean Pearson correlation between key distances and value distances.

    For each sampled anchor entry, distances from its key to all other keys
    are correlated against distances between the corresponding flattened
    values. A strongly positive value means similar observations stored
    similar skills.
    """
    if len(memory) < 2:
        raise ContractError("need at least 2 entries")
    if n_probes < 1:
        raise ContractError("n_probes must be >= 1")
    n = len(memory)
    keys = memory._keys[:n]
    values = memory._values[:n]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FF)))
    anchors = rng.choice(n, size=min(n_probes, n), replace=False)
    corrs = []
    for a in anchors:
        mask = np.arange(n) != a
        dk = _pairwise_distances(keys[a], keys[mask], metric)
        dv = _pairwise_distances(values[a], values[mask], metric)
        if np.ptp(dk) == 0.0 or np.ptp(dv) == 0.0:
            raise DegenerateCorrelationError(
                "distance lists have zero variance; correlation undefined")
        corrs.append(float(np.corrcoef(dk, dv)[0, 1]))
    return float(np.mean(corrs))
