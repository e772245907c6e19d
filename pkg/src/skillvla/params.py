"""Named parameter store, Adam optimizer, and lossless serialization."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ContractError, VersionError
from .tensor import DenseArray

STORE_MAGIC = b"SVLAPST1"
STORE_VERSION = 1


class ParamStore:
    """Ordered map name -> (DenseArray, trainable flag).

    Iteration order is insertion order and therefore deterministic. The
    trainable flag mirrors the array's requires_grad; non-trainable entries
    never receive gradients or optimizer updates.
    """

    def __init__(self):
        self._entries: dict[str, tuple[DenseArray, bool]] = {}
        self.version = STORE_VERSION

    def add(self, name: str, arr: DenseArray, trainable: bool) -> DenseArray:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr.requires_grad = bool(trainable)
        self._entries[name] = (arr, bool(trainable))
        return arr

    def __getitem__(self, name: str) -> DenseArray:
        try:
            return self._entries[name][0]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        for name, (arr, trainable) in self._entries.items():
            yield name, arr, trainable

    def is_trainable(self, name: str) -> bool:
        if name not in self._entries:
            raise ContractError(f"unknown parameter {name!r}")
        return self._entries[name][1]

    def set_trainable(self, prefix: str, trainable: bool) -> int:
        """Flip the trainable flag on every entry whose name starts with prefix."""
        n = 0
        for name, (arr, _) in list(self._entries.items()):
            if name.startswith(prefix):
                arr.requires_grad = bool(trainable)
                self._entries[name] = (arr, bool(trainable))
                n += 1
        if n == 0:
            raise ContractError(f"no parameters match prefix {prefix!r}")
        return n

    def reset_grads(self) -> None:
        """Zero (allocating if needed) the gradient of every trainable entry."""
        for _, (arr, trainable) in self._entries.items():
            if trainable:
                arr.zero_grad()

    def checksum(self, prefix: str = "") -> str:
        """Content hash over all entries matching the name prefix.

        Independent of iteration order: matched names are sorted before
        hashing. Raises if nothing matches.
        """
        matched = sorted(n for n in self._entries if n.startswith(prefix))
        if not matched:
            raise ContractError(f"checksum: no parameters match prefix {prefix!r}")
        h = hashlib.sha256()
        for name in matched:
            arr = self._entries[name][0]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.data.tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        index = []
        payload = bytearray()
        for name, (arr, trainable) in self._entries.items():
            raw = arr.data.tobytes()
            index.append({
                "name": name,
                "shape": list(arr.shape),
                "trainable": trainable,
                "nbytes": len(raw),
            })
            payload.extend(raw)
        header = json.dumps({"version": self.version, "entries": index},
                            sort_keys=True).encode()
        body = STORE_MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if len(blob) < len(STORE_MAGIC) + 4 + 32:
            raise VersionError("parameter blob too short")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise VersionError("parameter blob checksum mismatch")
        if body[: len(STORE_MAGIC)] != STORE_MAGIC:
            raise VersionError("bad parameter blob magic")
        off = len(STORE_MAGIC)
        (hlen,) = struct.unpack_from("<I", body, off)
        off += 4
        header = json.loads(body[off:off + hlen])
        off += hlen
        if header["version"] != STORE_VERSION:
            raise VersionError(f"unsupported parameter store version {header['version']}")
        store = cls()
        for ent in header["entries"]:
            raw = body[off:off + ent["nbytes"]]
            off += ent["nbytes"]
            data = np.frombuffer(raw, dtype=np.float64).reshape(ent["shape"]).copy()
            store.add(ent["name"], DenseArray(data), trainable=ent["trainable"])
        return store

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def param_checksum(store: ParamStore, prefix: str = "") -> str:
    return store.checksum(prefix)


class Adam:
    """Adaptive-moment optimizer over a ParamStore's trainable entries.

    First and second moments persist inside this object and are serialized
    with checkpoints so runs can resume bit-exactly.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, arr, trainable in self.store.items():
            if not trainable:
                continue
            if arr.grad is None:
                raise ContractError(f"trainable parameter {name!r} has no gradient")
            g = arr.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(arr.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(arr.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            arr.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_bytes(self) -> bytes:
        names = sorted(self._m)
        index = [{"name": n, "shape": list(self._m[n].shape)} for n in names]
        header = json.dumps({"t": self.t, "entries": index}, sort_keys=True).encode()
        payload = bytearray()
        for n in names:
            payload.extend(self._m[n].tobytes())
            payload.extend(self._v[n].tobytes())
        return struct.pack("<I", len(header)) + header + bytes(payload)

    def load_state_bytes(self, blob: bytes) -> None:
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4:4 + hlen])
        off = 4 + hlen
        self.t = int(header["t"])
        self._m.clear()
        self._v.clear()
        for ent in header["entries"]:
            shape = tuple(ent["shape"])
            n = int(np.prod(shape)) if shape else 1
            nbytes = n * 8
            self._m[ent["name"]] = np.frombuffer(blob[off:off + nbytes],
                                                 dtype=np.float64).reshape(shape).copy()
            off += nbytes
            self._v[ent["name"]] = np.frombuffer(blob[off:off + nbytes],
                                                 dtype=np.float64).reshape(shape).copy()
            off += nbytes


def adam_step(optimizer: Adam) -> None:
    """One optimizer step; moments persist inside the optimizer."""
    optimizer.step()
