"""Checkpoint container: params, optimizer moments, memory, RNG state.

One binary file with a JSON metadata block and length-prefixed payload
sections, closed by a sha256 digest. Nothing time-dependent is stored, so
identical runs write identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

from .config import RunConfig
from .errors import DataFormatError, VersionError
from .msm import SkillMemory
from .params import Adam, ParamStore

CKPT_MAGIC = b"SVLACKP1"
CKPT_VERSION = 1

# fields that must match between a checkpoint and the config evaluating it
_SHAPE_FIELDS = ("n_layers", "d_model", "n_heads", "n_queries", "vocab_size",
                 "n_head_layers", "d_k", "n_h", "h_c", "seed_model")


@dataclass
class Checkpoint:
    config: RunConfig
    store: ParamStore
    memory: SkillMemory
    step: int
    rng_state: dict | None = None
    optimizer_state: bytes | None = None


def save_checkpoint(path, config: RunConfig, store: ParamStore, memory: SkillMemory,
                    optimizer: Adam | None, step: int, rng_state: dict | None) -> None:
    meta = json.dumps({
        "version": CKPT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "rng_state": rng_state,
    }, sort_keys=True).encode()
    sections = [meta, store.to_bytes(), memory.to_bytes(),
                optimizer.state_bytes() if optimizer is not None else b""]
    body = bytearray(CKPT_MAGIC)
    for sec in sections:
        body.extend(struct.pack("<Q", len(sec)))
        body.extend(sec)
    body.extend(hashlib.sha256(bytes(body)).digest())
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_checkpoint(path, expect_config: RunConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < len(CKPT_MAGIC) + 32 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise VersionError(f"{path} is not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise VersionError(f"checkpoint {path} failed its content checksum")
    off = len(CKPT_MAGIC)
    sections = []
    for _ in range(4):
        (n,) = struct.unpack_from("<Q", body, off)
        off += 8
        sections.append(body[off:off + n])
        off += n
    meta = json.loads(sections[0])
    if meta["version"] != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {meta['version']}")
    config = RunConfig.from_dict(meta["config"])
    if expect_config is not None:
        for name in _SHAPE_FIELDS:
            if getattr(config, name) != getattr(expect_config, name):
                raise VersionError(
                    f"checkpoint/config mismatch on {name}: "
                    f"{getattr(config, name)} vs {getattr(expect_config, name)}")
    store = ParamStore.from_bytes(sections[1])
    memory = SkillMemory.from_bytes(sections[2])
    return Checkpoint(config=config, store=store, memory=memory, step=meta["step"],
                      rng_state=meta["rng_state"],
                      optimizer_state=sections[3] if sections[3] else None)
