"""Imitation training loop with memory construction and checkpointing."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BACKBONE_PREFIX, observe
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .env import expert_chunk, load_dataset
from .errors import NumericError
from .head import D_ACTION, chunk_loss
from .msm import SkillEntry, SkillMemory, build_key
from .params import Adam, ParamStore
from .tensor import no_grad

METRICS_HEADER = ["step", "train_loss", "eval_success_rate", "eval_variant", "wallclock_s"]


@dataclass
class TrainResult:
    config: RunConfig
    store: ParamStore
    memory: SkillMemory
    losses: list = field(default_factory=list)
    final_step: int = 0


def build_model(config: RunConfig):
    from .head import init_model_params
    config.validate()
    store = init_model_params(config.backbone_config(), config.head_config(),
                              config.seed_model)
    if config.unfreeze_backbone:
        store.set_trainable(BACKBONE_PREFIX, True)
    return store


def new_memory(config: RunConfig) -> SkillMemory:
    return SkillMemory(key_dim=3 * config.d_k, chunk_shape=(config.h_c, D_ACTION),
                       capacity=config.capacity)


class MetricsWriter:
    def __init__(self, path, resume: bool = False):
        self.path = path or None
        if not path:
            return
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if not resume or not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def row(self, step, train_loss="", success_rate="", variant="", wallclock=0.0):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([step, train_loss, success_rate, variant,
                                    f"{wallclock:.3f}"])


def train(config: RunConfig, resume_from: str | None = None, quiet: bool = True,
          records=None) -> TrainResult:
    """Train the action head (and query tokens) by imitation.

    Per step: sample a batch of (trajectory, timestep) positions, encode each
    observation through the frozen backbone, insert its (key, expert chunk)
    into the skill memory, compute the reconstruction loss with
    self-excluding retrieval, and take one Adam step on the batch mean.
    """
    config.validate()
    if records is None:
        records = load_dataset(config.dataset)
    bcfg = config.backbone_config()
    hcfg = config.head_config()

    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_config=config)
        store, memory, start_step = ckpt.store, ckpt.memory, ckpt.step
        if config.unfreeze_backbone:
            store.set_trainable(BACKBONE_PREFIX, True)
        optimizer = Adam(store, config.lr, config.beta1, config.beta2, config.adam_eps)
        if ckpt.optimizer_state:
            optimizer.load_state_bytes(ckpt.optimizer_state)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
    else:
        store = build_model(config)
        memory = new_memory(config)
        optimizer = Adam(store, config.lr, config.beta1, config.beta2, config.adam_eps)
        rng = np.random.default_rng(np.random.SeedSequence((config.seed_train, 0x7124)))

    positions = [(ri, t) for ri, rec in enumerate(records) for t in range(len(rec.steps))]
    metrics = MetricsWriter(config.metrics, resume=resume_from is not None)
    result = TrainResult(config=config, store=store, memory=memory)
    t0 = time.monotonic()

    def save(step):
        if config.checkpoint:
            os.makedirs(os.path.dirname(os.path.abspath(config.checkpoint)), exist_ok=True)
            save_checkpoint(config.checkpoint, config, store, memory, optimizer,
                            step, rng.bit_generator.state)

    for step in range(start_step + 1, config.steps + 1):
        picks = rng.integers(0, len(positions), size=config.batch)
        noises = rng.standard_normal((config.batch, config.h_c, D_ACTION))
        store.reset_grads()
        T.reset_tape()
        total = None
        for b, pick in enumerate(picks):
            ri, t = positions[int(pick)]
            rec = records[ri]
            state, proprio, _ = rec.steps[t]
            states = observe(state, rec.instruction, store, bcfg)
            a_g = expert_chunk(rec, t, config.h_c)
            if config.enable_msm:
                with no_grad():
                    key = build_key(states, store["msm.key_proj"])
                memory.insert(SkillEntry(key.data.copy(), a_g, rec.traj_id, t))
            try:
                loss_b, _ = chunk_loss(a_g, noises[b], states, proprio, memory, store,
                                       hcfg, config.r_retrieval,
                                       exclude=(rec.traj_id, t),
                                       enable_mol=config.enable_mol,
                                       enable_msm=config.enable_msm)
            except NumericError as e:
                raise NumericError(f"aborting at step {step}: {e}") from None
            total = loss_b if total is None else T.add(total, loss_b)
        loss = T.scale(total, 1.0 / config.batch)
        if not np.isfinite(loss.item()):
            raise NumericError(f"aborting at step {step}: loss is not finite")
        T.backward(loss)
        optimizer.step()
        result.losses.append(loss.item())

        if step % config.metrics_every == 0 or step == config.steps:
            wall = time.monotonic() - t0 if config.record_wallclock else 0.0
            metrics.row(step, train_loss=f"{loss.item():.6f}", wallclock=wall)
            if not quiet:
                print(f"step {step} loss {loss.item():.4f}")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save(step)

    result.final_step = config.steps
    save(config.steps)
    return result
