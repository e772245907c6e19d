"""Closed-loop evaluation: rollouts, generalization variants, ablations.

Each episode replans every executed chunk: the policy produces a chunk from
the current observation and the whole chunk runs before the next plan.
Variants share layout seeds with the in-distribution baseline so performance
drops are paired comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .env import (make_task, novel_type_for, rephrase_instruction, reset, step,
                  success_check, swap_novel_object, default_synonym_table)
from .head import Observation, policy_forward
from .msm import SkillMemory
from .params import ParamStore

VARIANTS = ("in-dist", "rephrased", "novel-object")


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    task_kind: str
    target_type: int
    success: bool
    steps: int


@dataclass
class EvalResult:
    variant: str
    success_rate: float
    episodes: list = field(default_factory=list)
    drop_pct: float | None = None   # relative to in-dist, for variant runs


def eval_tasks(config: RunConfig) -> list:
    tasks = []
    for kind in config.task_kinds:
        for t in config.train_types:
            tasks.append(make_task(kind, t))
    return tasks


def run_episode(task, instruction, store: ParamStore, memory: SkillMemory | None,
                config: RunConfig, seed: int) -> tuple:
    """One closed-loop episode; returns (success, steps_used)."""
    bcfg = config.backbone_config()
    hcfg = config.head_config()
    state = reset(task, seed, config.n_distractors)
    tick = 0
    while state.step_count < task.max_steps:
        noise_seed = int(np.random.default_rng(
            np.random.SeedSequence((seed, tick, 0x11CE))).integers(0, 2**31 - 1))
        chunk = policy_forward(Observation(state, list(instruction)), state.proprio(),
                               memory, store, bcfg, hcfg, config.r_retrieval,
                               seed=noise_seed, enable_mol=config.enable_mol,
                               enable_msm=config.enable_msm)
        for action in chunk.actions:
            state = step(state, action)
            if success_check(state, task):
                return True, state.step_count
            if state.step_count >= task.max_steps:
                break
        tick += 1
    return False, state.step_count


def evaluate(store: ParamStore, memory: SkillMemory | None, config: RunConfig,
             variant: str = "in-dist", n_episodes: int | None = None) -> EvalResult:
    """Seeded rollouts for one variant. Layout seeds are variant-independent."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; options: {VARIANTS}")
    if n_episodes is None:
        n_episodes = config.n_eval_episodes
    base_tasks = eval_tasks(config)
    synonyms = default_synonym_table(config.vocab_size)
    logs = []
    for i in range(n_episodes):
        task = base_tasks[i % len(base_tasks)]
        instruction = list(task.instruction_template)
        if variant == "rephrased":
            instruction = rephrase_instruction(instruction, synonyms,
                                               seed=config.seed_eval * 1000 + i)
        elif variant == "novel-object":
            task = swap_novel_object(task, novel_type_for(task.target_type),
                                     config.vocab_size)
            instruction = list(task.instruction_template)
        ep_seed = int(np.random.default_rng(
            np.random.SeedSequence((config.seed_eval, i, 0xE9))).integers(0, 2**31 - 1))
        success, steps_used = run_episode(task, instruction, store, memory, config, ep_seed)
        logs.append(EpisodeLog(i, ep_seed, task.kind, task.target_type, success, steps_used))
    rate = float(np.mean([l.success for l in logs])) if logs else 0.0
    return EvalResult(variant=variant, success_rate=rate, episodes=logs)


def evaluate_with_drop(store: ParamStore, memory: SkillMemory | None,
                       config: RunConfig, variant: str,
                       n_episodes: int | None = None) -> tuple:
    """Run in-dist plus the requested variant; attach the relative drop."""
    base = evaluate(store, memory, config, "in-dist", n_episodes)
    if variant == "in-dist":
        base.drop_pct = 0.0
        return base, base
    res = evaluate(store, memory, config, variant, n_episodes)
    if base.success_rate > 0:
        res.drop_pct = 100.0 * (base.success_rate - res.success_rate) / base.success_rate
    else:
        res.drop_pct = 0.0
    return base, res


ABLATION_GRID = (
    ("no-mol-no-msm", False, False),
    ("mol-only", True, False),
    ("msm-only", False, True),
    ("full", True, True),
)


@dataclass
class AblationRow:
    label: str
    enable_mol: bool
    enable_msm: bool
    rates: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates))

    @property
    def spread(self) -> float:
        return float((max(self.rates) - min(self.rates)) / 2) if len(self.rates) > 1 else 0.0


def run_ablation(config: RunConfig, seeds: list, n_episodes: int | None = None,
                 records=None, quiet: bool = True) -> list:
    """Train and evaluate the four flag combinations for each seed."""
    from dataclasses import replace
    from .training import train
    if not seeds:
        raise ValueError("need at least one seed")
    rows = [AblationRow(label, m, s) for label, m, s in ABLATION_GRID]
    for seed in seeds:
        for row in rows:
            cfg = replace(config, enable_mol=row.enable_mol, enable_msm=row.enable_msm,
                          seed_model=seed, seed_train=seed + 1, seed_eval=seed + 2,
                          checkpoint="", metrics="")
            result = train(cfg, records=records, quiet=True)
            res = evaluate(result.store, result.memory, cfg, "in-dist", n_episodes)
            row.rates.append(res.success_rate)
            if not quiet:
                print(f"seed {seed} {row.label}: {res.success_rate:.2%}")
    return rows
