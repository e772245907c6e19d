"""Command-line entry points: gen-data, train, eval, ablate, inspect-gates,
inspect-memory."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .env import generate_dataset, make_task
from .errors import SkillVLAError
from .evaluation import (VARIANTS, eval_tasks, evaluate_with_drop, run_ablation,
                         run_episode, evaluate)
from .msm import key_value_correlation
from .training import MetricsWriter, train


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="directory for outputs (prefixes config paths)")
    for name in ("data", "model", "train", "eval"):
        p.add_argument(f"--seed-{name}", type=int, default=None,
                       help=f"override seed_{name}")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("data", "model", "train", "eval"):
        v = getattr(args, f"seed_{name}")
        if v is not None:
            overrides[f"seed_{name}"] = v
    if overrides:
        cfg = replace(cfg, **overrides)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        cfg = replace(cfg,
                      dataset=os.path.join(args.out, os.path.basename(cfg.dataset)),
                      checkpoint=os.path.join(args.out, os.path.basename(cfg.checkpoint)),
                      metrics=os.path.join(args.out, os.path.basename(cfg.metrics)))
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    tasks = [make_task(kind, t) for kind in cfg.task_kinds for t in cfg.train_types]
    os.makedirs(os.path.dirname(os.path.abspath(cfg.dataset)), exist_ok=True)
    records = generate_dataset(cfg.n_traj, tasks, cfg.seed_data, path=cfg.dataset,
                               n_distractors=cfg.n_distractors)
    print(f"wrote {len(records)} trajectories to {cfg.dataset}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    result = train(cfg, resume_from=args.resume, quiet=False)
    print(f"trained {result.final_step} steps; final loss {result.losses[-1]:.4f}; "
          f"checkpoint {cfg.checkpoint}; memory size {len(result.memory)}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.checkpoint or cfg.checkpoint, expect_config=cfg)
    base, res = evaluate_with_drop(ckpt.store, ckpt.memory, cfg, args.variant,
                                   n_episodes=args.episodes)
    print(f"in-dist success rate: {base.success_rate:.1%} "
          f"({len(base.episodes)} episodes)")
    if args.variant != "in-dist":
        print(f"{args.variant} success rate: {res.success_rate:.1%} "
              f"(drop {res.drop_pct:.1f}%)")
    if args.log:
        with open(args.log, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["episode", "seed", "variant", "task_kind", "target_type",
                        "success", "steps"])
            for r in (base, res) if res is not base else (base,):
                for e in r.episodes:
                    w.writerow([e.episode, e.seed, r.variant, e.task_kind,
                                e.target_type, int(e.success), e.steps])
    if cfg.metrics:
        MetricsWriter(cfg.metrics, resume=True).row(
            ckpt.step, success_rate=f"{res.success_rate:.4f}", variant=res.variant)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = run_ablation(cfg, seeds, n_episodes=args.episodes, quiet=False)
    print(f"{'variant':<16} {'mol':<5} {'msm':<5} success")
    for row in rows:
        print(f"{row.label:<16} {str(row.enable_mol):<5} {str(row.enable_msm):<5} "
              f"{row.mean:.1%} +- {row.spread:.1%}")
    return 0


def cmd_inspect_gates(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.checkpoint or cfg.checkpoint, expect_config=cfg)
    run_cfg = replace(cfg, seed_eval=args.episode_seed)
    task = eval_tasks(run_cfg)[0]
    reports = collect_gate_reports(ckpt.store, ckpt.memory, run_cfg, task)
    writer = csv.writer(sys.stdout if not args.output else open(args.output, "w", newline=""))
    writer.writerow(["layer", "head", "alpha_s", "alpha_v"])
    for (layer, h), (a_s, a_v) in sorted(reports.items()):
        writer.writerow([layer, h, f"{a_s:.6f}", f"{a_v:.6f}"])
    return 0


def collect_gate_reports(store, memory, config: RunConfig, task) -> dict:
    """Average per-layer, per-head gate values over one episode's plans."""
    from .env import reset, step, success_check
    from .head import Observation, denoise
    from .backbone import observe
    from .tensor import no_grad
    from .head import clip_chunk, D_ACTION

    state = reset(task, config.seed_eval, config.n_distractors)
    sums: dict = {}
    counts: dict = {}
    ticks = 0
    hcfg = config.head_config()
    bcfg = config.backbone_config()
    while state.step_count < task.max_steps:
        rng = np.random.default_rng(np.random.SeedSequence((config.seed_eval, ticks)))
        with no_grad():
            states = observe(state, list(task.instruction_template), store, bcfg)
            out = denoise(rng.standard_normal((hcfg.h_c, D_ACTION)), states,
                          state.proprio(), memory, store, hcfg, config.r_retrieval,
                          enable_mol=config.enable_mol, enable_msm=config.enable_msm)
        for rep in out.gate_reports:
            for h in range(len(rep.alpha_s)):
                key = (rep.layer, h)
                a = sums.setdefault(key, np.zeros(2))
                a += (rep.alpha_s[h], rep.alpha_v[h])
                counts[key] = counts.get(key, 0) + 1
        for action in clip_chunk(out.a_r.data):
            state = step(state, action)
            if success_check(state, task) or state.step_count >= task.max_steps:
                break
        if success_check(state, task):
            break
        ticks += 1
    return {k: (v[0] / counts[k], v[1] / counts[k]) for k, v in sums.items()}


def cmd_inspect_memory(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.checkpoint or cfg.checkpoint, expect_config=cfg)
    if len(ckpt.memory) < 2:
        print("memory has fewer than 2 entries; nothing to correlate", file=sys.stderr)
        return 1
    for metric in ("l1", "cosine"):
        corr = key_value_correlation(ckpt.memory, args.probes, metric=metric)
        print(f"key/value distance correlation ({metric}): {corr:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillvla",
        description="Desk-scale vision-language-action policy harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the policy by imitation")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: config path)")
    p.add_argument("--variant", choices=VARIANTS, default="in-dist")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--log", help="write a per-episode CSV log here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate all module on/off combinations")
    _add_common(p)
    p.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect-gates", help="per-layer gate values over one episode")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: config path)")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--output", help="CSV output path (default: stdout)")
    p.set_defaults(fn=cmd_inspect_gates)

    p = sub.add_parser("inspect-memory", help="key/value distance correlation")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: config path)")
    p.add_argument("--probes", type=int, default=32)
    p.set_defaults(fn=cmd_inspect_memory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SkillVLAError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
