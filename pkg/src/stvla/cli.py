"""Command line interface.

Subcommands: gen-data, annotate, train, eval, ablate, dump-traj. Every run
echoes its resolved configuration into its report directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .ablate import DEFAULT_MATRIX, ablate, load_matrix
from .config import RunConfig, format_config, load_config
from .dataset import chunk_trajectory, load, serialize
from .evaluate import run_suite
from .report import (dump_trajectory, trajectory_figure, training_curve_figure,
                     write_ablation_report, write_eval_report)
from .sim import (SimConfig, all_subtasks, evaluate_rollout, generate_episode,
                  make_task, scene_seed_for, template_words)
from .stack import PolicyStack
from .train import (build_samples, build_stack, generate_dataset,
                    load_and_split, train_stage1, train_stage2)


def _add_config_arg(p):
    p.add_argument("--config", default=None, help="key=value config file")


def _cfg_from(args, **overrides) -> RunConfig:
    cfg = load_config(args.config)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **clean).validate() if clean else cfg


def cmd_gen_data(args) -> int:
    cfg = _cfg_from(args, subtasks=args.subtasks, episodes_per=args.episodes_per,
                    hz=args.hz, seed=args.seed, data_dir=args.out,
                    cos_thresh=args.cos_thresh, max_chunk_steps=args.max_chunk)
    path = generate_dataset(cfg, args.out or cfg.data_dir)
    ds = load(path)
    print(f"wrote {path} ({ds.header['n_episodes']} episodes, "
          f"{len(ds.records)} chunk samples)")
    return 0


def cmd_annotate(args) -> int:
    """Re-chunk an existing dataset with new parameters (episodes regenerate
    deterministically from the generation seed recorded in the header)."""
    src = load(Path(args.data) / "dataset.jsonl")
    gen = src.header.get("gen", {})
    if not gen:
        print("dataset header lacks generation parameters; cannot re-annotate",
              file=sys.stderr)
        return 2
    cfg = _cfg_from(args, seed=gen["seed"], subtasks=gen["subtasks"],
                    episodes_per=gen["episodes_per"], hz=src.hz,
                    cos_thresh=args.cos_thresh, max_chunk_steps=args.max_chunk)
    path = generate_dataset(cfg, args.out)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg_from(args, seed=args.seed, data_dir=args.data)
    out = Path(args.ckpt_out or cfg.ckpt_out or "checkpoint.ckpt")
    _, train_ds, heldout_ds = load_and_split(cfg)

    if args.stage == 1:
        stack = build_stack(cfg)
        samples = build_samples(train_ds, stack)
        stack, report = train_stage1(cfg, samples, stack)
    else:
        if args.ckpt_in:
            stack = PolicyStack.from_checkpoint(args.ckpt_in)
        else:
            stack = build_stack(cfg)  # cold start
        samples = build_samples(train_ds, stack)
        heldout = build_samples(heldout_ds, stack) if heldout_ds.records else None
        stack, report = train_stage2(cfg, samples, heldout, stack)

    stack.save(out)
    summary = report.summary()
    (out.parent / (out.stem + ".train.json")).write_text(
        json.dumps({"config": cfg.echo(), "run_id": cfg.run_id(),
                    **summary}, sort_keys=True, indent=2) + "\n")
    print(f"stage {args.stage} done: epochs={len(summary['epoch_losses'])} "
          f"final_loss={summary['epoch_losses'][-1] if summary['epoch_losses'] else None} "
          f"flagged={summary['flagged']} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg_from(args, eval_episodes=args.episodes, eval_seed=args.seed,
                    workers=args.workers)
    stack = PolicyStack.from_checkpoint(args.ckpt)
    sim_cfg = SimConfig(hz=cfg.hz, workspace_half=cfg.workspace_half,
                        dt_min=cfg.dt_min)
    report = run_suite(stack, args.suite, cfg.eval_episodes, cfg.eval_seed,
                       sim_cfg=sim_cfg, budget=cfg.eval_budget,
                       history_frames=stack.cfg.history_frames,
                       workers=cfg.workers, config_echo=cfg.echo(),
                       run_id=cfg.run_id())
    out = Path(args.out)
    write_eval_report(report, out)
    print(f"suite={args.suite} episodes={len(report.rows)} "
          f"SR={report.overall.sr:.3f} +/- {report.overall.sr_std:.3f} "
          f"CT_median={report.overall.ct_median:.2f}s -> {out}/report.json")
    return 0


def cmd_ablate(args) -> int:
    cfg = _cfg_from(args)
    matrix = load_matrix(args.matrix) if args.matrix else DEFAULT_MATRIX
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows, trends = ablate(cfg, matrix, seeds=seeds, work_dir=Path(args.out) / "work",
                          suites=args.suite)
    flat = [{k: v for k, v in r.items() if k != "suites"} for r in rows]
    path = write_ablation_report(flat, trends, args.out)
    print(f"ablation table -> {path}")
    for name, trend in trends.items():
        print(f"trend {name}: {'PASS' if trend['pass'] else 'FAIL'}")
    return 0


def cmd_dump_traj(args) -> int:
    if args.ckpt:
        policy = PolicyStack.from_checkpoint(args.ckpt)
        history_frames = policy.cfg.history_frames
    else:
        from .sim import ExpertReplayPolicy

        task0 = make_task(args.suite, args.variant, args.scene_seed)
        policy = ExpertReplayPolicy(generate_episode(task0))
        history_frames = 2
    task = make_task(args.suite, args.variant, args.scene_seed)
    result = evaluate_rollout(task, policy, SimConfig(), budget=args.budget,
                              history_frames=history_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{task.suite}_{task.variant}_{task.scene_seed}"
    dump_trajectory(result.trace, out / f"{stem}.txt")
    if args.svg:
        trajectory_figure(result.trace, out / f"{stem}.svg",
                          title=f"{task.template_id} "
                                f"{'success' if result.success else 'failure'}")
    print(f"success={result.success} ct={result.completion_time:.2f}s -> {out}/{stem}.txt")
    return 0


def cmd_show_config(args) -> int:
    print(format_config(load_config(args.config)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stvla",
                                     description="spatiotemporal tabletop policy bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate + annotate + serialize the dataset")
    _add_config_arg(p)
    p.add_argument("--subtasks", type=int, default=None)
    p.add_argument("--episodes-per", type=int, default=None)
    p.add_argument("--hz", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--cos-thresh", type=float, default=None)
    p.add_argument("--max-chunk", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("annotate", help="re-chunk an existing dataset")
    _add_config_arg(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cos-thresh", type=float, default=None)
    p.add_argument("--max-chunk", type=int, default=None)
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("train", help="run one training stage")
    _add_config_arg(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ckpt-in", default=None)
    p.add_argument("--ckpt-out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on task suites")
    _add_config_arg(p)
    p.add_argument("--suite", default="all",
                   choices=("spatial", "object", "goal", "long", "all"))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="eval_out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the flag matrix")
    _add_config_arg(p)
    p.add_argument("--matrix", default=None, help="JSON matrix file")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--suite", default="all")
    p.add_argument("--out", default="ablation_out")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-traj", help="roll out one episode and dump its trace")
    p.add_argument("--suite", default="object",
                   choices=("spatial", "object", "goal", "long"))
    p.add_argument("--variant", type=int, default=0)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--ckpt", default=None, help="default: expert replay")
    p.add_argument("--budget", type=float, default=20.0)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out", default="traj_out")
    p.set_defaults(fn=cmd_dump_traj)

    p = sub.add_parser("show-config", help="print the resolved configuration")
    _add_config_arg(p)
    p.set_defaults(fn=cmd_show_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
