"""Experiment driver.

    memact generate --config spec.json [--force]
    memact train    --config spec.json [--resume]
    memact eval     --config spec.json [--checkpoint PATH] [--sample]
    memact replay   TRAJECTORIES.jsonl [--index N | --id ID] [--checkpoint PATH]

All outputs go to the config's output_dir. Exit status is 2 on any validation
failure (bad config, refused overwrite, mismatched checkpoint).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentSpec, load_spec
from .dcpo import METRIC_FIELDS, IterationLog, Optimizer, demonstrations, sft_train, train
from .environment import ConfigError, Environment, GenerationError, generate_tasks, load_tasks, save_tasks
from .evaluation import evaluate, summarize
from .policy import CheckpointMismatch, PolicyParams
from .rollout import load_trajectories, render_trajectory, replay_check, save_trajectories
from .segmentation import segment

log = logging.getLogger("memact")

EXIT_INVALID = 2
CHECKPOINT = "checkpoint.npz"
VELOCITY = "velocity.npz"
METRICS = "metrics.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _header(spec: ExperimentSpec) -> str:
    return f"# config_hash={spec.config_hash()} code_version={__version__}\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(spec: ExperimentSpec, columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write(_header(spec))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _atomic_write(path: Path, data: bytes | str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _task_paths(spec: ExperimentSpec) -> tuple[Path, Path]:
    return spec.out / "train_tasks.jsonl", spec.out / "eval_tasks.jsonl"


def _env(spec: ExperimentSpec) -> Environment:
    return Environment.from_config(spec.world)


def _load_task_files(spec: ExperimentSpec):
    train_path, eval_path = _task_paths(spec)
    if not train_path.exists() or not eval_path.exists():
        raise UsageError(f"task files missing in {spec.out}; run `memact generate` first")
    return load_tasks(train_path), load_tasks(eval_path)


# ---------------------------------------------------------------- generate

def cmd_generate(spec: ExperimentSpec, force: bool = False) -> list[Path]:
    out = spec.out
    train_path, eval_path = _task_paths(spec)
    world_path = out / "world.json"
    targets = [world_path, train_path, eval_path]
    existing = [p for p in targets if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(map(str, existing))} (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    env = _env(spec)
    tr, ev = spec.train_tasks, spec.eval_tasks
    train_tasks = generate_tasks(env.graph, tr.count, tr.objective_counts, tr.hops, seed=spec.seed * 2 + 1,
                                 prefix="train")
    eval_tasks = generate_tasks(env.graph, ev.count, ev.objective_counts, ev.hops, seed=spec.seed * 2 + 2,
                                prefix="eval")
    _atomic_write(world_path, json.dumps(env.graph.to_dict(), sort_keys=True) + "\n")
    save_tasks(train_tasks, train_path)
    save_tasks(eval_tasks, eval_path)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return targets


# ---------------------------------------------------------------- train

def _save_checkpoint(spec: ExperimentSpec, params: PolicyParams, update: int, opt: Optimizer) -> None:
    out = spec.out
    state = opt.state()
    if state is not None:
        buf = io.BytesIO()
        np.savez(buf, **state)
        _atomic_write(out / VELOCITY, buf.getvalue())
    buf = io.BytesIO()
    params.save(buf, extra={"update": update, "config_hash": spec.config_hash(),
                            "has_velocity": state is not None})
    _atomic_write(out / CHECKPOINT, buf.getvalue())


def _load_checkpoint(spec: ExperimentSpec, path: Path) -> tuple[PolicyParams, dict]:
    params, extra = PolicyParams.load(path, expect_feature_dim=spec.policy.n_features)
    if params.allow_memory != spec.allow_memory:
        raise CheckpointMismatch("checkpoint agent variant differs from the config")
    return params, extra


def _read_metric_rows(path: Path) -> list[str]:
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    return [ln for ln in lines if not ln.startswith("#")][1:]


def warm_start(spec: ExperimentSpec, env: Environment, train_tasks) -> tuple[PolicyParams, dict]:
    params = spec.policy.init_params(spec.allow_memory)
    ws = spec.warm_start
    info = {"demos": 0, "segments": 0, "final_loss": None}
    if ws.demos == 0 or ws.epochs == 0:
        return params, info
    demo_tasks = [train_tasks[i % len(train_tasks)] for i in range(ws.demos)]
    demos = demonstrations(env, demo_tasks, spec.limits, use_memory=spec.allow_memory, seed=spec.seed,
                          early_answer_rate=ws.early_answer_rate)
    segs = [s for d in demos for s in segment(d)]
    params, losses = sft_train(params, segs, ws.epochs, ws.learning_rate, ws.batch_size, seed=spec.seed)
    info.update(demos=len(demos), segments=len(segs), final_loss=losses[-1] if losses else None,
                demo_success=float(np.mean([d.success for d in demos])))
    return params, info


def cmd_train(spec: ExperimentSpec, resume: bool = False) -> tuple[PolicyParams, list[IterationLog]]:
    out = spec.out
    env = _env(spec)
    train_tasks, _ = _load_task_files(spec)
    ckpt, metrics = out / CHECKPOINT, out / METRICS
    opt = Optimizer(spec.train.learning_rate, spec.train.momentum)
    if resume and ckpt.exists():
        params, extra = _load_checkpoint(spec, ckpt)
        if extra.get("config_hash") != spec.config_hash():
            raise CheckpointMismatch("checkpoint was written under a different config")
        start = int(extra["update"])
        if extra.get("has_velocity"):
            with np.load(out / VELOCITY) as z:
                opt.load_state(dict(z))
        rows = _read_metric_rows(metrics)[:start] if metrics.exists() else []
        if len(rows) != start:
            raise CheckpointMismatch(f"metrics log has {len(rows)} rows, checkpoint is at update {start}")
        log.info("resuming at update %d", start)
    else:
        if not resume and (ckpt.exists() or metrics.exists()):
            raise UsageError(f"{out} already holds a training run (use --resume, or a fresh output_dir)")
        params, info = warm_start(spec, env, train_tasks)
        _atomic_write(out / "warm_start.json", json.dumps(info, sort_keys=True) + "\n")
        start, rows = 0, []
        _save_checkpoint(spec, params, 0, opt)

    head = _csv_text(spec, METRIC_FIELDS, [])
    _atomic_write(metrics, head + "".join(rows))
    fh = open(metrics, "a", encoding="utf-8", newline="")
    writer = csv.writer(fh, lineterminator="\n")

    def on_update(p: PolicyParams, entry: IterationLog) -> None:
        writer.writerow([_fmt(getattr(entry, c)) for c in METRIC_FIELDS])
        fh.flush()
        if entry.update % spec.checkpoint_every == 0 or entry.update == spec.train.max_updates:
            _save_checkpoint(spec, p, entry.update, opt)

    try:
        params, logs = train(spec.train, train_tasks, env, params, start_update=start, optimizer=opt,
                             on_update=on_update)
    finally:
        fh.close()
    plot_training(metrics, out / "training.png")
    return params, logs


# ---------------------------------------------------------------- eval

EVAL_COLUMNS = ("agent", "decoding", "group", "n_queries", "accuracy", "per_objective_accuracy",
                "function_calls", "total_tokens", "tokens_per_round", "memory_actions", "overflow_rate")


def cmd_eval(spec: ExperimentSpec, checkpoint: Path | None = None, sample: bool = False) -> list[dict]:
    out = spec.out
    env = _env(spec)
    _, eval_tasks = _load_task_files(spec)
    path = checkpoint or out / CHECKPOINT
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found; run `memact train` first")
    params, _ = _load_checkpoint(spec, Path(path))
    decoding = "sample" if sample else "greedy"
    trajs = evaluate(params, env, eval_tasks, spec.limits, seed=spec.seed + 7919,
                     controller=spec.controller, greedy=not sample)
    rows = [{"agent": spec.agent, "decoding": decoding, **m.row()} for m in summarize(trajs)]
    stem = f"eval_{spec.agent}_{decoding}"
    _atomic_write(out / f"{stem}.csv", _csv_text(spec, EVAL_COLUMNS, rows))
    save_trajectories(trajs, out / f"{stem}_trajectories.jsonl")
    plot_eval(rows, out / f"{stem}.png")
    return rows


# ---------------------------------------------------------------- plots

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_training(metrics: Path, dest: Path) -> None:
    with open(metrics, encoding="utf-8") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    if not rows:
        return
    plt = _pyplot()
    x = [int(r["update"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key in zip(axes, ("success_rate", "tokens_per_round", "memory_action_rate")):
        ax.plot(x, [float(r[key]) for r in rows], lw=1)
        ax.set_xlabel("update")
        ax.set_title(key.replace("_", " "))
    fig.tight_layout()
    fig.savefig(dest, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_eval(rows: Sequence[dict], dest: Path) -> None:
    per_k = [r for r in rows if r["group"] != "all"]
    if not per_k:
        return
    plt = _pyplot()
    labels = [r["group"].split("=")[1] for r in per_k]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar(labels, [r["accuracy"] for r in per_k])
    axes[0].set_title("accuracy")
    axes[1].bar(labels, [r["tokens_per_round"] for r in per_k])
    axes[1].set_title("tokens per round")
    for ax in axes:
        ax.set_xlabel("objectives")
    fig.tight_layout()
    fig.savefig(dest, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------- replay

def cmd_replay(path: Path, index: int | None = None, traj_id: str | None = None,
               checkpoint: Path | None = None) -> str:
    trajs = load_trajectories(path)
    if not trajs:
        raise UsageError(f"{path} holds no trajectories")
    if traj_id is not None:
        chosen = [t for t in trajs if t.traj_id == traj_id]
        if not chosen:
            raise UsageError(f"no trajectory with id {traj_id!r}")
        tr = chosen[0]
    else:
        i = index or 0
        if not 0 <= i < len(trajs):
            raise UsageError(f"index {i} out of range (file has {len(trajs)} trajectories)")
        tr = trajs[i]
    text = render_trajectory(tr)
    if checkpoint is not None:
        params, _ = PolicyParams.load(checkpoint)
        res = replay_check(tr, params)
        text += "\nreplay check: " + ("ok" if res else "FAILED\n  " + "\n  ".join(res.mismatches))
    return text


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memact", description="Memory-as-action agents trained with DCPO.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the world and the train/eval task files")
    g.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    g.add_argument("--force", action="store_true", help="overwrite existing task files")

    t = sub.add_parser("train", help="warm start with segmented SFT, then run DCPO")
    t.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in output_dir")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the eval task set")
    e.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
    e.add_argument("--checkpoint", type=Path, help="checkpoint to load (default: output_dir/checkpoint.npz)")
    e.add_argument("--sample", action="store_true", help="sample actions instead of greedy decoding")

    r = sub.add_parser("replay", help="pretty-print a logged trajectory with its fracture points")
    r.add_argument("trajectories", type=Path, help="trajectory log (JSONL)")
    r.add_argument("--index", type=int, help="position of the trajectory in the file (default 0)")
    r.add_argument("--id", dest="traj_id", help="trajectory id to show")
    r.add_argument("--checkpoint", type=Path, help="also re-score every token under these parameters")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            print(cmd_replay(args.trajectories, args.index, args.traj_id, args.checkpoint))
            return 0
        spec = load_spec(args.config)
        if args.command == "generate":
            for path in cmd_generate(spec, force=args.force):
                print(path)
        elif args.command == "train":
            _, logs = cmd_train(spec, resume=args.resume)
            if logs:
                last = logs[-1]
                print(f"update {last.update}: success {last.success_rate:.3f}, mean return {last.mean_return:.3f}")
        elif args.command == "eval":
            for row in cmd_eval(spec, args.checkpoint, sample=args.sample):
                print(f"{row['group']:<14} acc {row['accuracy']:.3f}  obj-acc {row['per_objective_accuracy']:.3f}  "
                      f"calls {row['function_calls']:.2f}  tok/round {row['tokens_per_round']:.1f}  "
                      f"mem {row['memory_actions']:.2f}")
    except (ConfigError, GenerationError, CheckpointMismatch, UsageError, FileNotFoundError) as exc:
        print(f"memact {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
