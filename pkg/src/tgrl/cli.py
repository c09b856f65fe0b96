"""Command-line entry point: ``tgrl {train,eval,sweep,compose,bench,schema}``."""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede the numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import checkpoint, harness  # noqa: E402
from .config import ConfigFileError, RunConfig, config_schema, load_config, parse_config  # noqa: E402
from .tasks import TASK_KINDS  # noqa: E402


def _options(path: str | None) -> dict:
    """Command options from ``--config`` (non-train commands); flags given explicitly win."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigFileError(f"{path}: {exc.strerror}") from exc
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: expected a JSON object")
    return data


def _pick(args, opts: dict, name: str, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return opts.get(name, default)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if args.steps is not None:
        d["steps"] = args.steps
    if args.task is not None:
        d["task"] = args.task
    if args.actor is not None:
        d["actor"]["kind"] = args.actor
    if args.depth is not None:
        d["actor"]["depth"] = args.depth
    cfg = parse_config(d, source="command line")

    def report(row):
        if not args.quiet:
            print(f"step {row['step']:>7d}  episode {row['episode']:>4d}  return {row['return']:+.3f}  "
                  f"alpha {row['alpha']:.3f}", flush=True)

    out, log = harness.run_training(cfg, on_episode=report)
    print(f"wrote {out / 'checkpoint.ckpt'}, {out / 'train_log.csv'}, {out / 'resolved_config.json'}")
    return 0


def cmd_eval(args) -> int:
    opts = _options(args.config)
    ckpt = _pick(args, opts, "checkpoint")
    if ckpt is None:
        raise ConfigFileError("eval needs --checkpoint")
    metrics = harness.cmd_eval(
        ckpt, _pick(args, opts, "task"), int(_pick(args, opts, "episodes", 10)),
        int(_pick(args, opts, "seed", 0)), _pick(args, opts, "out"), bool(args.latency or opts.get("latency")),
    )
    print(harness.dump_json(metrics))
    return 0


def cmd_sweep(args) -> int:
    opts = _options(args.config)
    grid = _pick(args, opts, "grid")
    if isinstance(grid, str):
        grid = [float(x) for x in grid.split(",") if x.strip()]
    axis = _pick(args, opts, "axis")
    path = harness.cmd_sweep(
        _pick(args, opts, "checkpoint"), axis, grid, int(_pick(args, opts, "episodes", 5)),
        int(_pick(args, opts, "seed", 0)), _pick(args, opts, "out", "sweep"),
    )
    print(Path(path).read_text(), end="")
    return 0


def cmd_compose(args) -> int:
    opts = _options(args.config)
    ckpts = _pick(args, opts, "checkpoints")
    if not ckpts:
        raise ConfigFileError("compose needs --checkpoints (one per primitive)")
    res = harness.cmd_compose(ckpts, _pick(args, opts, "waypoints"), _pick(args, opts, "out", "compose"),
                              int(_pick(args, opts, "max_steps", 6000)))
    print(f"waypoints reached: {len(res.hits)}/{len(res.waypoints)} at steps {res.hits}")
    print("primitive switches: " + ", ".join(f"{e['primitive']}@{e['step']}" for e in res.events))
    return 0 if res.completed else 3


def cmd_bench(args) -> int:
    if args.config is None:
        raise ConfigFileError("bench needs --config <matrix.json>")
    agg = harness.cmd_bench(args.config, args.out or "bench", force=args.force)
    for name, a in agg.items():
        finals = ", ".join(f"{f:+.3f}" for f in a["finals"])
        print(f"{name}: final-10 returns [{finals}]")
    return 0


def cmd_schema(args) -> int:
    text = json.dumps(config_schema(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgrl", description="Graph-policy SAC for a three-bar tensegrity robot")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file (run config for train; options or matrix otherwise)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train one primitive")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--task", choices=TASK_KINDS)
    t.add_argument("--actor", choices=("gnn", "mlp"))
    t.add_argument("--depth", type=int, choices=(1, 2, 3))
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--task", choices=TASK_KINDS)
    e.add_argument("--episodes", type=int)
    e.add_argument("--latency", action="store_true", help="also report median policy forward time")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="robustness sweep along one perturbation axis")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--axis", choices=harness.SWEEP_AXES)
    s.add_argument("--grid", help="comma-separated values (default: the standard grid for the axis)")
    s.add_argument("--episodes", type=int)
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("compose", help="follow waypoints by switching between the three primitives")
    common(c)
    c.add_argument("--checkpoints", nargs=3, metavar="CKPT")
    c.add_argument("--waypoints", help="JSON list of [x, y] (default: 1.5 m square)")
    c.add_argument("--max-steps", dest="max_steps", type=int)
    c.set_defaults(fn=cmd_compose)

    b = sub.add_parser("bench", help="train/reuse a matrix of runs and plot learning curves")
    common(b)
    b.add_argument("--force", action="store_true", help="retrain cells whose cached config differs")
    b.set_defaults(fn=cmd_bench)

    sc = sub.add_parser("schema", help="print the run-config JSON schema")
    sc.add_argument("--out")
    sc.set_defaults(fn=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigFileError, harness.HarnessError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
