"""Command-line entry point: ``gridlab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text, validate_config
from .core import derive_stream, stream_id


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    sets = list(getattr(args, "set", None) or [])
    if sets:
        cfg = parse_config_text("\n".join(sets), cfg)
    return cfg


def _add_cfg(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def cmd_train(args) -> int:
    from .harness import _finite, _json_default, run_experiment
    from .learner import run_training

    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    if args.replicas_report:
        report = run_experiment(cfg, out)
        print(json.dumps(_finite(report), indent=2, default=_json_default))
        return 0
    res = run_training(cfg, output_dir=out, on_step=_progress if args.verbose else None)
    print(json.dumps({"frames": res.frames, "steps": res.steps, "params_version": res.version,
                      "output_dir": str(out), "seconds": round(res.wall_seconds, 1)}))
    return 0


def _progress(row):
    if row["step"] % 20 == 0:
        print(",".join(f"{k}={row[k]:.4g}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in row),
              file=sys.stderr, flush=True)


def cmd_eval(args) -> int:
    from .harness import evaluate_detailed
    from .learner import agent_config_for

    vcfg = validate_config(_config(args))
    params = nn.load_checkpoint(args.checkpoint)
    acfg = agent_config_for(vcfg)
    rng = derive_stream(args.seed, stream_id("cli-eval"))
    out = {}
    for phase in args.phase:
        out[phase] = evaluate_detailed(params, vcfg.split, phase, args.episodes or vcfg.cfg.eval_episodes,
                                       rng.child(phase), acfg, vcfg.view)
    print(json.dumps(out, indent=2))
    return 0


def cmd_oracle(args) -> int:
    from .harness import oracle_run
    from .world import TaskKind

    vcfg = validate_config(_config(args).replace(task=args.task))
    kind = TaskKind(args.kind) if args.kind else None
    res = oracle_run(vcfg.split, args.mode, args.episodes, derive_stream(args.seed, stream_id("cli-oracle")),
                     phase=args.phase, kind=kind)
    print(json.dumps({"task": args.task, "mode": args.mode, "phase": args.phase, "episodes": args.episodes,
                      "mean_return": res.mean_return, "mean_length": res.mean_length,
                      "accuracy": res.accuracy}))
    return 0


def cmd_splits(args) -> int:
    vcfg = validate_config(_config(args).replace(task=args.task))
    print(json.dumps(vcfg.split.to_json(), indent=2))
    return 0


def cmd_render(args) -> int:
    from .render import render
    from .tasks import sample_episode
    from .world import reset, step

    vcfg = validate_config(_config(args))
    spec = sample_episode(vcfg.split, args.phase, derive_stream(args.seed, stream_id("cli-render")))
    state = reset(spec)
    for a in args.actions or []:
        if state.done:
            break
        state, _ = step(state, a)
    Path(args.out).write_bytes(render(state, vcfg.view).to_ppm())
    print(json.dumps({"instruction": spec.instruction, "out": args.out,
                      "frame": list(vcfg.frame_shape)}))
    return 0


def cmd_ttest(args) -> int:
    from .harness import ttest

    a = [float(x) for x in args.a.split(",")]
    b = [float(x) for x in args.b.split(",")]
    r = ttest(a, b)
    print(json.dumps({"t": r.t if np.isfinite(r.t) else str(r.t), "df": r.df, "p": r.p,
                      "zero_variance": r.zero_variance}))
    return 0


def cmd_serve(args) -> int:
    from .envd import serve

    cfg = _config(args)
    over = {}
    if args.task:
        over["task"] = args.task
    if args.view:
        over["view"] = args.view
    cfg = cfg.replace(**over, seed=args.seed)
    host, _, port = args.addr.rpartition(":")
    print(f"serving {cfg.task}/{cfg.view} on {host or '127.0.0.1'}:{port}", file=sys.stderr, flush=True)
    serve((host or "127.0.0.1", int(port)), cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridlab", description="Grid-world systematic generalization laboratory")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train one agent (or all replicas with --replicas-report)")
    _add_cfg(p)
    p.add_argument("--out", help="output directory (default: output_dir key)")
    p.add_argument("--replicas-report", action="store_true",
                   help="train every replica, evaluate, and write report.json")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_cfg(p)
    p.add_argument("checkpoint")
    p.add_argument("--phase", nargs="+", default=["train", "test"], choices=["train", "test"])
    p.add_argument("--episodes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="run a scripted oracle")
    _add_cfg(p)
    p.add_argument("--task", default="find", choices=["find", "put", "negation", "collect"])
    p.add_argument("--mode", default="optimal_bfs",
                   choices=["optimal_bfs", "random_first_pick", "color_only", "shape_only"])
    p.add_argument("--kind", choices=["find", "lift", "put", "negfind", "collect"])
    p.add_argument("--phase", default="test", choices=["train", "test"])
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("splits", help="dump a train/test split as JSON")
    _add_cfg(p)
    p.add_argument("--task", default="find", choices=["find", "put", "negation", "collect"])
    p.set_defaults(fn=cmd_splits)

    p = sub.add_parser("render", help="render a sampled episode to a PPM file")
    _add_cfg(p)
    p.add_argument("--phase", default="train", choices=["train", "test"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--actions", type=int, nargs="*", help="actions to apply before rendering")
    p.add_argument("--out", default="frame.ppm")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("ttest", help="pooled two-sample t-test on comma-separated values")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(fn=cmd_ttest)

    p = sub.add_parser("serve", help="run the environment wire service")
    _add_cfg(p)
    p.add_argument("--addr", default="127.0.0.1:7878")
    p.add_argument("--task", choices=["find", "put", "negation", "collect"])
    p.add_argument("--view", choices=["allocentric_fixed", "egocentric_partial", "egocentric_full",
                                      "allocentric_large"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        for path, msg in e.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
