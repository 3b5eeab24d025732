"""Command line: train, eval, gradcheck, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from .boxworld import BoardState, generate_level, observe
from .config import ConfigError, load_config, load_config_text
from .models import Network, build_tree_nodes, tree_dump, tree_forward
from .training import Trainer, TrainingDiverged, format_metrics_csv, greedy_episode_returns

RUN_ROOT_ENV = "TREEQN_RUN_ROOT"
EXIT_BAD_CONFIG = 2


def _parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def version_string() -> str:
    """Package version plus the source commit when running from a git checkout."""
    import subprocess

    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"treeqn {__version__}" + (f" ({rev})" if rev else "")


def run_dir_for(cfg, root: str | None = None) -> str:
    root = root or os.environ.get(RUN_ROOT_ENV, "runs")
    return os.path.join(root, f"{cfg.arch}-seed{cfg.seed}")


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.override)
    for key in ("arch", "seed", "transitions"):
        val = getattr(args, key)
        if val is not None:
            overrides.setdefault(key, str(val))
    try:
        cfg, snapshot = load_config(args.config, overrides)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    run_dir = args.run_dir or run_dir_for(cfg, args.run_root)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.cfg"), "w") as fh:
        fh.write(snapshot)
    with open(os.path.join(run_dir, "version.txt"), "w") as fh:
        fh.write(version_string() + "\n")

    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, run_dir)
        trainer.cfg.transitions = cfg.transitions
    else:
        trainer = Trainer(cfg, run_dir)
    actor = trainer.model_cfg.is_actor
    t0 = time.perf_counter()
    timing = [("transitions", "wallclock_s")]

    def on_row(row):
        timing.append((row["transitions"], f"{time.perf_counter() - t0:.3f}"))
        if not args.quiet:
            print(f"{row['transitions']:>9d} transitions  mean return (100 ep) "
                  f"{row['mean_return_100ep']:.3f}", flush=True)

    try:
        trainer.train(on_row=on_row)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
            fh.write(format_metrics_csv(trainer.metrics_rows, actor))
        with open(os.path.join(run_dir, "timing.csv"), "w") as fh:
            fh.writelines(f"{a},{b}\n" for a, b in timing)
    trainer.save(os.path.join(run_dir, "final.npz"))
    print(f"run directory: {run_dir}")
    return 0


def load_network(path: str, arch: str | None = None) -> tuple[Network, object]:
    params, _, _, meta = ad.load_arrays(path)
    cfg = load_config_text(json.loads(meta)["config"])
    if arch is not None and arch != cfg.arch:
        raise ValueError(f"checkpoint holds a {cfg.arch} model, not {arch}")
    ad.set_default_dtype(cfg.dtype)
    net = Network(cfg.model_config(), seed=0)
    net.params.load_arrays(params)
    return net, cfg


def cmd_eval(args) -> int:
    if args.episodes <= 0:
        print("error: episodes must be positive", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        net, cfg = load_network(args.checkpoint, args.arch)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    returns = greedy_episode_returns(net, args.episodes, args.seed, cfg.consumable_goals)
    stats = {"arch": cfg.arch, "episodes": args.episodes, "seed": args.seed,
             "mean_return": float(returns.mean()), "std_return": float(returns.std()),
             "min_return": float(returns.min()), "max_return": float(returns.max())}
    print(json.dumps(stats, indent=1))
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.json")
    with open(out, "w") as fh:
        json.dump(stats, fh, indent=1)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    t0 = time.perf_counter()
    report = run_suite(args.scope, args.instances)
    print(report.text())
    print(f"{'ALL PASS' if report.ok else 'FAILURES'} in {time.perf_counter() - t0:.1f}s")
    return 0 if report.ok else 1


def cmd_inspect(args) -> int:
    try:
        net, cfg = load_network(args.checkpoint)
        if not net.cfg.is_tree:
            raise ValueError(f"{cfg.arch} has no tree to inspect")
        if args.board:
            with open(args.board) as fh:
                board = BoardState.from_ascii(fh.read(), args.steps)
        else:
            board = generate_level(args.seed)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    with ad.no_grad():
        out = tree_forward(observe(board)[None], net.params, net.cfg.tree)
    dump = tree_dump(build_tree_nodes(out), include_z=args.include_z)
    dump["arch"] = cfg.arch
    dump["board"] = board.to_ascii().splitlines()
    text = json.dumps(dump, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    print(board.to_ascii(), file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treeqn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--arch")
    t.add_argument("--seed", type=int)
    t.add_argument("--transitions", type=int)
    t.add_argument("--override", nargs="+", metavar="KEY=VALUE")
    t.add_argument("--run-root", help=f"parent of run directories (default ${RUN_ROOT_ENV} or ./runs)")
    t.add_argument("--run-dir", help="exact run directory")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--arch", help="fail unless the checkpoint holds this architecture")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--scope", choices=("all", "primitives", "models", "losses"), default="all")
    g.add_argument("--instances", type=int, default=50)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="dump the look-ahead tree for one board")
    i.add_argument("checkpoint")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--seed", type=int, default=0, help="generate the board from this seed")
    src.add_argument("--board", help="ASCII board file (A/B/G/O/.)")
    i.add_argument("--steps", type=int, default=0, help="steps elapsed for an ASCII board")
    i.add_argument("--include-z", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if os.environ.get("TREEQN_DEBUG"):
        np.seterr(over="raise", invalid="raise")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
