"""Command-line entry point: ``levelk {curriculum, evaluate, rollout}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .curriculum import PolicyRegistry, populate_environment, run_curriculum, task_of
from .evaluation import EvalSettings, cross_matrix, write_matrix
from .qnet import greedy, load_weights
from .sim import TRACE_HEADER, MergeEnv, run_episode

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _set_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be at least 1")
    try:
        from numba import set_num_threads

        set_num_threads(min(n, os.cpu_count() or 1))
    except (ImportError, ValueError):
        pass


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_curriculum(args) -> int:
    cfg = _config(args.config)
    if args.max_level is not None:
        cfg.max_level = args.max_level
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.max_level < 1:
        raise UsageError("--max-level must be at least 1")
    out = Path(args.out)
    # train into a scratch directory and move the results into place at the end,
    # so a failed run leaves no partial output behind
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".levelk-", dir=out.parent))
    try:
        def progress(level, step, row):
            _log(f"level {level} step {step}: success {row[1]:.3f} collision {row[2]:.3f} "
                 f"timeout {row[3]:.3f} return {row[4]:.3f}")

        run_curriculum(cfg.curriculum(), scratch, progress if args.verbose else None)
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(scratch.iterdir()):
            os.replace(item, out / item.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    _log(f"wrote levels 1..{cfg.max_level} to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    cfg = _config(args.config)
    registry = PolicyRegistry.load(args.registry)
    max_level = registry.max_level if args.max_level is None else args.max_level
    if max_level > registry.max_level:
        raise RuntimeError(f"registry holds levels up to {registry.max_level}, {max_level} requested")
    settings = EvalSettings(sim=cfg.sim, road=cfg.road, reward=cfg.reward)
    cells = cross_matrix(registry, max_level, args.episodes, args.seed, settings, workers=args.threads)
    write_matrix(args.out, cells)
    _log(f"wrote {len(cells)} cells to {args.out}")
    return EXIT_OK


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_trace(path, result) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in result.trace:
            w.writerow([_fmt(x) for x in row])
        f.write(f"# outcome={result.outcome} time={result.time!r} total_reward={result.total_reward!r}\n")


def cmd_rollout(args) -> int:
    cfg = _config(args.config)
    weights, task, level = load_weights(args.policy)
    registry_dir = Path(args.registry) if args.registry else Path(args.policy).parent
    registry = PolicyRegistry.load(registry_dir) if args.env_level > 0 else PolicyRegistry()
    if args.env_level > registry.max_level:
        raise RuntimeError(f"environment level {args.env_level} needs levels up to it in {registry_dir}")

    def populate(lanes, rng):
        return populate_environment(args.env_level + 1, registry, lanes, rng)

    scene = cfg.scene if args.cars is None else replace(cfg.scene, n_cars=(args.cars, args.cars))
    env = MergeEnv(task_of(level), sim=cfg.sim, scene_params=scene, road=cfg.road, reward=cfg.reward,
                   populate=populate, policies=registry.policies(range(1, args.env_level + 1)), record_trace=True)
    result, _ = run_episode(env, lambda obs: int(greedy(weights, obs[None])[0]), np.random.default_rng(args.seed))
    write_trace(args.trace, result)
    _log(f"{result.outcome} after {result.time:.1f} s, return {result.total_reward:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="levelk", description="Level-k curriculum for dense-traffic merging.")
    p.add_argument("--threads", type=int, default=1, help="worker count for evaluation (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curriculum", help="train levels 1..N")
    c.add_argument("--config", help="INI run configuration (defaults when omitted)")
    c.add_argument("--max-level", type=int, help="highest level to train (default 5)")
    c.add_argument("--seed", type=int, help="master seed (default 0)")
    c.add_argument("--out", required=True, help="registry directory to create")
    c.add_argument("--verbose", action="store_true", help="print learning-curve rows")
    c.set_defaults(func=cmd_curriculum)

    e = sub.add_parser("evaluate", help="cross-level success/collision/timeout matrix")
    e.add_argument("--registry", required=True, help="directory written by the curriculum command")
    e.add_argument("--episodes", type=int, default=500, help="episodes per cell (default 500)")
    e.add_argument("--out", required=True, help="matrix CSV to write")
    e.add_argument("--seed", type=int, default=0, help="master evaluation seed")
    e.add_argument("--max-level", type=int, help="highest level to evaluate (default: all registered)")
    e.add_argument("--config", help="INI run configuration for scene and simulator settings")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rollout", help="run one episode and export its trace")
    r.add_argument("--policy", required=True, help="weights file (.lkqn) driving the ego")
    r.add_argument("--env-level", type=int, default=0, help="traffic holds levels up to this one")
    r.add_argument("--seed", type=int, default=0, help="episode seed")
    r.add_argument("--trace", required=True, help="trace CSV to write")
    r.add_argument("--registry", help="directory with the environment levels (default: the policy's)")
    r.add_argument("--cars", type=int, help="fixed number of traffic cars")
    r.add_argument("--config", help="INI run configuration")
    r.set_defaults(func=cmd_rollout)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        _set_threads(args.threads)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda m, c, *a, **k: _log(f"warning: {m}")
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
