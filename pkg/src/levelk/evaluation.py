"""Cross-level evaluation: every policy level against every environment level.

Each episode gets its own generator seeded from
``(master_seed, policy_level, env_level, episode_index)``, so a cell's result
does not depend on which other cells were run or in what order.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .curriculum import PolicyRegistry, populate_environment, task_of
from .qnet import greedy
from .sim import InitialSceneParams, MergeEnv, RewardWeights, SimConfig, run_episode
from .traffic import RoadGeometry

MATRIX_HEADER = ("policy_level", "env_level", "n_episodes", "success_rate", "collision_rate", "timeout_rate",
                 "mean_time")
EVAL_CARS = 50


@dataclass(frozen=True)
class CellMetrics:
    policy_level: int
    env_level: int
    n_episodes: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_time: float
    outcomes: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.n_episodes <= 0:
            raise ValueError("a cell needs at least one episode")
        if abs(self.success_rate + self.collision_rate + self.timeout_rate - 1.0) > 1e-9:
            raise ValueError("outcome rates must sum to one")

    @classmethod
    def from_outcomes(cls, policy_level, env_level, outcomes, times) -> "CellMetrics":
        n = len(outcomes)
        if n == 0:
            raise ValueError("a cell needs at least one episode")
        counts = {k: sum(o == k for o in outcomes) for k in ("success", "collision", "timeout")}
        if sum(counts.values()) != n:
            raise ValueError("unknown outcome label")
        return cls(policy_level, env_level, n, counts["success"] / n, counts["collision"] / n,
                   counts["timeout"] / n, float(np.mean(times)), tuple(outcomes))


@dataclass(frozen=True)
class EvalSettings:
    sim: SimConfig = SimConfig()
    scene: InitialSceneParams = replace(InitialSceneParams(), n_cars=(EVAL_CARS, EVAL_CARS))
    road: RoadGeometry = RoadGeometry()
    reward: RewardWeights = RewardWeights()


def episode_rng(master_seed: int, policy_level: int, env_level: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, policy_level, env_level, episode]))


def make_eval_env(policy_level: int, env_level: int, registry: PolicyRegistry,
                  settings: EvalSettings = EvalSettings()) -> MergeEnv:
    """Environment holding traffic of levels ``<= env_level`` around a level-``policy_level`` ego.

    Level 0 drives the ego with the rule-based merging driver; odd levels run
    the merge task, even levels the keep-lane task.
    """
    needed = set(range(env_level + 1)) | {policy_level}
    missing = sorted(k for k in needed if k not in registry)
    if missing:
        raise KeyError(f"registry lacks levels {missing}")
    task = "merge" if policy_level == 0 else task_of(policy_level)

    def populate(lanes, rng):
        return populate_environment(env_level + 1, registry, lanes, rng)

    return MergeEnv(task, sim=settings.sim, scene_params=settings.scene, road=settings.road,
                    reward=settings.reward, populate=populate, policies=registry.policies(range(1, env_level + 1)),
                    ego_level0=policy_level == 0)


def evaluate_cell(policy_level: int, env_level: int, n_episodes: int, registry: PolicyRegistry,
                  master_seed: int = 0, settings: EvalSettings = EvalSettings(), policy=None) -> CellMetrics:
    """Greedy roll-outs of one policy level in one environment level.

    ``policy`` overrides the registered network (observation -> action index).
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    env = make_eval_env(policy_level, env_level, registry, settings)
    if policy is None and policy_level > 0:
        w = registry[policy_level].weights
        policy = lambda obs: int(greedy(w, obs[None])[0])  # noqa: E731
    outcomes, times = [], []
    for i in range(n_episodes):
        result, _ = run_episode(env, policy, episode_rng(master_seed, policy_level, env_level, i))
        outcomes.append(result.outcome)
        times.append(result.time)
    return CellMetrics.from_outcomes(policy_level, env_level, outcomes, times)


def _cell_job(args):
    return evaluate_cell(*args)


def cross_matrix(registry: PolicyRegistry, max_level: int, n_episodes: int, master_seed: int = 0,
                 settings: EvalSettings = EvalSettings(), workers: int = 1) -> list[CellMetrics]:
    """All ``(policy_level, env_level)`` cells for levels ``0..max_level``, row-major."""
    jobs = [(p, e, n_episodes, registry, master_seed, settings)
            for p in range(max_level + 1) for e in range(max_level + 1)]
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def write_matrix(path, cells) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        for c in cells:
            w.writerow([c.policy_level, c.env_level, c.n_episodes, repr(c.success_rate), repr(c.collision_rate),
                        repr(c.timeout_rate), repr(c.mean_time)])


def read_matrix(path) -> list[CellMetrics]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != MATRIX_HEADER:
        raise ValueError("not a matrix file")
    return [CellMetrics(int(r[0]), int(r[1]), int(r[2]), *(float(x) for x in r[3:])) for r in rows[1:]]


def matrix_table(cells, metric: str = "success_rate") -> np.ndarray:
    """Square array ``[policy_level, env_level]`` of one metric."""
    n = max(max(c.policy_level, c.env_level) for c in cells) + 1
    out = np.full((n, n), np.nan)
    for c in cells:
        out[c.policy_level, c.env_level] = getattr(c, metric)
    return out
