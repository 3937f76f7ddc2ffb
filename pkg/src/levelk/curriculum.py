"""Level-k curriculum: train reasoning levels one after another against lower levels.

Odd levels learn to merge from the bottom lane, even levels learn to keep the
top lane. A level-k trainee meets traffic drawn per lane from level 0 and the
lower levels trained for that lane's task.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .qnet import NetworkConfig, NetworkWeights, greedy, init_weights, load_weights, save_weights
from .sim import InitialSceneParams, MergeEnv, RewardWeights, SimConfig
from .traffic import BOTTOM_LANE, Behavior, RoadGeometry
from .train import TrainConfig, TrainResult, train_level, write_curve

MANIFEST = "manifest.json"
TIMING = "timing.json"


def task_of(level: int) -> str:
    """Task trained at a reasoning level: merge for odd, keep_lane for even (level 0 is rule-based)."""
    if level < 0:
        raise ValueError("levels are non-negative")
    return "merge" if level % 2 == 1 else "keep_lane"


@dataclass
class PolicyEntry:
    level: int
    task: str
    weights: NetworkWeights | None = None  # None for the rule-based level 0
    path: str | None = None


class PolicyRegistry:
    """Map ``level -> PolicyEntry``. Level 0 is always present and rule-based."""

    def __init__(self):
        self.entries: dict[int, PolicyEntry] = {0: PolicyEntry(0, "rule_based")}

    def __contains__(self, level) -> bool:
        return level in self.entries

    def __getitem__(self, level) -> PolicyEntry:
        if level not in self.entries:
            raise KeyError(f"level {level} is not registered")
        return self.entries[level]

    @property
    def levels(self) -> list[int]:
        return sorted(self.entries)

    @property
    def max_level(self) -> int:
        return max(self.entries)

    def register(self, level: int, weights: NetworkWeights, path: str | None = None) -> None:
        if level < 1:
            raise ValueError("only levels >= 1 hold learned weights")
        if level - 1 not in self.entries:
            raise ValueError(f"cannot register level {level} before level {level - 1}")
        self.entries[level] = PolicyEntry(level, task_of(level), weights, path)

    def policies(self, levels=None) -> dict[int, Callable[[np.ndarray], np.ndarray]]:
        """Batched greedy action functions for the learned levels."""
        out = {}
        for k in self.levels if levels is None else levels:
            if k >= 1:
                w = self[k].weights
                out[k] = lambda obs, w=w: greedy(w, obs)
        return out

    @classmethod
    def load(cls, directory, net: NetworkConfig = NetworkConfig()) -> "PolicyRegistry":
        """Rebuild a registry from a curriculum output directory."""
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        reg = cls()
        for item in sorted(manifest["levels"], key=lambda d: d["level"]):
            w, task, level = load_weights(directory / item["weights"], net)
            if level != item["level"] or task != task_of(level):
                raise ValueError(f"{item['weights']}: header says level {level} ({task})")
            reg.register(level, w, str(directory / item["weights"]))
        return reg


def admissible_levels(k: int, lane: int) -> list[int]:
    """Levels a level-k trainee may meet in ``lane``: 0 plus the lower levels of that lane's task."""
    parity = 1 if lane == BOTTOM_LANE else 0
    return [0] + [j for j in range(1, k) if j % 2 == parity]


def populate_environment(k: int, registry: PolicyRegistry, lanes, rng: np.random.Generator) -> list[Behavior]:
    """Behaviors for traffic cars in ``lanes`` when training level ``k``.

    Each car draws its level uniformly from the admissible set of its lane.
    Level-0 cars keep the freshly sampled rule-based parameters of the scene.
    """
    if k < 1:
        raise ValueError("the trainee level must be at least 1")
    missing = [j for j in range(k) if j not in registry]
    if missing:
        raise KeyError(f"registry lacks levels {missing}")
    lanes = np.asarray(lanes)
    bottom, top = admissible_levels(k, BOTTOM_LANE), admissible_levels(k, 1 - BOTTOM_LANE)
    pick_b = rng.integers(len(bottom), size=len(lanes))
    pick_t = rng.integers(len(top), size=len(lanes))
    out = []
    for lane, ib, it in zip(lanes, pick_b, pick_t):
        level = bottom[ib] if lane == BOTTOM_LANE else top[it]
        if level == 0:
            out.append(Behavior("level0", 0, "merge" if lane == BOTTOM_LANE else "keep_lane"))
        else:
            out.append(Behavior("policy", level, task_of(level)))
    return out


def warm_start(k: int, registry: PolicyRegistry, rng: np.random.Generator,
               net: NetworkConfig = NetworkConfig()) -> NetworkWeights:
    """Fresh weights for levels 1 and 2, otherwise a copy of level ``k - 2`` (same task)."""
    if k < 1:
        raise ValueError("the trainee level must be at least 1")
    if k <= 2:
        return init_weights(net, rng)
    if k - 2 not in registry:
        raise KeyError(f"level {k - 2} is needed to warm-start level {k}")
    return registry[k - 2].weights.copy()


@dataclass
class CurriculumConfig:
    max_level: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    per_level: Mapping[int, TrainConfig] = field(default_factory=dict)
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    scene: InitialSceneParams = field(default_factory=InitialSceneParams)
    road: RoadGeometry = field(default_factory=RoadGeometry)
    reward: RewardWeights = field(default_factory=RewardWeights)
    net: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.max_level < 1:
            raise ValueError("max_level must be at least 1")

    def train_config(self, level: int) -> TrainConfig:
        return self.per_level.get(level, self.train)

    def fingerprint(self) -> str:
        """Hash of every setting that influences training."""
        blob = {
            "max_level": self.max_level,
            "train": asdict(self.train),
            "per_level": {str(k): asdict(v) for k, v in sorted(self.per_level.items())},
            "seed": self.seed,
            "sim": asdict(self.sim),
            "scene": asdict(self.scene),
            "road": asdict(self.road),
            "reward": asdict(self.reward),
            "net": asdict(self.net),
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


class LevelTrainingFailed(RuntimeError):
    def __init__(self, level: int, cause: Exception):
        super().__init__(f"training level {level} failed: {cause}")
        self.level = level


def level_seed(master: int, level: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, level])


def make_env_factory(k: int, registry: PolicyRegistry, cfg: CurriculumConfig, training: bool = True):
    """Environment factory for a level-k trainee.

    Training environments keep merge episodes running past the success dwell;
    ``training=False`` gives the evaluation variant that stops there.
    """
    task = task_of(k)
    policies = registry.policies(range(1, k))

    def populate(lanes, rng):
        return populate_environment(k, registry, lanes, rng)

    def factory():
        return MergeEnv(task, sim=cfg.sim, scene_params=cfg.scene, road=cfg.road, reward=cfg.reward,
                        populate=populate, policies=policies, stop_at_success=not training)

    return factory


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_curriculum(
    cfg: CurriculumConfig,
    out_dir=None,
    progress: Callable[[int, int, tuple], None] | None = None,
) -> PolicyRegistry:
    """Train levels ``1..max_level`` in order and return the filled registry.

    With ``out_dir`` each level's weights (``level_k.lkqn``) and learning curve
    (``curve_level_k.csv``) are written as soon as it finishes, together with a
    ``manifest.json`` listing seeds, config hashes and file hashes. Wall-clock
    times go to ``timing.json`` so that the manifest itself is reproducible.
    """
    registry = PolicyRegistry()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "master_seed": cfg.seed,
        "config_hash": cfg.fingerprint(),
        "network_fingerprint": f"{cfg.net.fingerprint():016x}",
        "levels": [],
    }
    timing = {}
    for k in range(1, cfg.max_level + 1):
        ss = level_seed(cfg.seed, k)
        rng = np.random.default_rng(ss)
        tcfg = cfg.train_config(k)
        start = time.perf_counter()
        try:
            init = warm_start(k, registry, rng, cfg.net)
            cb = None if progress is None else (lambda step, row, k=k: progress(k, step, row))
            result: TrainResult = train_level(make_env_factory(k, registry, cfg), init, tcfg, rng, cfg.net, cb,
                                              make_env_factory(k, registry, cfg, training=False))
        except Exception as exc:  # noqa: BLE001 - re-raised with the level attached
            raise LevelTrainingFailed(k, exc) from exc
        wall = time.perf_counter() - start
        path = None
        entry = {
            "level": k,
            "task": task_of(k),
            "seed_entropy": [cfg.seed, k],
            "train_config_hash": hashlib.sha256(json.dumps(asdict(tcfg), sort_keys=True).encode()).hexdigest(),
            "warm_start": None if k <= 2 else k - 2,
            "updates": result.updates,
            "episodes": result.episodes,
        }
        if out is not None:
            path = out / f"level_{k}.lkqn"
            save_weights(result.weights, path, task_of(k), k)
            write_curve(out / f"curve_level_{k}.csv", result.curve)
            entry.update(weights=path.name, curve=f"curve_level_{k}.csv", weights_sha256=_sha256(path))
        registry.register(k, result.weights, None if path is None else str(path))
        manifest["levels"].append(entry)
        timing[str(k)] = round(wall, 3)
        if out is not None:
            (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            (out / TIMING).write_text(json.dumps({"wall_time_s": timing}, indent=2, sort_keys=True) + "\n")
    return registry
