"""Train a level-1 merging policy against rule-based traffic.

Level 1 is the first rung of the curriculum: every other car is a level-0
driver. The learning curve (greedy success, collision and timeout rates) is
printed as training goes. The default budget of 200 000 decisions takes
roughly ten minutes on one core; pass a smaller number for a quick look.

Run: python3 demos/02_train_level_one.py [steps]
"""
import sys

from levelk.curriculum import CurriculumConfig, run_curriculum
from levelk.evaluation import EvalSettings, evaluate_cell
from levelk.sim import InitialSceneParams
from levelk.train import TrainConfig


def main():
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    scene = InitialSceneParams(n_cars=(10, 30))
    cfg = CurriculumConfig(max_level=1, scene=scene,
                           train=TrainConfig(total_steps=steps, eval_interval=max(steps // 8, 1)))

    def progress(level, step, row):
        print(f"step {step:>7d}  success {row[1]:.2f}  collision {row[2]:.2f}  timeout {row[3]:.2f}")

    registry = run_curriculum(cfg, "level1_run", progress)
    settings = EvalSettings(scene=scene)
    for level in (1, 0):
        cell = evaluate_cell(level, 0, 100, registry, settings=settings)
        name = "learned level 1" if level else "rule-based level 0"
        print(f"{name:>18s}: success {cell.success_rate:.2f}, collision {cell.collision_rate:.2f}, "
              f"timeout {cell.timeout_rate:.2f}")


if __name__ == "__main__":
    main()
