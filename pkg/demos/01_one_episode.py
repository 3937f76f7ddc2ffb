"""Watch a single merge episode from the ego's point of view.

A fresh scene is generated, the ego is driven by the rule-based level-0
merging driver, then by a scripted "seek the top lane" policy, and the
outcome, time and pass-the-blockage flag of both runs are printed. The
second run also writes its full trace to ``episode_trace.csv``.

Run: python3 demos/01_one_episode.py
"""
import csv

import numpy as np

from levelk.sim import TRACE_HEADER, InitialSceneParams, MergeEnv, run_episode

SCENE = InitialSceneParams(n_cars=(20, 20))


def seek_top_lane(obs):
    # obs[0] is the ego's lateral position in lane widths: 0 bottom, 1 top
    change = obs[0] < 0.5
    return 2 * 1 + int(change)  # desired speed 3 m/s, change lane while in the bottom lane


def main():
    rules = MergeEnv("merge", scene_params=SCENE, ego_level0=True)
    result, _ = run_episode(rules, None, np.random.default_rng(1))
    print(f"level-0 ego : {result.outcome:9s} after {result.time:5.1f} s, passed blockage: {result.passed_blockage}")

    scripted = MergeEnv("merge", scene_params=SCENE, record_trace=True)
    result, steps = run_episode(scripted, seek_top_lane, np.random.default_rng(1))
    print(f"scripted ego: {result.outcome:9s} after {result.time:5.1f} s, {len(steps)} decisions, "
          f"return {result.total_reward:+.3f}")

    with open("episode_trace.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        writer.writerows(result.trace)
    print(f"trace: {len(result.trace)} rows in episode_trace.csv")


if __name__ == "__main__":
    main()
