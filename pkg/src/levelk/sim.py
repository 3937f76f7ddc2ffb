"""Kinematics, scene generation, collisions, rewards and the episode loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .drivers import (
    AGENT_PARAMS,
    MIN_GAP,
    YIELD_RANGE,
    ControllerGains,
    MOBILParams,
    level0_target_lanes,
    sample_driver_table,
)
from .traffic import (
    BLOCKED,
    BOTTOM_LANE,
    CHANGE_LANE,
    PARAM_FIELDS,
    TOP_LANE,
    Behavior,
    RoadGeometry,
    Scene,
    VehicleState,
    decode_action,
    lane_attribution,
    observe,
)

V_DES = PARAM_FIELDS.index("v_des")
OUTCOMES = ("success", "collision", "timeout")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    decision_period: int = 5
    max_episode_time: float = 40.0
    success_dwell: float = 5.0
    steering_rate_max: float = 0.4
    steering_angle_max: float = 0.5
    lateral_speed_floor: float = 0.5
    ego_start: float = 30.0
    blocked_position: float = 100.0

    def __post_init__(self):
        for name in ("dt", "decision_period", "max_episode_time", "success_dwell",
                     "steering_rate_max", "steering_angle_max", "lateral_speed_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def max_steps(self) -> int:
        return int(round(self.max_episode_time / self.dt))

    @property
    def dwell_steps(self) -> int:
        return int(round(self.success_dwell / self.dt))


@dataclass(frozen=True)
class InitialSceneParams:
    v0: tuple[float, float] = (1.0, 2.0)
    t0: tuple[float, float] = (-0.75, 0.75)
    phi0: tuple[float, float] = (-0.1, 0.1)
    n_cars: tuple[int, int] = (10, 50)
    gap: float = 6.0


@dataclass(frozen=True)
class RewardWeights:
    collision: float = -1.0
    speed: float = -0.001
    top_lane: float = 0.01
    pass_blockage: float = 1.0
    merge_desired_speed: float = 5.0


@dataclass
class EpisodeOutcome:
    outcome: str
    time: float
    total_reward: float
    n_decisions: int
    passed_blockage: bool = False
    other_collisions: int = 0
    trace: list | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------


def limit_lateral(v_lat, v_lon_next, heading, a_lat, cfg: SimConfig):
    """Lateral velocity after one step under the heading constraints.

    The requested ``a_lat`` implies a new heading ``atan2(v_lat', v_ref)`` with
    ``v_ref = max(v_lon', lateral_speed_floor)``; that heading may change by at
    most ``steering_rate_max * dt`` per step and never exceed
    ``steering_angle_max``. The floor lets a stopped car still creep sideways.
    Returns ``(v_lat', heading')``.
    """
    v_ref = np.maximum(v_lon_next, cfg.lateral_speed_floor)
    wanted = np.arctan2(v_lat + np.asarray(a_lat) * cfg.dt, v_ref)
    step = cfg.steering_rate_max * cfg.dt
    new_heading = np.clip(wanted, heading - step, heading + step)
    new_heading = np.clip(new_heading, -cfg.steering_angle_max, cfg.steering_angle_max)
    return v_ref * np.tan(new_heading), new_heading


def integrate_arrays(p_lon, p_lat, v_lon, v_lat, heading, a_lon, a_lat, cfg: SimConfig):
    """One explicit Euler step for many vehicles.

    Returns ``(p_lon, p_lat, v_lon, v_lat, heading)``. The lateral velocity
    update uses the constrained lateral acceleration.
    """
    dt = cfg.dt
    p_lon2 = p_lon + v_lon * dt
    p_lat2 = p_lat + v_lat * dt
    v_lon2 = np.maximum(v_lon + a_lon * dt, 0.0)
    v_lat2, heading2 = limit_lateral(v_lat, v_lon2, heading, a_lat, cfg)
    return p_lon2, p_lat2, v_lon2, v_lat2, heading2


def integrate_state(
    state: VehicleState, a_lon: float, a_lat: float, cfg: SimConfig = SimConfig(), road: RoadGeometry | None = None
) -> VehicleState:
    road = road or RoadGeometry()
    p_lon, p_lat, v_lon, v_lat, heading = (
        float(x)
        for x in integrate_arrays(
            state.p_lon, state.p_lat, state.v_lon, state.v_lat, state.heading, a_lon, a_lat, cfg
        )
    )
    lane, p_lat = lane_attribution(state.lane_id * road.lane_width + p_lat, road)
    return VehicleState(p_lon, p_lat, v_lon, v_lat, heading, heading, lane, state.length, state.width)


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------


def slot_positions(n_cars: int, road: RoadGeometry, params: InitialSceneParams, cfg: SimConfig,
                   task: str = "merge", length: float = 4.0):
    """Lane and longitudinal position of each traffic car, filling lanes alternately.

    Cars sit on a per-lane grid with ``gap`` meters between bumpers; the top-lane
    grid is shifted by half a pitch. The ego and blocked cells are skipped.
    """
    pitch = length + params.gap
    reserved = {BOTTOM_LANE: [cfg.blocked_position], TOP_LANE: []}
    reserved[BOTTOM_LANE if task == "merge" else TOP_LANE].append(cfg.ego_start)
    offset = {BOTTOM_LANE: 0.0, TOP_LANE: 0.5 * pitch}
    cursor = {BOTTOM_LANE: 0, TOP_LANE: 0}
    lanes, positions = [], []
    for i in range(n_cars):
        lane = BOTTOM_LANE if i % 2 == 0 else TOP_LANE
        while True:
            pos = offset[lane] + cursor[lane] * pitch
            cursor[lane] += 1
            if all(abs(pos - r) >= pitch - 1e-9 for r in reserved[lane]):
                break
        lanes.append(lane)
        positions.append(pos)
    front = max(positions + [cfg.blocked_position, cfg.ego_start]) + 0.5 * length
    if min(positions + [cfg.ego_start]) - 0.5 * length < -pitch or front > road.road_length:
        raise ValueError(f"road of {road.road_length} m is too short for {n_cars} cars")
    return np.array(lanes, dtype=int), np.array(positions)


def generate_initial_scene(
    rng: np.random.Generator,
    params: InitialSceneParams = InitialSceneParams(),
    road: RoadGeometry = RoadGeometry(),
    cfg: SimConfig = SimConfig(),
    n_cars: int | None = None,
    task: str = "merge",
    length: float = 4.0,
    width: float = 1.8,
) -> Scene:
    """Random dense-traffic scene. Rows: traffic cars, then the ego, then the blocked car."""
    if n_cars is None:
        n_cars = int(rng.integers(params.n_cars[0], params.n_cars[1] + 1))
    lanes, pos = slot_positions(n_cars, road, params, cfg, task, length)
    v0 = rng.uniform(*params.v0, size=n_cars)
    t0 = rng.uniform(*params.t0, size=n_cars)
    phi = rng.uniform(*params.phi0, size=n_cars)
    table, yields = sample_driver_table(rng, n_cars)
    ego_v = rng.uniform(*params.v0)

    n = n_cars + 2
    ego, blocked = n_cars, n_cars + 1
    ego_lane = BOTTOM_LANE if task == "merge" else TOP_LANE
    agent_row = AGENT_PARAMS.as_row()
    behaviors = [Behavior("level0", 0, "merge" if lane == BOTTOM_LANE else "keep_lane") for lane in lanes]
    return Scene(
        time=0.0,
        ids=np.arange(n),
        lane=np.concatenate([lanes, [ego_lane, BOTTOM_LANE]]),
        p_lon=np.concatenate([pos, [cfg.ego_start, cfg.blocked_position]]),
        p_lat=np.concatenate([t0, [0.0, 0.0]]),
        v_lon=np.concatenate([v0 * np.cos(phi), [ego_v, 0.0]]),
        v_lat=np.concatenate([v0 * np.sin(phi), [0.0, 0.0]]),
        heading=np.concatenate([phi, [0.0, 0.0]]),
        steering=np.concatenate([phi, [0.0, 0.0]]),
        length=np.full(n, length),
        width=np.full(n, width),
        params=np.vstack([table, agent_row, agent_row]),
        yields=np.concatenate([yields, [False, False]]),
        behaviors=tuple(behaviors) + (Behavior("agent", 0, task), BLOCKED),
        ego_id=ego,
        blocked_id=blocked,
        road=road,
    )


# --------------------------------------------------------------------------
# collisions
# --------------------------------------------------------------------------


def collision_pairs(scene: Scene, rows=None) -> np.ndarray:
    """Row-index pairs ``(i, j)``, ``i < j``, whose oriented footprints overlap.

    Uses a separating-axis test. With a single row in ``rows`` only pairs
    involving that row are tested.
    """
    only = -1
    if rows is not None:
        rows = np.atleast_1d(rows)
        if len(rows) != 1:
            raise ValueError("restriction supports a single row")
        only = int(rows[0])
    return K.collision_pairs(scene.p_lon, scene.y, scene.heading, scene.length, scene.width, only)


def detect_collisions(scene: Scene) -> set[tuple]:
    """Vehicle-id pairs whose oriented footprints overlap."""
    return {(scene.ids[i].item(), scene.ids[j].item()) for i, j in collision_pairs(scene)}


def ego_in_collision(scene: Scene) -> bool:
    return len(collision_pairs(scene, [scene.ego])) > 0


# --------------------------------------------------------------------------
# reward
# --------------------------------------------------------------------------


def passed_blockage(prev: Scene, nxt: Scene) -> bool:
    """True when the ego's rear bumper crosses the blocked car's front bumper."""
    if nxt.blocked_id < 0:
        return False
    e, b = nxt.ego, nxt.blocked
    front = nxt.p_lon[b] + 0.5 * nxt.length[b]
    rear_before = prev.p_lon[prev.ego] - 0.5 * prev.length[prev.ego]
    rear_after = nxt.p_lon[e] - 0.5 * nxt.length[e]
    return rear_before <= front < rear_after


def compute_reward(
    prev: Scene,
    action,
    nxt: Scene,
    task: str = "merge",
    w: RewardWeights = RewardWeights(),
    v_desired: float | None = None,
    collided: bool | None = None,
    already_passed: bool = False,
) -> float:
    """Reward for the ego over one decision interval ``prev -> nxt``.

    ``action`` is unused by the reward terms; it is accepted so the call mirrors
    the transition. ``v_desired`` defaults to the merge target speed.
    """
    del action
    if v_desired is None:
        v_desired = w.merge_desired_speed
    if collided is None:
        collided = ego_in_collision(nxt) and not ego_in_collision(prev)
    e = nxt.ego
    r = w.speed * abs(nxt.v_lon[e] - v_desired)
    if collided:
        r += w.collision
    if task == "merge" and nxt.lane[e] == TOP_LANE:
        r += w.top_lane
    if not already_passed and passed_blockage(prev, nxt):
        r += w.pass_blockage
    return float(r)


# --------------------------------------------------------------------------
# episode loop
# --------------------------------------------------------------------------

Populate = Callable[[np.ndarray, np.random.Generator], Sequence[Behavior]]
PolicyFn = Callable[[np.ndarray], np.ndarray]

TRACE_HEADER = ("time", "vehicle_id", "lane_id", "p_lon", "p_lat", "v_lon", "v_lat", "heading",
                "action_index", "reward")


class MergeEnv:
    """Dense-traffic episode seen from the ego vehicle.

    The learner drives the ego through :meth:`step` with action indices. Traffic
    cars are driven by their :class:`Behavior`: level-0 rules, or greedy level-k
    networks looked up in ``policies`` (level -> batched greedy function).
    With ``ego_level0=True`` the ego itself follows the level-0 merging rules
    and :meth:`step` ignores its argument.

    By default a merge episode ends at the first outcome. With
    ``stop_at_success=False`` (used for training) it keeps running after the
    dwell criterion is met, so rewards that arrive later, such as passing the
    blocked car, stay reachable; it then ends on a collision or at the time
    limit, labelled ``"success"`` unless the ego collided.
    """

    def __init__(
        self,
        task: str = "merge",
        sim: SimConfig = SimConfig(),
        scene_params: InitialSceneParams = InitialSceneParams(),
        road: RoadGeometry = RoadGeometry(),
        reward: RewardWeights = RewardWeights(),
        populate: Populate | None = None,
        policies: Mapping[int, PolicyFn] | None = None,
        ego_level0: bool = False,
        stop_at_success: bool = True,
        record_trace: bool = False,
        mobil: MOBILParams = MOBILParams(),
        gains: ControllerGains = ControllerGains(),
    ):
        if task not in ("merge", "keep_lane"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.cfg = sim
        self.scene_params = scene_params
        self.road = road
        self.weights = reward
        self.populate = populate
        self.policies = dict(policies or {})
        self.ego_level0 = ego_level0
        self.stop_at_success = stop_at_success
        self.record_trace = record_trace
        self.mobil = mobil
        self.gains = gains
        self.scene: Scene | None = None

    # -- setup --------------------------------------------------------------

    def reset(self, rng: np.random.Generator, scene: Scene | None = None) -> np.ndarray:
        self.rng = rng
        if scene is None:
            scene = generate_initial_scene(rng, self.scene_params, self.road, self.cfg, task=self.task)
            if self.populate is not None:
                traffic = [i for i, b in enumerate(scene.behaviors) if b.kind == "level0"]
                assigned = list(self.populate(scene.lane[traffic], rng))
                behaviors = list(scene.behaviors)
                for i, b in zip(traffic, assigned):
                    behaviors[i] = b
                scene = scene.replace(behaviors=tuple(behaviors))
        e = scene.ego
        kinds = np.array([b.kind for b in scene.behaviors])
        self._level0 = np.flatnonzero(kinds == "level0")
        self._policy_rows = np.flatnonzero(kinds == "policy")
        self._agent_rows = np.flatnonzero(kinds == "agent")
        self._frozen = kinds == "blocked"
        self._roles = np.array([scene.behaviors[i].task for i in self._level0])
        scene = scene.replace(lane=scene.lane.astype(np.int64))
        self._home = scene.lane.copy()
        self._target = scene.lane.copy()
        self._levels = np.array([b.level for b in scene.behaviors])
        self._missing = set(self._levels[self._policy_rows].tolist()) - set(self.policies)
        if self._missing:
            raise KeyError(f"no policy registered for levels {sorted(self._missing)}")

        params = scene.params.copy()
        # learned drivers share the agent's longitudinal parameters and never yield
        params[self._policy_rows] = AGENT_PARAMS.as_row()
        scene = scene.replace(yields=np.where(np.isin(np.arange(scene.n), self._policy_rows), False, scene.yields))
        if self.ego_level0:
            table, yields = sample_driver_table(rng, 1)
            params[e] = table[0]
            scene = scene.replace(yields=np.where(np.arange(scene.n) == e, yields[0], scene.yields))
            self._level0 = np.sort(np.append(self._level0, e))
            self._agent_rows = self._agent_rows[self._agent_rows != e]
            self._roles = np.array(
                [scene.behaviors[i].task if i != e else self.task for i in self._level0]
            )
        self.v_desired = self.weights.merge_desired_speed
        if self.task == "keep_lane":
            self.v_desired = float(params[e, V_DES]) if self.ego_level0 else float(
                rng.uniform(2.0, 5.0)
            )
        self.scene = scene.replace(params=params)
        self.step_index = 0
        self.dwell_start = 0 if self.scene.lane[e] == TOP_LANE else None
        self.left_top = self.scene.lane[e] != TOP_LANE
        self.passed = False
        self.dwell_reached = False
        self.total_reward = 0.0
        self.n_decisions = 0
        self.other_collisions: set = set()
        self.outcome: str | None = None
        self.action = None
        self.trace: list | None = [] if self.record_trace else None
        return self.observation()

    def observation(self) -> np.ndarray:
        return observe(self.scene, [self.scene.ego])[0]

    # -- control ------------------------------------------------------------

    def _decide(self, action):
        scene = self.scene
        params = scene.params.copy()
        e = scene.ego
        if not self.ego_level0:
            desired, lateral = decode_action(action)
            params[e, V_DES] = desired
            self._target[e] = 1 - scene.lane[e] if lateral == CHANGE_LANE else scene.lane[e]
        if len(self._policy_rows):
            for level in np.unique(self._levels[self._policy_rows]):
                rows = self._policy_rows[self._levels[self._policy_rows] == level]
                acts = np.asarray(self.policies[int(level)](observe(scene, rows)), dtype=int)
                params[rows, V_DES] = np.array([0.0, 3.0, 5.0])[acts // 2]
                self._target[rows] = np.where(acts % 2 == CHANGE_LANE, 1 - scene.lane[rows], scene.lane[rows])
        if len(self._level0):
            self._target[self._level0] = level0_target_lanes(
                scene, self._level0, self._roles, self._home[self._level0], self.mobil
            )
        self.scene = scene.replace(params=params)

    def _sim_step(self):
        scene, cfg = self.scene, self.cfg
        p_lon, p_lat, v_lon, v_lat, heading, lane = K.sim_step(
            scene.p_lon, scene.p_lat, scene.v_lon, scene.v_lat, scene.heading, scene.lane, scene.length,
            scene.params, scene.yields, self._target, self._frozen, scene.road.lane_width, YIELD_RANGE,
            MIN_GAP, cfg.dt, cfg.steering_rate_max, cfg.steering_angle_max, cfg.lateral_speed_floor, self.gains.k_p, self.gains.k_d,
        )
        self.step_index += 1
        self.scene = scene.replace(
            time=self.step_index * cfg.dt, lane=lane, p_lon=p_lon, p_lat=p_lat, v_lon=v_lon,
            v_lat=v_lat, heading=heading, steering=heading,
        )

    def _classify(self, ego_hit: bool) -> str | None:
        cfg, e = self.cfg, self.scene.ego
        if ego_hit:
            return "collision"
        in_top = self.scene.lane[e] == TOP_LANE
        if not in_top:
            self.dwell_start = None
            self.left_top = True
        elif self.dwell_start is None:
            self.dwell_start = self.step_index
        if self.task == "merge":
            if in_top and self.step_index - self.dwell_start >= cfg.dwell_steps:
                if self.stop_at_success:
                    return "success"
                self.dwell_reached = True
            if self.step_index >= cfg.max_steps:
                return "success" if self.dwell_reached else "timeout"
        elif self.step_index >= cfg.max_steps:
            return "timeout" if self.left_top else "success"
        return None

    def step(self, action=None):
        """Advance one decision interval. Returns ``(obs, reward, terminated, truncated, info)``."""
        if self.scene is None:
            raise RuntimeError("call reset() first")
        if self.outcome is not None:
            raise RuntimeError("episode already finished")
        start = self.scene
        self.action = None if self.ego_level0 else int(action)
        self._decide(action)
        ego_hit = False
        for k in range(self.cfg.decision_period):
            self._sim_step()
            pairs = collision_pairs(self.scene)
            e = self.scene.ego
            for i, j in pairs:
                if i == e or j == e:
                    ego_hit = True
                else:
                    self.other_collisions.add((int(self.scene.ids[i]), int(self.scene.ids[j])))
            self.outcome = self._classify(ego_hit)
            last = self.outcome is not None or k == self.cfg.decision_period - 1
            if self.trace is not None:
                self._record(None)
            if last:
                break
        passed_now = not self.passed and passed_blockage(start, self.scene)
        r = compute_reward(start, self.action, self.scene, self.task, self.weights, self.v_desired,
                           collided=ego_hit, already_passed=self.passed)
        self.passed |= passed_now
        self.total_reward += r
        self.n_decisions += 1
        if self.trace is not None:
            self.trace[-1] = self.trace[-1][:-1] + (r,)
        terminated = self.outcome == "collision" or (
            self.task == "merge" and self.outcome == "success" and self.stop_at_success
        )
        truncated = self.outcome is not None and not terminated
        info = {"outcome": self.outcome, "time": self.scene.time, "passed": self.passed}
        return self.observation(), r, terminated, truncated, info

    def _record(self, reward):
        s = self.scene
        e = s.ego
        rows = [
            (round(s.time, 10), int(s.ids[i]), int(s.lane[i]), s.p_lon[i], s.p_lat[i], s.v_lon[i],
             s.v_lat[i], s.heading[i], self.action if i == e else None, None)
            for i in range(s.n)
        ]
        # the ego row is kept last in each group so the reward can be patched in
        ego_row = rows.pop(e)
        self.trace.extend(rows)
        self.trace.append(ego_row[:-1] + (reward if reward is not None else 0.0,))

    def result(self) -> EpisodeOutcome:
        return EpisodeOutcome(
            outcome=self.outcome,
            time=self.scene.time,
            total_reward=self.total_reward,
            n_decisions=self.n_decisions,
            passed_blockage=self.passed,
            other_collisions=len(self.other_collisions),
            trace=self.trace,
        )


def run_episode(env: MergeEnv, policy: Callable[[np.ndarray], int] | None, rng: np.random.Generator,
                scene: Scene | None = None):
    """Play one episode. ``policy`` maps the ego observation to an action index
    (ignored when the env drives the ego by level-0 rules).

    Returns the :class:`EpisodeOutcome` and the ego's ``(s, a, r, s', done)`` list.
    """
    obs = env.reset(rng, scene)
    experiences = []
    while True:
        action = None if env.ego_level0 else int(policy(obs))
        nxt, r, terminated, truncated, _ = env.step(action)
        experiences.append((obs, action, r, nxt, terminated))
        obs = nxt
        if terminated or truncated:
            return env.result(), experiences
