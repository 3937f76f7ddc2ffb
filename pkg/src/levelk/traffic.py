"""Road geometry, vehicle state, discrete actions and observation construction.

A :class:`Scene` stores every vehicle column-wise in numpy arrays so that the
simulator, the rule-based drivers and the observation builder can all work on
the whole traffic at once. Single-vehicle views are available through
:meth:`Scene.vehicle`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

BOTTOM_LANE = 0
TOP_LANE = 1

SPEED_LEVELS = (0.0, 3.0, 5.0)
STAY = 0
CHANGE_LANE = 1
N_ACTIONS = len(SPEED_LEVELS) * 2

FIELD_OF_VIEW = 30.0
N_SLOTS = 8
EGO_DIM = 4
SLOT_DIM = 4
OBS_DIM = EGO_DIM + N_SLOTS * SLOT_DIM
SENTINEL = (FIELD_OF_VIEW, 0.0, 0.0, 0.0)

# Observation scales. Lateral positions use the lane width instead of the
# field of view so that both coordinates end up of order one.
LON_SCALE = FIELD_OF_VIEW
SPEED_SCALE = 5.0
HEADING_SCALE = 0.5

# Column order of the per-vehicle driver parameter table stored in a Scene.
PARAM_FIELDS = ("eta_percept", "c", "delta", "T", "s_min", "a_max", "d_cmf", "v_des")


@dataclass(frozen=True)
class RoadGeometry:
    """Straight two-lane corridor. Lane 0 is the bottom (start) lane."""

    lane_width: float = 3.0
    road_length: float = 300.0
    lane_count: int = 2

    def __post_init__(self):
        if self.lane_count != 2:
            raise ValueError("only two-lane roads are supported")
        if self.lane_width <= 0 or self.road_length <= 0:
            raise ValueError("lane width and road length must be positive")

    def centerline(self, lane_id):
        return np.asarray(lane_id) * self.lane_width


@dataclass(frozen=True)
class VehicleState:
    p_lon: float
    p_lat: float
    v_lon: float
    v_lat: float
    heading: float = 0.0
    steering: float = 0.0
    lane_id: int = BOTTOM_LANE
    length: float = 4.0
    width: float = 1.8


class Action(NamedTuple):
    desired_speed: float
    lateral: int  # STAY or CHANGE_LANE


def decode_action(index: int) -> Action:
    """Map an action index in ``0..5`` to ``(desired_speed, lateral_command)``."""
    index = int(index)
    if not 0 <= index < N_ACTIONS:
        raise ValueError(f"action index {index} outside 0..{N_ACTIONS - 1}")
    return Action(SPEED_LEVELS[index // 2], index % 2)


def encode_action(action: Action) -> int:
    try:
        speed_idx = SPEED_LEVELS.index(float(action.desired_speed))
    except ValueError:
        raise ValueError(f"unknown desired speed {action.desired_speed}") from None
    if action.lateral not in (STAY, CHANGE_LANE):
        raise ValueError(f"unknown lateral command {action.lateral}")
    return 2 * speed_idx + int(action.lateral)


def lane_attribution(y, road: RoadGeometry):
    """Attribute a global lateral offset to the nearest lane.

    ``y`` is measured from the bottom-lane centerline. Returns ``(lane_id, p_lat)``
    with ``p_lat`` relative to the chosen centerline; exact midpoints go to the
    lower lane. Works on scalars and arrays.
    """
    y = np.asarray(y, dtype=float)
    w = road.lane_width
    lane = np.ceil(y / w - 0.5).astype(np.int64)
    lane = np.clip(lane, 0, road.lane_count - 1)
    p_lat = y - lane * w
    if lane.ndim == 0:
        return int(lane), float(p_lat)
    return lane, p_lat


@dataclass(frozen=True)
class Behavior:
    """How a vehicle is driven.

    ``kind`` is ``"level0"`` (rule-based driver), ``"policy"`` (greedy level-k
    network), ``"agent"`` (actions supplied from outside, i.e. the learner) or
    ``"blocked"`` (permanently stopped).
    """

    kind: str
    level: int = 0
    task: str = "merge"  # "merge" or "keep_lane"


BLOCKED = Behavior("blocked", level=0, task="keep_lane")


@dataclass(frozen=True, eq=False)
class Scene:
    """Snapshot of all vehicles at one instant. Arrays are indexed by row."""

    time: float
    ids: np.ndarray
    lane: np.ndarray
    p_lon: np.ndarray
    p_lat: np.ndarray
    v_lon: np.ndarray
    v_lat: np.ndarray
    heading: np.ndarray
    steering: np.ndarray
    length: np.ndarray
    width: np.ndarray
    params: np.ndarray  # (n, len(PARAM_FIELDS)) driver parameters
    yields: np.ndarray  # per-episode cooperative stance of each driver
    behaviors: tuple[Behavior, ...]
    ego_id: int
    blocked_id: int
    road: RoadGeometry = field(default_factory=RoadGeometry)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def y(self) -> np.ndarray:
        """Lateral offset from the bottom-lane centerline."""
        return self.lane * self.road.lane_width + self.p_lat

    def index_of(self, vehicle_id) -> int:
        hits = np.flatnonzero(self.ids == vehicle_id)
        if len(hits) == 0:
            raise KeyError(f"unknown vehicle id {vehicle_id}")
        return int(hits[0])

    @property
    def ego(self) -> int:
        return self.index_of(self.ego_id)

    @property
    def blocked(self) -> int:
        return self.index_of(self.blocked_id)

    def vehicle(self, vehicle_id) -> VehicleState:
        i = self.index_of(vehicle_id)
        return VehicleState(
            p_lon=float(self.p_lon[i]),
            p_lat=float(self.p_lat[i]),
            v_lon=float(self.v_lon[i]),
            v_lat=float(self.v_lat[i]),
            heading=float(self.heading[i]),
            steering=float(self.steering[i]),
            lane_id=int(self.lane[i]),
            length=float(self.length[i]),
            width=float(self.width[i]),
        )

    def replace(self, **changes) -> "Scene":
        return replace(self, **changes)


def make_scene(
    states: Sequence[VehicleState],
    *,
    ego: int = 0,
    blocked: int | None = None,
    params=None,
    yields=None,
    behaviors: Sequence[Behavior] | None = None,
    ids=None,
    time: float = 0.0,
    road: RoadGeometry | None = None,
) -> Scene:
    """Assemble a Scene from per-vehicle states; ``ego`` and ``blocked`` are row indices.

    Without ``blocked`` the scene has no stopped vehicle (``blocked_id = -1``).
    Missing driver parameters default to the fixed agent parameter row.
    """
    n = len(states)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if len(np.unique(ids)) != n:
        raise ValueError("vehicle ids must be unique")
    if params is None:
        from .drivers import AGENT_PARAMS

        params = np.tile(AGENT_PARAMS.as_row(), (n, 1))
    if yields is None:
        yields = np.zeros(n, dtype=bool)
    if behaviors is None:
        behaviors = tuple(
            BLOCKED if i == blocked else Behavior("agent" if i == ego else "level0") for i in range(n)
        )

    def col(name, dtype=float):
        return np.array([getattr(s, name) for s in states], dtype=dtype)

    return Scene(
        time=time,
        ids=ids,
        lane=col("lane_id", np.int64),
        p_lon=col("p_lon"),
        p_lat=col("p_lat"),
        v_lon=col("v_lon"),
        v_lat=col("v_lat"),
        heading=col("heading"),
        steering=col("steering"),
        length=col("length"),
        width=col("width"),
        params=np.asarray(params, dtype=float).reshape(n, len(PARAM_FIELDS)),
        yields=np.asarray(yields, dtype=bool),
        behaviors=tuple(behaviors),
        ego_id=int(ids[ego]),
        blocked_id=-1 if blocked is None else int(ids[blocked]),
        road=road or RoadGeometry(),
    )


@dataclass(frozen=True)
class Observation:
    """Raw (unnormalized) ego-centric features.

    ``ego`` is ``[y, v_lon, v_lat, heading]`` where ``y`` is the lateral offset
    from the bottom-lane centerline. ``neighbors`` holds 8 rows of
    ``[rel_p_lon, rel_p_lat, rel_v_lon, rel_v_lat]``, closest first.
    """

    ego: np.ndarray
    neighbors: np.ndarray

    def vector(self, road: RoadGeometry | None = None) -> np.ndarray:
        return normalize(self.ego[None], self.neighbors[None], road or RoadGeometry())[0]

    @property
    def n_present(self) -> int:
        return int(np.sum(~np.all(self.neighbors == np.array(SENTINEL), axis=1)))


def observe_raw(scene: Scene, rows) -> tuple[np.ndarray, np.ndarray]:
    """Ego blocks ``(m, 4)`` and neighbor blocks ``(m, 8, 4)`` for the given rows."""
    from ._kernels import observe_rows

    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    return observe_rows(rows, scene.p_lon, scene.y, scene.v_lon, scene.v_lat, scene.heading,
                        FIELD_OF_VIEW, N_SLOTS, np.array(SENTINEL))


def normalize(ego: np.ndarray, nb: np.ndarray, road: RoadGeometry) -> np.ndarray:
    """Scale raw features and flatten to network inputs of shape ``(m, 36)``."""
    w = road.lane_width
    ego_n = ego / np.array([w, SPEED_SCALE, SPEED_SCALE, HEADING_SCALE])
    nb_n = nb / np.array([LON_SCALE, w, SPEED_SCALE, SPEED_SCALE])
    return np.concatenate([ego_n, nb_n.reshape(len(nb), -1)], axis=1)


def observe(scene: Scene, rows) -> np.ndarray:
    """Normalized network inputs for several vehicles at once."""
    ego, nb = observe_raw(scene, rows)
    return normalize(ego, nb, scene.road)


def build_observation(scene: Scene, subject_id) -> Observation:
    i = scene.index_of(subject_id)
    ego, nb = observe_raw(scene, [i])
    return Observation(ego=ego[0], neighbors=nb[0])
