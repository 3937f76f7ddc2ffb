"""Rule-based drivers: IDM, cooperative IDM, MOBIL and the lateral PD controller.

The per-vehicle loops live in the compiled kernels; the functions here adapt
them to :class:`~levelk.traffic.Scene` objects. ``*_rows`` variants evaluate
many vehicles of a scene at once, the scalar ones a single driver.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from . import _kernels as K
from .traffic import BOTTOM_LANE, CHANGE_LANE, PARAM_FIELDS, STAY, TOP_LANE, Scene

YIELD_RANGE = 15.0
MIN_GAP = 1e-3  # gaps are floored here when the simulator queries overlapping vehicles

# Support of each driver parameter: (low, high).
PARAM_SUPPORT = {
    "eta_percept": (-0.15, 0.15),
    "c": (0.0, 1.0),
    "delta": (3.5, 4.5),
    "T": (3.5, 4.5),
    "s_min": (1.0, 2.0),
    "a_max": (2.5, 3.5),
    "d_cmf": (1.5, 2.5),
    "v_des": (2.0, 5.0),
}


@dataclass(frozen=True)
class CIDMParams:
    """Cooperative IDM parameters of one driver.

    ``yield_decision`` is the driver's cooperative stance for the whole
    episode, drawn once with probability ``c``.
    """

    eta_percept: float = 0.0
    c: float = 0.0
    delta: float = 4.0
    T: float = 4.0
    s_min: float = 1.5
    a_max: float = 3.0
    d_cmf: float = 2.0
    v_des: float = 5.0
    yield_decision: bool = False

    def as_row(self) -> np.ndarray:
        return np.array(astuple(self)[: len(PARAM_FIELDS)], dtype=float)

    @classmethod
    def from_row(cls, row, yield_decision=False) -> "CIDMParams":
        return cls(*(float(x) for x in row), yield_decision=bool(yield_decision))

    def in_support(self) -> bool:
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi) in PARAM_SUPPORT.items())


# Longitudinal parameters of learned agents (ego and level-k traffic). The
# desired speed column is overwritten by the chosen action.
AGENT_PARAMS = CIDMParams()


@dataclass(frozen=True)
class MOBILParams:
    politeness: float = 0.5
    threshold: float = 0.1
    b_safe: float = 2.0

    def __post_init__(self):
        if self.politeness < 0 or self.threshold < 0 or self.b_safe <= 0:
            raise ValueError("invalid MOBIL parameters")


@dataclass(frozen=True)
class ControllerGains:
    k_p: float = 3.0
    k_d: float = 3.0

    def __post_init__(self):
        if self.k_p <= 0 or self.k_d <= 0:
            raise ValueError("controller gains must be positive")


def sample_driver_table(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` parameter rows uniformly over their supports, plus yield stances."""
    lo = np.array([PARAM_SUPPORT[k][0] for k in PARAM_FIELDS])
    hi = np.array([PARAM_SUPPORT[k][1] for k in PARAM_FIELDS])
    table = lo + (hi - lo) * rng.random((n, len(PARAM_FIELDS)))
    yields = rng.random(n) < table[:, PARAM_FIELDS.index("c")]
    return table, yields


def sample_driver_params(rng: np.random.Generator) -> CIDMParams:
    table, yields = sample_driver_table(rng, 1)
    return CIDMParams.from_row(table[0], yields[0])


# --------------------------------------------------------------------------
# IDM
# --------------------------------------------------------------------------


def idm_array(v, s, dv, v_des, delta, T, s_min, a_max, d_cmf) -> np.ndarray:
    """Elementwise IDM acceleration over broadcast inputs (``s = inf``: free road)."""
    args = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (v, s, dv, v_des, delta, T, s_min, a_max, d_cmf)))
    flat = [x.ravel() for x in args]
    out = np.array([K.idm(*vals) for vals in zip(*flat)])
    return out.reshape(args[0].shape)


def idm_acceleration(v: float, s: float, dv: float, params: CIDMParams) -> float:
    """Longitudinal acceleration for speed ``v``, gap ``s`` and closing speed ``dv``.

    Pass ``s = math.inf`` (and ``dv = 0``) when there is no leader. A zero
    desired speed has no free-road term in the usual form; it is replaced by
    comfortable braking to a stop.
    """
    if not s > 0:
        raise ValueError(f"non-positive gap {s}: vehicles already overlap")
    p = params
    return float(K.idm(float(v), float(s), float(dv), p.v_des, p.delta, p.T, p.s_min, p.a_max, p.d_cmf))


def _rows(rows) -> np.ndarray:
    return np.atleast_1d(np.asarray(rows, dtype=np.int64))


def follow_rows(scene: Scene, rows, leaders, gap_floor=MIN_GAP) -> np.ndarray:
    """IDM for ``rows`` following ``leaders`` (-1 = free road) with per-row params."""
    return K.follow_rows(_rows(rows), _rows(leaders), scene.p_lon, scene.v_lon, scene.length,
                         scene.params, gap_floor)


def lane_neighbors(scene: Scene, rows, lanes) -> tuple[np.ndarray, np.ndarray]:
    """Nearest vehicle ahead and behind each row within the given lane (-1 if none)."""
    rows = _rows(rows)
    lanes = np.broadcast_to(np.asarray(lanes, dtype=np.int64), rows.shape).copy()
    return K.lane_neighbors_rows(scene.p_lon, scene.lane.astype(np.int64), rows, lanes)


def effective_leaders(scene: Scene, rows, cooperative=True) -> np.ndarray:
    """Own-lane leader, or a closer merging vehicle inside the yield area.

    A vehicle in the other lane, at most 15 m ahead, is inside the yield area of
    a yielding driver once its lateral offset towards the driver's lane exceeds
    ``(0.5 - eta_percept) * lane_width``.
    """
    return K.effective_leaders_rows(
        _rows(rows), scene.p_lon, scene.lane.astype(np.int64), scene.p_lat, scene.yields, scene.params,
        scene.road.lane_width, YIELD_RANGE, cooperative,
    )


def _with_params(scene: Scene, i: int, params: CIDMParams | None) -> Scene:
    if params is None:
        return scene
    table = scene.params.copy()
    table[i] = params.as_row()
    yields = scene.yields.copy()
    yields[i] = params.yield_decision
    return scene.replace(params=table, yields=yields)


def cidm_acceleration(scene: Scene, subject_id, params: CIDMParams | None = None) -> float:
    """Cooperative IDM acceleration of one driver.

    ``params`` defaults to the subject's row in the scene's parameter table.
    """
    i = scene.index_of(subject_id)
    scene = _with_params(scene, i, params)
    j = effective_leaders(scene, [i])[0]
    if j >= 0 and scene.p_lon[j] - scene.p_lon[i] - 0.5 * (scene.length[i] + scene.length[j]) <= 0:
        raise ValueError("subject already overlaps its leader")
    return float(follow_rows(scene, [i], [j])[0])


def mobil_rows(scene: Scene, rows, target_lanes, mobil: MOBILParams) -> np.ndarray:
    """True where changing to ``target_lanes`` passes both MOBIL criteria.

    Safety: the new follower must not need to brake harder than ``b_safe``.
    Incentive: own gain plus politeness times the followers' gains must exceed
    the threshold.
    """
    rows = _rows(rows)
    targets = np.broadcast_to(np.asarray(target_lanes, dtype=np.int64), rows.shape).copy()
    return K.mobil_rows(rows, targets, scene.p_lon, scene.v_lon, scene.lane.astype(np.int64), scene.length,
                        scene.params, mobil.politeness, mobil.threshold, mobil.b_safe, MIN_GAP)


def mobil_decision(
    scene: Scene, subject_id, mobil: MOBILParams = MOBILParams(), cidm: CIDMParams | None = None, target_lane=None
) -> int:
    """Lane-change command of a MOBIL driver (towards the other lane by default)."""
    i = scene.index_of(subject_id)
    scene = _with_params(scene, i, cidm)
    if target_lane is None:
        target_lane = 1 - scene.lane[i]
    return CHANGE_LANE if mobil_rows(scene, [i], [target_lane], mobil)[0] else STAY


# --------------------------------------------------------------------------
# lateral control and the composed level-0 driver
# --------------------------------------------------------------------------


def pd_lateral(p_lat, v_lat, gains: ControllerGains = ControllerGains()):
    """Lateral acceleration ``-k_p * p_lat - k_d * v_lat``.

    ``p_lat`` is measured from the centerline of the lane being tracked.
    """
    return -gains.k_p * p_lat - gains.k_d * v_lat


def level0_target_lanes(scene: Scene, rows, roles, home_lanes, mobil: MOBILParams) -> np.ndarray:
    """Lane each level-0 driver tracks until the next decision.

    Merging drivers still in the bottom lane consult MOBIL about the top lane;
    everyone else tracks their home lane (merging drivers: the lane they are in).
    """
    rows = np.asarray(rows, dtype=int)
    roles = np.asarray(roles)
    target = np.asarray(home_lanes, dtype=int).copy()
    merging = roles == "merge"
    target[merging] = scene.lane[rows[merging]]
    pending = merging & (scene.lane[rows] == BOTTOM_LANE)
    if pending.any():
        go = mobil_rows(scene, rows[pending], TOP_LANE, mobil)
        target[np.flatnonzero(pending)[go]] = TOP_LANE
    return target


def level0_step(
    scene: Scene,
    subject_id,
    params: CIDMParams | None = None,
    mobil: MOBILParams = MOBILParams(),
    gains: ControllerGains = ControllerGains(),
    role: str = "merge",
    home_lane: int | None = None,
) -> tuple[float, float]:
    """One decision of a level-0 driver: ``(a_lon, a_lat)``."""
    i = scene.index_of(subject_id)
    scene = _with_params(scene, i, params)
    home = scene.lane[i] if home_lane is None else home_lane
    target = level0_target_lanes(scene, [i], [role], [home], mobil)[0]
    a_lon = cidm_acceleration(scene, subject_id)
    offset = scene.y[i] - target * scene.road.lane_width
    return a_lon, float(pd_lateral(offset, scene.v_lat[i], gains))
