"""Compiled inner loops shared by the drivers, the simulator and the observer.

Vehicles are passed column-wise. ``params`` rows follow ``traffic.PARAM_FIELDS``:
eta_percept, c, delta, T, s_min, a_max, d_cmf, v_des.
"""
import math

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def idm(v, s, dv, v_des, delta, T, s_min, a_max, d_cmf):
    s_star = s_min + max(0.0, v * T + v * dv / (2.0 * math.sqrt(a_max * d_cmf)))
    if v_des > 0.0:
        free = 1.0 - (v / v_des) ** delta
    elif v > 0.0:
        # no free-road term exists for a zero target: brake comfortably to a stop
        free = -d_cmf / a_max
    else:
        free = 0.0
    inter = 0.0 if math.isinf(s) else (s_star / s) ** 2
    return a_max * (free - inter)


@njit(cache=True)
def neighbors(p_lon, lane, i, target_lane):
    """Nearest row ahead of and behind row ``i`` in ``target_lane`` (-1 if none)."""
    best_a, best_b = INF, INF
    ia, ib = -1, -1
    for j in range(p_lon.shape[0]):
        if j == i or lane[j] != target_lane:
            continue
        dx = p_lon[j] - p_lon[i]
        if dx > 0.0 or (dx == 0.0 and j > i):
            if dx < best_a:
                best_a, ia = dx, j
        elif -dx < best_b:
            best_b, ib = -dx, j
    return ia, ib


@njit(cache=True)
def follow(i, j, p_lon, v_lon, length, params, gap_floor):
    """IDM acceleration of row ``i`` behind row ``j`` (``j < 0``: free road)."""
    if j < 0:
        s, dv = INF, 0.0
    else:
        s = max(p_lon[j] - p_lon[i] - 0.5 * (length[i] + length[j]), gap_floor)
        dv = v_lon[i] - v_lon[j]
    P = params[i]
    return idm(v_lon[i], s, dv, P[7], P[2], P[3], P[4], P[5], P[6])


@njit(cache=True)
def effective_leader(i, p_lon, lane, p_lat, yields, params, lane_width, yield_range):
    lead, _ = neighbors(p_lon, lane, i, lane[i])
    if not yields[i]:
        return lead
    best = INF if lead < 0 else p_lon[lead] - p_lon[i]
    threshold = (0.5 - params[i, 0]) * lane_width
    for j in range(p_lon.shape[0]):
        if lane[j] == lane[i]:
            continue
        dx = p_lon[j] - p_lon[i]
        if dx <= 0.0 or dx > yield_range:
            continue
        towards = p_lat[j] if lane[i] > lane[j] else -p_lat[j]
        if towards > threshold and dx < best:
            best, lead = dx, j
    return lead


@njit(cache=True)
def lane_neighbors_rows(p_lon, lane, rows, lanes):
    m = rows.shape[0]
    ahead = np.empty(m, np.int64)
    behind = np.empty(m, np.int64)
    for k in range(m):
        ahead[k], behind[k] = neighbors(p_lon, lane, rows[k], lanes[k])
    return ahead, behind


@njit(cache=True)
def effective_leaders_rows(rows, p_lon, lane, p_lat, yields, params, lane_width, yield_range, cooperative):
    out = np.empty(rows.shape[0], np.int64)
    for k in range(rows.shape[0]):
        i = rows[k]
        if cooperative:
            out[k] = effective_leader(i, p_lon, lane, p_lat, yields, params, lane_width, yield_range)
        else:
            out[k] = neighbors(p_lon, lane, i, lane[i])[0]
    return out


@njit(cache=True)
def follow_rows(rows, leaders, p_lon, v_lon, length, params, gap_floor):
    out = np.empty(rows.shape[0])
    for k in range(rows.shape[0]):
        out[k] = follow(rows[k], leaders[k], p_lon, v_lon, length, params, gap_floor)
    return out


@njit(cache=True)
def mobil_rows(rows, targets, p_lon, v_lon, lane, length, params, politeness, threshold, b_safe, gap_floor):
    out = np.zeros(rows.shape[0], np.bool_)
    for k in range(rows.shape[0]):
        i, target = rows[k], targets[k]
        if target == lane[i]:
            continue
        own_lead, old_f = neighbors(p_lon, lane, i, lane[i])
        new_lead, new_f = neighbors(p_lon, lane, i, target)
        gain = follow(i, new_lead, p_lon, v_lon, length, params, gap_floor) - follow(
            i, own_lead, p_lon, v_lon, length, params, gap_floor
        )
        others = 0.0
        if new_f >= 0:
            gap = p_lon[i] - p_lon[new_f] - 0.5 * (length[i] + length[new_f])
            after = follow(new_f, i, p_lon, v_lon, length, params, gap_floor)
            if gap <= 0.0 or after < -b_safe:
                continue
            others += after - follow(new_f, new_lead, p_lon, v_lon, length, params, gap_floor)
        if old_f >= 0:
            others += follow(old_f, own_lead, p_lon, v_lon, length, params, gap_floor) - follow(
                old_f, i, p_lon, v_lon, length, params, gap_floor
            )
        out[k] = gain + politeness * others > threshold
    return out


@njit(cache=True)
def attribute(y, lane_width, n_lanes):
    lane = math.ceil(y / lane_width - 0.5)
    lane = min(max(lane, 0), n_lanes - 1)
    return lane, y - lane * lane_width


@njit(cache=True)
def sim_step(p_lon, p_lat, v_lon, v_lat, heading, lane, length, params, yields, target, frozen,
             lane_width, yield_range, gap_floor, dt, rate_max, angle_max, speed_floor, k_p, k_d):
    """Advance every vehicle by one step. Rows with ``frozen`` set do not move."""
    n = p_lon.shape[0]
    a_lon = np.zeros(n)
    a_lat = np.zeros(n)
    for i in range(n):
        if frozen[i]:
            continue
        j = effective_leader(i, p_lon, lane, p_lat, yields, params, lane_width, yield_range)
        a_lon[i] = follow(i, j, p_lon, v_lon, length, params, gap_floor)
        offset = lane[i] * lane_width + p_lat[i] - target[i] * lane_width
        a_lat[i] = -k_p * offset - k_d * v_lat[i]
    out_p_lon = p_lon.copy()
    out_p_lat = p_lat.copy()
    out_v_lon = v_lon.copy()
    out_v_lat = v_lat.copy()
    out_heading = heading.copy()
    out_lane = lane.copy()
    step = rate_max * dt
    for i in range(n):
        if frozen[i]:
            out_v_lon[i] = 0.0
            out_v_lat[i] = 0.0
            continue
        out_p_lon[i] = p_lon[i] + v_lon[i] * dt
        y = lane[i] * lane_width + p_lat[i] + v_lat[i] * dt
        v2 = max(v_lon[i] + a_lon[i] * dt, 0.0)
        v_ref = max(v2, speed_floor)
        wanted = math.atan2(v_lat[i] + a_lat[i] * dt, v_ref)
        h = min(max(wanted, heading[i] - step), heading[i] + step)
        h = min(max(h, -angle_max), angle_max)
        out_v_lon[i] = v2
        out_v_lat[i] = v_ref * math.tan(h)
        out_heading[i] = h
        out_lane[i], out_p_lat[i] = attribute(y, lane_width, 2)
    return out_p_lon, out_p_lat, out_v_lon, out_v_lat, out_heading, out_lane


@njit(cache=True)
def rect_overlap(xa, ya, ha, la, wa, xb, yb, hb, lb, wb):
    """Separating-axis test for two oriented rectangles (touching is not overlap)."""
    dx, dy = xb - xa, yb - ya
    ca, sa, cb, sb = math.cos(ha), math.sin(ha), math.cos(hb), math.sin(hb)
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    for ax, ay in axes:
        ra = 0.5 * la * abs(ca * ax + sa * ay) + 0.5 * wa * abs(-sa * ax + ca * ay)
        rb = 0.5 * lb * abs(cb * ax + sb * ay) + 0.5 * wb * abs(-sb * ax + cb * ay)
        if abs(dx * ax + dy * ay) >= ra + rb:
            return False
    return True


@njit(cache=True)
def collision_pairs(p_lon, y, heading, length, width, only):
    """Overlapping row pairs ``(i, j)`` with ``i < j``; ``only >= 0`` restricts to that row."""
    n = p_lon.shape[0]
    out = np.empty((n * (n - 1) // 2 if only < 0 else n, 2), np.int64)
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            if only >= 0 and i != only and j != only:
                continue
            reach = 0.5 * (math.hypot(length[i], width[i]) + math.hypot(length[j], width[j]))
            if abs(p_lon[j] - p_lon[i]) >= reach or abs(y[j] - y[i]) >= reach:
                continue
            if rect_overlap(p_lon[i], y[i], heading[i], length[i], width[i],
                            p_lon[j], y[j], heading[j], length[j], width[j]):
                out[k, 0], out[k, 1] = i, j
                k += 1
    return out[:k]


@njit(cache=True)
def observe_rows(rows, p_lon, y, v_lon, v_lat, heading, fov, n_slots, sentinel):
    """Raw ego blocks ``(m, 4)`` and neighbor blocks ``(m, n_slots, 4)``.

    Neighbors are all other vehicles within ``fov`` longitudinally, closest
    first (ties by row order); unused slots hold ``sentinel``.
    """
    m, n = rows.shape[0], p_lon.shape[0]
    ego = np.empty((m, 4))
    nb = np.empty((m, n_slots, 4))
    dist = np.empty(n)
    for k in range(m):
        i = rows[k]
        ego[k, 0], ego[k, 1], ego[k, 2], ego[k, 3] = y[i], v_lon[i], v_lat[i], heading[i]
        for j in range(n):
            d = abs(p_lon[j] - p_lon[i])
            dist[j] = d if (j != i and d <= fov) else INF
        order = np.argsort(dist, kind="mergesort")
        for s in range(n_slots):
            if s < n and not math.isinf(dist[order[s]]):
                j = order[s]
                nb[k, s, 0] = p_lon[j] - p_lon[i]
                nb[k, s, 1] = y[j] - y[i]
                nb[k, s, 2] = v_lon[j] - v_lon[i]
                nb[k, s, 3] = v_lat[j] - v_lat[i]
            else:
                for c in range(4):
                    nb[k, s, c] = sentinel[c]
    return ego, nb
