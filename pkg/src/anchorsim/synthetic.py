"""Synthetic expert scenarios: noisy IDM longitudinal control with pure-pursuit lane following."""

from __future__ import annotations

import math

import numpy as np

from .kernels import obb_overlap_pairs, wrap_angle
from .scenario import (
    DT,
    AgentTrack,
    GoalSpec,
    RoadGraph,
    Scenario,
    lane_projection,
    offroad_mask,
    polyline_length,
    polyline_point_at,
)

TEMPLATES = ("straight", "curve", "intersection")
LANE_WIDTH = 3.5
WHEELBASE = 2.8

# expert IDM constants
IDM_A, IDM_B, IDM_S0, IDM_T, IDM_DELTA = 1.5, 2.0, 2.0, 1.5, 4
ACCEL_NOISE = 0.3
V0_RANGE = (8.0, 15.0)
MAX_RETRIES = 200


class SpawnError(RuntimeError):
    pass


def _line(x0, y0, x1, y1, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return np.array([x0, y0]) * (1 - t) + np.array([x1, y1]) * t


def _arc(radius, center, phi0, phi1, n):
    phi = np.linspace(phi0, phi1, n)
    return np.stack([center[0] + radius * np.cos(phi), center[1] + radius * np.sin(phi)], axis=1)


def build_road(template: str) -> RoadGraph:
    hw = LANE_WIDTH
    if template == "straight":
        length = 400.0
        lanes = [_line(0.0, y, length, y, 81) for y in (-hw, 0.0, hw)]
        edges = [_line(0.0, -1.5 * hw, length, -1.5 * hw, 81), _line(0.0, 1.5 * hw, length, 1.5 * hw, 81)]
        poly = np.array([[0.0, -1.5 * hw], [length, -1.5 * hw], [length, 1.5 * hw], [0.0, 1.5 * hw]])
        return RoadGraph(lanes, edges, [poly])
    if template == "curve":
        r0, sweep, n = 150.0, 400.0 / 150.0, 161
        c = (0.0, r0)
        p0, p1 = -math.pi / 2, -math.pi / 2 + sweep
        lanes = [_arc(r0 + d, c, p0, p1, n) for d in (hw / 2, -hw / 2)]
        outer = _arc(r0 + hw, c, p0, p1, n)
        inner = _arc(r0 - hw, c, p0, p1, n)
        poly = np.concatenate([outer, inner[::-1]], axis=0)
        return RoadGraph(lanes, [outer, inner], [poly])
    if template == "intersection":
        L, h = 150.0, hw
        lanes = [
            _line(-L, -h / 2, L, -h / 2, 61),  # eastbound
            _line(L, h / 2, -L, h / 2, 61),  # westbound
            _line(h / 2, -L, h / 2, L, 61),  # northbound
            _line(-h / 2, L, -h / 2, -L, 61),  # southbound
        ]
        edges = [
            np.array([[h, L], [h, h], [L, h]]),
            np.array([[-L, h], [-h, h], [-h, L]]),
            np.array([[-h, -L], [-h, -h], [-L, -h]]),
            np.array([[L, -h], [h, -h], [h, -L]]),
        ]
        poly = np.array(
            [
                [-L, -h], [-h, -h], [-h, -L], [h, -L], [h, -h], [L, -h],
                [L, h], [h, h], [h, L], [-h, L], [-h, h], [-L, h],
            ]
        )
        return RoadGraph(lanes, edges, [poly])
    raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")


def idm_accel(v, v0, gap, dv, a=IDM_A, b=IDM_B, s0=IDM_S0, T=IDM_T, delta=IDM_DELTA):
    free = 1.0 - (v / v0) ** delta
    if gap is None:
        return a * free
    s_star = s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(a * b)))
    return a * (free - (s_star / max(gap, 0.1)) ** 2)


def _rollout_agent(lane, s_init, lat0, dh0, v_init, v0, length, leaders, n_steps, rng):
    """Integrate one agent along ``lane``. ``leaders`` holds (arc, speed, length) arrays of agents ahead."""
    x0, y0, th0 = polyline_point_at(lane, s_init)
    x = float(x0) - math.sin(th0) * lat0
    y = float(y0) + math.cos(th0) * lat0
    h = float(th0) + dh0
    v = v_init
    out = np.empty((n_steps, 4))
    for t in range(n_steps):
        out[t] = (x, y, h, v)
        if t == n_steps - 1:
            break
        s_cur, _, _, _ = lane_projection(lane, x, y)
        s_cur = float(s_cur[0])
        gap, dv = None, 0.0
        for arc, spd, ln in leaders:
            g = arc[t] - s_cur - 0.5 * (ln + length)
            if arc[t] > s_cur and (gap is None or g < gap):
                gap, dv = g, v - spd[t]
        acc = idm_accel(v, v0, gap, dv) + rng.normal(0.0, ACCEL_NOISE)
        acc = min(max(acc, -8.0), 3.0)
        v_new = max(0.0, v + acc * DT)
        lookahead = 5.0 + 0.3 * v
        tx, ty, _ = polyline_point_at(lane, s_cur + lookahead)
        alpha = math.atan2(float(ty) - y, float(tx) - x) - h
        alpha = math.atan2(math.sin(alpha), math.cos(alpha))
        steer = math.atan2(2.0 * WHEELBASE * math.sin(alpha), lookahead)
        v_mid = 0.5 * (v + v_new)
        yaw_rate = v_mid * math.tan(steer) / WHEELBASE
        h_mid = h + 0.5 * yaw_rate * DT
        x += v_mid * math.cos(h_mid) * DT
        y += v_mid * math.sin(h_mid) * DT
        h = float(wrap_angle(h + yaw_rate * DT))
        v = v_new
    return out


def generate_synthetic_scenario(
    template: str,
    n_agents: int,
    seed: int,
    init_step: int = 10,
    horizon_steps: int = 80,
    goal_radius: float = 2.0,
) -> Scenario:
    """Deterministic expert scenario. Raises :class:`SpawnError` when a collision/offroad-free spawn is not found."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    road = build_road(template)
    rng = np.random.default_rng([seed, TEMPLATES.index(template), n_agents])
    n_steps = init_step + horizon_steps + 1
    lanes = road.lane_centerlines
    lane_len = [polyline_length(p) for p in lanes]
    travel = (n_steps * DT + 1.0) * (V0_RANGE[1] + 1.5)
    agents: list[dict] = []

    for _ in range(n_agents):
        for _attempt in range(MAX_RETRIES):
            li = int(rng.integers(len(lanes)))
            length = float(rng.uniform(4.0, 5.0))
            width = float(rng.uniform(1.8, 2.1))
            s_hi = lane_len[li] - travel
            same = [a for a in agents if a["lane"] == li]
            if same:
                s_hi = min(s_hi, min(a["arc"][0] - 0.5 * (a["length"] + length) for a in same) - 8.0)
            if s_hi <= 5.0:
                continue
            s_init = float(rng.uniform(5.0, s_hi))
            v0 = float(rng.uniform(*V0_RANGE))
            v_init = float(rng.uniform(0.5, 1.0)) * v0
            lat0 = float(rng.normal(0.0, 0.15))
            dh0 = float(rng.normal(0.0, 0.01))
            leaders = [(a["arc"], a["traj"][:, 3], a["length"]) for a in same]
            traj = _rollout_agent(lanes[li], s_init, lat0, dh0, v_init, v0, length, leaders, n_steps, rng)
            if offroad_mask(traj[:, 0], traj[:, 1], road).any():
                continue
            clash = False
            for a in agents:
                o = a["traj"]
                if obb_overlap_pairs(
                    traj[:, 0], traj[:, 1], traj[:, 2], length, width, o[:, 0], o[:, 1], o[:, 2], a["length"], a["width"]
                ).any():
                    clash = True
                    break
            if clash:
                continue
            arc, _, _, _ = lane_projection(lanes[li], traj[:, 0], traj[:, 1])
            agents.append({"lane": li, "arc": arc, "traj": traj, "length": length, "width": width, "v0": v0})
            break
        else:
            raise SpawnError(f"spawn retries exhausted for {template} with {n_agents} agents (seed {seed})")

    tracks = [
        AgentTrack(
            x=a["traj"][:, 0].copy(),
            y=a["traj"][:, 1].copy(),
            heading=np.asarray(wrap_angle(a["traj"][:, 2]), dtype=np.float64),
            speed=a["traj"][:, 3].copy(),
            validity=np.ones(n_steps, dtype=bool),
            length=a["length"],
            width=a["width"],
        )
        for a in agents
    ]
    goals = [GoalSpec((float(t.x[-1]), float(t.y[-1])), goal_radius) for t in tracks]
    sc = Scenario(
        id=f"{template}_{n_agents}_{seed}",
        road_graph=road,
        tracks=tracks,
        goals=goals,
        controlled=np.ones(n_agents, dtype=bool),
        init_step=init_step,
        horizon_steps=horizon_steps,
    )
    sc._cache["v0"] = np.array([a["v0"] for a in agents])
    sc._cache["lanes"] = np.array([a["lane"] for a in agents])
    return sc


def generate_suite(n: int, seed: int, n_agents=(4, 8), templates=TEMPLATES) -> list[Scenario]:
    """Mixed-template suite; agent counts drawn from ``n_agents`` range inclusive."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        tpl = templates[k % len(templates)]
        na = int(rng.integers(n_agents[0], n_agents[1] + 1))
        sub = int(rng.integers(2**31))
        for bump in range(20):
            try:
                sc = generate_synthetic_scenario(tpl, na, sub + bump)
                break
            except SpawnError:
                continue
        else:  # pragma: no cover
            raise SpawnError(f"could not generate scenario {k}")
        sc.id = f"{tpl}_{k:04d}"
        out.append(sc)
    return out
