"""Closed-loop world stepping and observation construction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .scenario import DT, Scenario, offroad_mask
from .tokenizer import TokenVocab, compose

# feature scaling constants
SPEED_SCALE = 30.0
GOAL_SCALE = 100.0
LENGTH_SCALE = 10.0
WIDTH_SCALE = 5.0
ROAD_SCALE = 50.0

EGO_DIM = 6
PARTNER_DIM = 7
ROAD_DIM = 6


class SimError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = DT
    policy_every: int = 2
    horizon_steps: int = 80
    remove_on_goal: bool = False
    freeze_on_done: bool = True
    obs_radius: float = 50.0
    max_partners: int = 8
    max_road_points: int = 64
    ctx_partners: int = 32
    ctx_road_points: int = 64
    ctx_pos_scale: float = 100.0
    road_spacing: float = 4.0

    def __post_init__(self):
        if self.policy_every < 1:
            raise ValueError("policy_every must be >= 1")
        if self.horizon_steps % self.policy_every:
            raise ValueError("horizon_steps must be a multiple of policy_every")
        if self.ctx_partners < self.max_partners:
            raise ValueError("context partner budget must cover the observation budget")


@dataclass
class WorldState:
    step: int
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    active: np.ndarray
    done: np.ndarray
    collisions: np.ndarray
    offroad_steps: np.ndarray
    goal_reached: np.ndarray
    end_step: int

    def copy(self) -> "WorldState":
        return replace(self, **{k: getattr(self, k).copy() for k in _ARRAY_FIELDS})

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.step == other.step
            and self.end_step == other.end_step
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in _ARRAY_FIELDS)
        )

    @property
    def finished(self) -> bool:
        return self.step >= self.end_step


_ARRAY_FIELDS = ("x", "y", "heading", "speed", "active", "done", "collisions", "offroad_steps", "goal_reached")


@dataclass
class StepEvents:
    collided: np.ndarray
    offroad: np.ndarray
    goal: np.ndarray  # first achievement within this step
    poses: np.ndarray = field(repr=False)  # (policy_every, A, 4) sub-step x, y, heading, speed
    collided_sub: np.ndarray = field(repr=False)  # (policy_every, A)
    offroad_sub: np.ndarray = field(repr=False)
    goal_sub: np.ndarray = field(repr=False)
    active_sub: np.ndarray = field(repr=False)


def reset(scenario: Scenario, config: SimConfig = SimConfig()) -> WorldState:
    st = scenario.stacked()
    t = scenario.init_step
    valid = st["valid"][:, t]
    bad = np.flatnonzero(scenario.controlled & ~valid)
    if bad.size:
        raise SimError(f"controlled agent(s) {bad.tolist()} have no valid state at init_step {t}")
    horizon = min(config.horizon_steps, scenario.horizon_steps)
    n = scenario.n_agents
    return WorldState(
        step=t,
        x=st["x"][:, t].copy(),
        y=st["y"][:, t].copy(),
        heading=st["heading"][:, t].copy(),
        speed=st["speed"][:, t].copy(),
        active=valid.copy(),
        done=np.zeros(n, dtype=bool),
        collisions=np.zeros(n, dtype=np.int64),
        offroad_steps=np.zeros(n, dtype=np.int64),
        goal_reached=np.zeros(n, dtype=bool),
        end_step=t + horizon,
    )


def agent_events(x, y, h, active, scenario: Scenario):
    """Per-agent collision / offroad / inside-goal flags for one time instant."""
    st = scenario.stacked()
    col = kernels.obb_overlap_matrix(x, y, h, st["length"], st["width"], active).any(axis=1)
    off = np.zeros(x.shape[0], dtype=bool)
    if active.any():
        off[active] = offroad_mask(x[active], y[active], scenario.road_graph)
    at_goal = np.hypot(x - st["goal"][:, 0], y - st["goal"][:, 1]) <= st["goal_radius"]
    return col & active, off & active, at_goal & active


def step(
    world: WorldState,
    actions: Mapping[int, int] | None,
    vocab: TokenVocab | None,
    scenario: Scenario,
    config: SimConfig = SimConfig(),
    ego_poses: Mapping[int, np.ndarray] | None = None,
) -> tuple[WorldState, StepEvents]:
    """Advance one policy step (``policy_every`` sim steps).

    ``actions`` maps controlled agent -> token id. ``ego_poses`` maps an agent to a
    (policy_every, 4) array of x, y, heading, speed (planner mode).
    """
    P = config.policy_every
    if world.finished:
        raise SimError("episode already finished")
    if (world.step - scenario.init_step) % P:
        raise SimError(f"step {world.step} is not a policy boundary")
    actions = dict(actions or {})
    ego_poses = dict(ego_poses or {})
    st = scenario.stacked()
    n = scenario.n_agents

    moving = scenario.controlled & world.active & ~world.done
    for a in list(actions) + list(ego_poses):
        if not (0 <= a < n):
            raise SimError(f"agent {a} out of range")
        if world.done[a] or not world.active[a]:
            raise SimError(f"action given for done/inactive agent {a}")
    missing = [int(a) for a in np.flatnonzero(moving) if a not in actions and a not in ego_poses]
    if missing:
        raise SimError(f"missing actions for agents {missing}")

    tok_ids = sorted(a for a in actions if a not in ego_poses)
    planned = np.zeros((P, n, 4))
    if tok_ids:
        if vocab is None:
            raise SimError("token actions need a vocabulary")
        if vocab.H != P:
            raise SimError(f"vocab horizon {vocab.H} != policy_every {P}")
        ids = np.array([actions[a] for a in tok_ids], dtype=np.int64)
        if ids.min() < 0 or ids.max() >= vocab.K:
            raise SimError("token id out of range")
        idx = np.array(tok_ids)
        rel = vocab.tokens[ids]
        wx, wy, wh = compose(world.x[idx], world.y[idx], world.heading[idx], rel)
        disp = np.hypot(np.diff(np.concatenate([np.zeros((len(idx), 1)), rel[..., 0]], axis=1), axis=1),
                        np.diff(np.concatenate([np.zeros((len(idx), 1)), rel[..., 1]], axis=1), axis=1)) / config.dt
        disp[:, -1] = np.hypot(rel[:, -1, 0], rel[:, -1, 1]) / (P * config.dt)
        planned[:, idx, 0] = wx.T
        planned[:, idx, 1] = wy.T
        planned[:, idx, 2] = wh.T
        planned[:, idx, 3] = disp.T
    for a, poses in ego_poses.items():
        poses = np.asarray(poses, dtype=np.float64).reshape(P, 4)
        if not np.all(np.isfinite(poses)):
            raise SimError("non-finite planner pose")
        planned[:, a, :] = poses
        planned[:, a, 2] = kernels.wrap_angle(poses[:, 2])

    w = world.copy()
    driven = np.zeros(n, dtype=bool)
    driven[tok_ids] = True
    for a in ego_poses:
        driven[a] = True
    replay = ~scenario.controlled & ~w.done

    poses = np.zeros((P, n, 4))
    col_sub = np.zeros((P, n), dtype=bool)
    off_sub = np.zeros((P, n), dtype=bool)
    goal_sub = np.zeros((P, n), dtype=bool)
    act_sub = np.zeros((P, n), dtype=bool)
    new_goal = np.zeros(n, dtype=bool)
    for k in range(P):
        t = w.step + 1
        w.x[driven] = planned[k, driven, 0]
        w.y[driven] = planned[k, driven, 1]
        w.heading[driven] = planned[k, driven, 2]
        w.speed[driven] = planned[k, driven, 3]
        if replay.any():
            w.x[replay] = st["x"][replay, t]
            w.y[replay] = st["y"][replay, t]
            w.heading[replay] = st["heading"][replay, t]
            w.speed[replay] = st["speed"][replay, t]
            w.active[replay] = st["valid"][replay, t]
        w.step = t
        col, off, at_goal = agent_events(w.x, w.y, w.heading, w.active, scenario)
        w.collisions += col
        w.offroad_steps += off
        first = at_goal & ~w.goal_reached
        w.goal_reached |= at_goal
        new_goal |= first
        if config.remove_on_goal and first.any():
            w.done |= first
            driven &= ~first
            replay &= ~first
            if not config.freeze_on_done:
                w.active &= ~first
        poses[k] = np.stack([w.x, w.y, w.heading, w.speed], axis=1)
        col_sub[k], off_sub[k], goal_sub[k], act_sub[k] = col, off, at_goal, w.active
    if w.step >= w.end_step:
        w.done[:] = True
        if not config.freeze_on_done:
            w.active[:] = False
    ev = StepEvents(col_sub.any(0), off_sub.any(0), new_goal, poses, col_sub, off_sub, goal_sub, act_sub)
    return w, ev


# ------------------------------------------------------------- observations

@dataclass(eq=False)
class Observation:
    """Batched ego-centric features; leading axis indexes agents."""

    ego: np.ndarray  # (n, EGO_DIM)
    partners: np.ndarray  # (n, M, PARTNER_DIM)
    partner_mask: np.ndarray  # (n, M)
    road: np.ndarray  # (n, R, ROAD_DIM)
    road_mask: np.ndarray  # (n, R)
    partner_ids: np.ndarray | None = None  # (n, M), -1 for empty slots

    def __len__(self) -> int:
        return int(self.ego.shape[0])

    def flat(self) -> np.ndarray:
        n = len(self)
        return np.concatenate(
            [
                self.ego,
                self.partners.reshape(n, -1),
                self.partner_mask.astype(np.float64),
                self.road.reshape(n, -1),
                self.road_mask.astype(np.float64),
            ],
            axis=1,
        )

    def take(self, idx) -> "Observation":
        return Observation(
            self.ego[idx],
            self.partners[idx],
            self.partner_mask[idx],
            self.road[idx],
            self.road_mask[idx],
            None if self.partner_ids is None else self.partner_ids[idx],
        )

    @staticmethod
    def concat(obs: Sequence["Observation"]) -> "Observation":
        pids = None
        if all(o.partner_ids is not None for o in obs):
            pids = np.concatenate([o.partner_ids for o in obs])
        return Observation(
            np.concatenate([o.ego for o in obs]),
            np.concatenate([o.partners for o in obs]),
            np.concatenate([o.partner_mask for o in obs]),
            np.concatenate([o.road for o in obs]),
            np.concatenate([o.road_mask for o in obs]),
            pids,
        )

    def without_goal(self) -> "Observation":
        ego = self.ego.copy()
        ego[:, 1:4] = 0.0
        return replace(self, ego=ego)


GlobalContext = Observation


def road_points(scenario: Scenario, spacing: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Resampled road-graph points: (P, 2) positions, (P,) type (0 lane, 1 edge), (P,) tangent heading."""
    key = ("road_points", spacing)
    if key not in scenario._cache:
        pts, types, dirs = [], [], []
        rg = scenario.road_graph
        for kind, lines in ((0, rg.lane_centerlines), (1, rg.road_edges)):
            for line in lines:
                seg = np.diff(line, axis=0)
                seglen = np.hypot(seg[:, 0], seg[:, 1])
                cum = np.concatenate([[0.0], np.cumsum(seglen)])
                s = np.arange(0.0, cum[-1] + 1e-9, spacing)
                k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seglen) - 1)
                frac = (s - cum[k]) / seglen[k]
                pts.append(line[k] + frac[:, None] * seg[k])
                dirs.append(np.arctan2(seg[k, 1], seg[k, 0]))
                types.append(np.full(s.shape[0], kind))
        scenario._cache[key] = (np.concatenate(pts), np.concatenate(types), np.concatenate(dirs))
    return scenario._cache[key]


def _nearest_sorted(dist: np.ndarray, allowed: np.ndarray, k: int):
    """Row-wise k smallest distances among allowed columns, ties by column index.

    Distances are quantized to 1e-9 m so the ordering is stable under tiny rigid-motion round-off.
    """
    n, m = dist.shape
    big = np.iinfo(np.int64).max // 4
    q = np.rint(np.where(allowed, dist, 0.0) * 1e9).astype(np.int64)
    key = np.where(allowed, q * (m + 1) + np.arange(m)[None, :], big)
    k_eff = min(k, m)
    if k_eff < m:
        part = np.argpartition(key, k_eff - 1, axis=1)[:, :k_eff]
    else:
        part = np.broadcast_to(np.arange(m), (n, m)).copy()
    pk = np.take_along_axis(key, part, axis=1)
    order = np.argsort(pk, axis=1, kind="stable")
    cols = np.take_along_axis(part, order, axis=1)
    ok = np.take_along_axis(key, cols, axis=1) < big
    out = np.full((n, k), -1, dtype=np.int64)
    out[:, :k_eff] = np.where(ok, cols, -1)
    return out


def _to_frame(dx, dy, c, s):
    return c * dx + s * dy, -s * dx + c * dy


def build_observations(
    world: WorldState,
    scenario: Scenario,
    agent_ids: Sequence[int],
    goal_dropout=None,
    config: SimConfig = SimConfig(),
    context: bool = False,
) -> Observation:
    """Observations (or, with ``context=True``, privileged global contexts) for several agents of one world."""
    ids = np.asarray(agent_ids, dtype=np.int64)
    if ids.size and (~world.active[ids]).any():
        raise SimError(f"inactive agent(s) {ids[~world.active[ids]].tolist()}")
    st = scenario.stacked()
    n = ids.shape[0]
    if goal_dropout is None:
        goal_dropout = np.zeros(n, dtype=bool)
    goal_dropout = np.broadcast_to(np.asarray(goal_dropout, dtype=bool), (n,))

    if context:
        M, R = config.ctx_partners, config.ctx_road_points
        radius = math.inf
        pos_scale = config.ctx_pos_scale
    else:
        M, R = config.max_partners, config.max_road_points
        radius = config.obs_radius
        pos_scale = config.obs_radius

    ex, ey, eh = world.x[ids], world.y[ids], world.heading[ids]
    c, s = np.cos(eh)[:, None], np.sin(eh)[:, None]

    ego = np.zeros((n, EGO_DIM))
    ego[:, 0] = world.speed[ids] / SPEED_SCALE
    if not context:
        gx, gy = _to_frame(st["goal"][ids, 0][:, None] - ex[:, None], st["goal"][ids, 1][:, None] - ey[:, None], c, s)
        keep = ~goal_dropout
        ego[:, 1] = np.where(keep, gx[:, 0] / GOAL_SCALE, 0.0)
        ego[:, 2] = np.where(keep, gy[:, 0] / GOAL_SCALE, 0.0)
        ego[:, 3] = keep.astype(np.float64)
    ego[:, 4] = st["length"][ids] / LENGTH_SCALE
    ego[:, 5] = st["width"][ids] / WIDTH_SCALE

    # partners
    ddx = world.x[None, :] - ex[:, None]
    ddy = world.y[None, :] - ey[:, None]
    dist = np.hypot(ddx, ddy)
    allowed = world.active[None, :] & (np.arange(world.x.shape[0])[None, :] != ids[:, None]) & (dist <= radius)
    pid = _nearest_sorted(dist, allowed, M)
    pmask = pid >= 0
    safe = np.where(pmask, pid, 0)
    rx, ry = _to_frame(np.take_along_axis(ddx, safe, 1), np.take_along_axis(ddy, safe, 1), c, s)
    dh = world.heading[safe] - eh[:, None]
    partners = np.stack(
        [
            rx / pos_scale,
            ry / pos_scale,
            np.cos(dh),
            np.sin(dh),
            world.speed[safe] / SPEED_SCALE,
            st["length"][safe] / LENGTH_SCALE,
            st["width"][safe] / WIDTH_SCALE,
        ],
        axis=-1,
    )
    partners = np.where(pmask[..., None], partners, 0.0)

    # road graph
    pts, types, dirs = road_points(scenario, config.road_spacing)
    rdx = pts[None, :, 0] - ex[:, None]
    rdy = pts[None, :, 1] - ey[:, None]
    rdist = np.hypot(rdx, rdy)
    rid = _nearest_sorted(rdist, rdist <= radius, R)
    rmask = rid >= 0
    rsafe = np.where(rmask, rid, 0)
    qx, qy = _to_frame(np.take_along_axis(rdx, rsafe, 1), np.take_along_axis(rdy, rsafe, 1), c, s)
    rdh = dirs[rsafe] - eh[:, None]
    road = np.stack(
        [
            qx / ROAD_SCALE,
            qy / ROAD_SCALE,
            np.cos(rdh),
            np.sin(rdh),
            (types[rsafe] == 0).astype(np.float64),
            (types[rsafe] == 1).astype(np.float64),
        ],
        axis=-1,
    )
    road = np.where(rmask[..., None], road, 0.0)

    return Observation(
        np.clip(ego, -1.0, 1.0),
        np.clip(partners, -1.0, 1.0),
        pmask,
        np.clip(road, -1.0, 1.0),
        rmask,
        pid,
    )


def build_observation(world, agent_id: int, scenario, goal_dropout: bool = False, config: SimConfig = SimConfig()):
    return build_observations(world, scenario, [agent_id], [goal_dropout], config)


def build_global_context(world, agent_id: int, scenario, config: SimConfig = SimConfig()):
    return build_observations(world, scenario, [agent_id], None, config, context=True)


def obs_dims(config: SimConfig = SimConfig(), context: bool = False) -> dict:
    M = config.ctx_partners if context else config.max_partners
    R = config.ctx_road_points if context else config.max_road_points
    return {"ego": EGO_DIM, "partner": PARTNER_DIM, "road": ROAD_DIM, "M": M, "R": R}


# ------------------------------------------------------------- rollout dump

DUMP_COLUMNS = ("scenario_id", "step", "agent_id", "x", "y", "heading", "speed", "collided", "offroad", "goal")


def dump_rows(scenario_id: str, world0: WorldState, events: Sequence[StepEvents], first_step: int):
    """Per-sim-step rows (initial state included) for the rollout CSV."""
    rows = []
    n = world0.x.shape[0]
    for a in range(n):
        rows.append((scenario_id, first_step, a, world0.x[a], world0.y[a], world0.heading[a], world0.speed[a], 0, 0, 0))
    t = first_step
    for ev in events:
        for k in range(ev.poses.shape[0]):
            t += 1
            for a in range(n):
                p = ev.poses[k, a]
                rows.append(
                    (scenario_id, t, a, p[0], p[1], p[2], p[3], int(ev.collided_sub[k, a]), int(ev.offroad_sub[k, a]), int(ev.goal_sub[k, a]))
                )
    return rows


def write_dump(path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(DUMP_COLUMNS)
        for r in rows:
            wr.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4])), repr(float(r[5])), repr(float(r[6])), r[7], r[8], r[9]])
